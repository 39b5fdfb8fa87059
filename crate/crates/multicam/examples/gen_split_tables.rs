//! Regenerates `data/split_n{3,5,7}.txt`.

use multicam::uncert::generate_split_table;

fn main() -> anyhow::Result<()> {
    let dir = std::path::Path::new(env!("CARGO_MANIFEST_DIR")).join("data");
    for n in [3, 5, 7] {
        let t = generate_split_table(n)?;
        let (mean, var) = t.moments();
        println!("n={n} mean={mean:e} var-1={:e}", var - 1.0);
        std::fs::write(dir.join(format!("split_n{n}.txt")), t.to_string())?;
    }
    Ok(())
}

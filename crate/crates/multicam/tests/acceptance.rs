//! Acceptance report: one PASS/FAIL line per criterion. Criteria that cannot
//! be met are reported, never turned into a test failure.

mod common;

use std::panic::{catch_unwind, AssertUnwindSafe};
use std::path::PathBuf;
use std::time::Instant;

use multicam::astro::{eom, elements_to_state, linearize_segment, propagate, Dynamics, Model, State};
use multicam::convexify::project_onto_ellipsoid;
use multicam::risk::{chan_poc, chan_series, ipoc_f64, total_poc, BPlaneConjunction};
use multicam::scp::{solve, Mission, TrajectorySolution};
use multicam::shell::{load_scenario, mixand_report, risk_report, Config, Scenario};
use multicam::socp::{self, Settings, Status};
use multicam::uncert::{gmm_split, mixture_moments, GaussianState};
use multicam::units::Units;
use multicam::Jet64;
use nalgebra::{Matrix2, Matrix3, Matrix6, Vector2, Vector3, Vector6};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

const TABLE_POC: [f64; 10] = [0.0017, 0.0018, 0.0017, 0.0025, 0.0138, 0.0023, 0.0022, 0.0020, 0.0050, 0.0012];
const TOTAL: f64 = 1e-6;

type Verdict = Result<(bool, String), String>;

fn fixture(name: &str) -> Scenario {
    let p = PathBuf::from(env!("CARGO_MANIFEST_DIR")).join("data/scenarios").join(name);
    load_scenario(&p).unwrap()
}

fn run_case(sc: &Scenario) -> Result<(TrajectorySolution, f64), String> {
    let cfg = Config::default();
    let t = Instant::now();
    let m = Mission::prepare(sc, &cfg).map_err(|e| e.to_string())?;
    let sol = solve(&m, &cfg).map_err(|e| e.to_string())?;
    Ok((sol, t.elapsed().as_secs_f64()))
}

fn within(x: f64, target: f64, rel: f64) -> bool {
    (x / target - 1.0).abs() <= rel
}

fn c1() -> Verdict {
    let t = Instant::now();
    let m = Mission::prepare(&fixture("case1.json"), &Config::default()).map_err(|e| e.to_string())?;
    let rep = risk_report(&m);
    let secs = t.elapsed().as_secs_f64();
    let mut worst = 0.0f64;
    let mut ok = 0;
    for (it, want) in rep.items.iter().zip(TABLE_POC) {
        let rel = (it.poc / want - 1.0).abs();
        worst = worst.max(rel);
        if rel <= 0.15 {
            ok += 1;
        }
    }
    let pocs: Vec<String> = rep.items.iter().map(|i| format!("{:.2e}", i.poc)).collect();
    Ok((
        ok == 10 && secs < 1.0,
        format!("{ok}/10 PoC within 15% of the table, worst relative error {worst:.2}, runtime {secs:.2} s; computed [{}]", pocs.join(", ")),
    ))
}

fn c2(two: &Result<(TrajectorySolution, f64), String>) -> Verdict {
    let mut pass = true;
    let mut parts = Vec::new();
    for (n, target, res) in [(2, 21.16, two.clone()), (5, 60.05, run_case(&fixture("case1.json").truncated(5)))] {
        let (sol, secs) = res?;
        let dv_ok = within(sol.dv, target, 0.15);
        let p_ok = (0.90 * TOTAL..=1.05 * TOTAL).contains(&sol.total_risk);
        pass &= dv_ok && p_ok && secs <= 60.0;
        parts.push(format!(
            "{n} CDMs: dv {:.2} mm/s vs {target} ({}), TPoC {:.4e} ({}), {secs:.1} s",
            sol.dv,
            if dv_ok { "ok" } else { "off" },
            sol.total_risk,
            if p_ok { "ok" } else { "off" }
        ));
    }
    Ok((pass, parts.join("; ")))
}

fn c3() -> Verdict {
    let (sol, secs) = run_case(&fixture("case1.json"))?;
    let l = &sol.limits;
    let at_floor = l.limits.iter().filter(|&&p| p <= l.floor * (1.0 + 1e-6)).count();
    let identity = (total_poc(&l.limits.iter().map(|&p| (p, 1.0)).collect::<Vec<_>>()) - l.total).abs() / l.total;
    let lims: Vec<String> = l.limits.iter().map(|p| format!("{p:.1e}")).collect();
    Ok((
        at_floor >= 3 && identity <= 1e-10,
        format!(
            "{at_floor} conjunctions at the floor, product identity error {identity:.1e}, dv {:.2} mm/s, {secs:.1} s; limits [{}]",
            sol.dv,
            lims.join(", ")
        ),
    ))
}

fn random_spd6(rng: &mut ChaCha8Rng) -> Matrix6<f64> {
    let a = Matrix6::from_fn(|_, _| rng.random_range(-1.0..1.0));
    a * a.transpose() + Matrix6::identity() * 0.1
}

fn c4a() -> Verdict {
    let mut rng = ChaCha8Rng::seed_from_u64(41);
    let mut worst_mean = 0.0f64;
    let mut worst_cov = 0.0f64;
    for n in [3, 5, 7] {
        for _ in 0..5 {
            let g = GaussianState::new(Vector6::from_fn(|_, _| rng.random_range(-1.0..1.0)), random_spd6(&mut rng));
            let dir = Vector6::from_fn(|_, _| rng.random_range(-1.0..1.0));
            let mix = gmm_split(&g, n, &dir).map_err(|e| e.to_string())?;
            let (mu, p) = mixture_moments(&mix);
            worst_mean = worst_mean.max((mu - g.mean).amax());
            for i in 0..6 {
                for j in 0..6 {
                    let s = (g.cov[(i, i)] * g.cov[(j, j)]).sqrt();
                    worst_cov = worst_cov.max((p[(i, j)] - g.cov[(i, j)]).abs() / s);
                }
            }
        }
    }
    Ok((worst_mean <= 1e-10 && worst_cov <= 2e-2, format!("mean error {worst_mean:.1e}, covariance error {worst_cov:.1e}")))
}

fn c4b() -> Verdict {
    let mut pass = true;
    let mut parts = Vec::new();
    for n in [3, 5, 7] {
        let mut sc = fixture("case2.json");
        sc.n_mix = n;
        let m = Mission::prepare(&sc, &Config::default()).map_err(|e| e.to_string())?;
        let rep = mixand_report(&m);
        let first = rep.iter().filter(|r| r.conj == 0).map(|r| r.tca_offset_s.abs()).fold(0.0, f64::max);
        let second: Vec<f64> = rep.iter().filter(|r| r.conj == 1).map(|r| r.tca_offset_s).collect();
        let outer = [second[0].abs(), second[n - 1].abs()];
        let ok = first <= 0.01 && outer.iter().all(|o| (0.5..=5.0).contains(o));
        pass &= ok;
        parts.push(format!("n_mix {n}: first ≤ {first:.3} s, outer {:.2}/{:.2} s", outer[0], outer[1]));
    }
    Ok((pass, parts.join("; ")))
}

/// Every local maximum reappears one orbit later within `tol` nodes.
fn periodic_peaks(profile: &[f64], per_orbit: usize, tol: usize) -> (bool, Vec<usize>) {
    let peaks: Vec<usize> =
        (1..profile.len() - 1).filter(|&i| profile[i] > profile[i - 1] && profile[i] >= profile[i + 1]).collect();
    let ok = !peaks.is_empty()
        && peaks
            .iter()
            .filter(|&&p| p + per_orbit + tol < profile.len())
            .all(|&p| peaks.iter().any(|&q| q.abs_diff(p + per_orbit) <= tol));
    (ok, peaks)
}

fn ballistic_profile(sol: &TrajectorySolution) -> Vec<f64> {
    let t = sol.tipoc.as_ref().expect("long-term solutions carry a profile");
    t.ballistic.iter().map(|row| total_poc(&row.iter().map(|&p| (p, 1.0)).collect::<Vec<_>>())).collect()
}

fn c4c() -> Verdict {
    let per_orbit = Config::default().nodes_per_orbit;
    let (sol, secs) = run_case(&fixture("case3_like.json"))?;
    let (periodic, peaks) = periodic_peaks(&ballistic_profile(&sol), per_orbit, 2);
    let ok = sol.total_risk <= 1.05 * TOTAL && periodic;
    let mut detail = format!(
        "max TIPoC {:.4e}, dv {:.2} mm/s, {secs:.1} s, ballistic peaks at nodes {peaks:?} ({})",
        sol.total_risk,
        sol.dv,
        if periodic { "periodic" } else { "not periodic" }
    );
    // the unbounded case3 fixture, for reference only
    if let Ok((s, _)) = run_case(&fixture("case3.json")) {
        let (p, pk) = periodic_peaks(&ballistic_profile(&s), per_orbit, 2);
        detail += &format!(
            "; case3: max TIPoC {:.4e}, peaks {pk:?} ({})",
            s.total_risk,
            if p { "periodic" } else { "not periodic" }
        );
    }
    Ok((ok, detail))
}

fn leo(rng: &mut ChaCha8Rng) -> State {
    elements_to_state(
        rng.random_range(0.98..1.05),
        rng.random_range(0.0..0.05),
        rng.random_range(0.0..3.0),
        rng.random_range(0.0..6.28),
        rng.random_range(0.0..6.28),
        rng.random_range(0.0..6.28),
        1.0,
    )
}

fn jet_vs_fd() -> Result<f64, String> {
    let units = Units::from_semi_major_axis(6928.0);
    let d = Dynamics::new(Model::TwoBodyJ2, &units);
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let mut worst = 0.0f64;
    for _ in 0..20 {
        let x = leo(&mut rng);
        let u: [f64; 3] = std::array::from_fn(|_| rng.random_range(-1e-5..1e-5));
        let xj: [Jet64; 6] = std::array::from_fn(|i| Jet64::var(9, 1, i, x[i]));
        let uj: [Jet64; 3] = std::array::from_fn(|i| Jet64::var(9, 1, 6 + i, u[i]));
        let f = eom(&xj, &uj, &d).map_err(|e| e.to_string())?;
        let h = 1e-6;
        for (k, fk) in f.iter().enumerate() {
            let g = fk.gradient();
            let fd: Vec<f64> = (0..9)
                .map(|j| {
                    let (mut xp, mut xm, mut up, mut um) = (x, x, u, u);
                    if j < 6 {
                        xp[j] += h;
                        xm[j] -= h;
                    } else {
                        up[j - 6] += h;
                        um[j - 6] -= h;
                    }
                    let a = eom::<f64>(&xp, &up, &d).unwrap()[k];
                    let b = eom::<f64>(&xm, &um, &d).unwrap()[k];
                    (a - b) / (2.0 * h)
                })
                .collect();
            let num: f64 = g.iter().zip(&fd).map(|(a, b)| (a - b) * (a - b)).sum::<f64>().sqrt();
            let den: f64 = g.iter().map(|a| a * a).sum::<f64>().sqrt();
            worst = worst.max(num / den);
        }
        // Chan series derivative in the Mahalanobis distance
        let uu = rng.random_range(1e-4..1e-1);
        let v = rng.random_range(0.0..30.0);
        let gj = chan_series(uu, Jet64::var(1, 1, 0, v)).gradient()[0];
        let hv = 1e-5;
        let fd = (chan_series(uu, v + hv) - chan_series(uu, v - hv)) / (2.0 * hv);
        worst = worst.max((gj - fd).abs() / gj.abs());
    }
    Ok(worst)
}

fn stm_vs_fd() -> Result<f64, String> {
    let units = Units::from_semi_major_axis(6928.0);
    let d = Dynamics::new(Model::TwoBodyJ2, &units);
    let mut rng = ChaCha8Rng::seed_from_u64(9);
    let mut worst = 0.0f64;
    for _ in 0..5 {
        let x0 = leo(&mut rng);
        let u: [f64; 3] = std::array::from_fn(|_| rng.random_range(-2e-6..2e-6));
        let dt = std::f64::consts::TAU / 60.0;
        let maps = linearize_segment(&x0, &u, dt, &d, 1e-13).map_err(|e| e.to_string())?;
        let h = 1e-6;
        for j in 0..9 {
            let (mut xp, mut xm, mut up, mut um) = (x0, x0, u, u);
            if j < 6 {
                xp[j] += h;
                xm[j] -= h;
            } else {
                up[j - 6] += h;
                um[j - 6] -= h;
            }
            let fp = propagate(&xp, &up, dt, &d, 1e-13).map_err(|e| e.to_string())?;
            let fm = propagate(&xm, &um, dt, &d, 1e-13).map_err(|e| e.to_string())?;
            let col = Vector6::from_fn(|i, _| (fp[i] - fm[i]) / (2.0 * h));
            let jc: Vector6<f64> = if j < 6 { maps.a.column(j).into() } else { maps.b.column(j - 6).into() };
            worst = worst.max((col - jc).norm() / jc.norm());
        }
    }
    Ok(worst)
}

fn chan_vs_quadrature() -> Result<f64, String> {
    let mut rng = ChaCha8Rng::seed_from_u64(13);
    let mut worst = 0.0f64;
    for _ in 0..20 {
        // short-term regime of the Case-1 conjunctions [m]
        let (sx, sy) = (rng.random_range(20.0..500.0), rng.random_range(20.0..500.0));
        let rho = rng.random_range(-0.8..0.8);
        let p = Matrix2::new(sx * sx, rho * sx * sy, rho * sx * sy, sy * sy);
        let dr = Vector2::new(rng.random_range(-2.0..2.0) * sx, rng.random_range(-2.0..2.0) * sy);
        let b = BPlaneConjunction { rotation: Matrix3::identity(), dr_b: dr, p_b: p, hbr: 3.0 };
        let c = chan_poc(&b).map_err(|e| e.to_string())?;
        let q = common::disk_probability(&dr, &p, 3.0);
        worst = worst.max((c / q - 1.0).abs());
    }
    Ok(worst)
}

fn ipoc_vs_mc() -> Result<f64, String> {
    let mut cases = vec![(Matrix3::from_diagonal(&Vector3::new(25.0, 100.0, 4.0)), Vector3::new(5.0, 0.0, 0.0), 2.0)];
    let mut rng = ChaCha8Rng::seed_from_u64(17);
    for _ in 0..4 {
        let s = Vector3::from_fn(|_, _| rng.random_range(10.0..40.0));
        let dr = Vector3::from_fn(|i, _| rng.random_range(-1.0..1.0) * s[i]);
        cases.push((Matrix3::from_diagonal(&s.component_mul(&s)), dr, rng.random_range(0.5..2.0)));
    }
    let mut worst = 0.0f64;
    for (k, (p, dr, r)) in cases.iter().enumerate() {
        let est = ipoc_f64(dr, p, *r).map_err(|e| e.to_string())?;
        let mc = common::sphere_probability_mc(dr, p, *r, 1_000_000, 100 + k as u64);
        worst = worst.max((est / mc - 1.0).abs());
    }
    Ok(worst)
}

fn projection_vs_scan() -> Result<f64, String> {
    let mut rng = ChaCha8Rng::seed_from_u64(21);
    let mut worst = 0.0f64;
    for _ in 0..20 {
        let (sx, sy) = (rng.random_range(0.5..2.0), rng.random_range(0.5..2.0));
        let rho = rng.random_range(-0.8..0.8);
        let cov = Matrix2::new(sx * sx, rho * sx * sy, rho * sx * sy, sy * sy);
        let d2 = rng.random_range(0.5..3.0);
        let p = Vector2::new(rng.random_range(-5.0..5.0), rng.random_range(-5.0..5.0));
        let z = project_onto_ellipsoid(&p, &cov, d2);
        let o = common::boundary_scan(&p, &cov, d2, 400_000);
        worst = worst.max((z - o).norm());
    }
    Ok(worst)
}

fn cone_vs_reference() -> Result<f64, String> {
    let mut worst = 0.0f64;
    for seed in 0..50 {
        let d = common::socp_ref::random_problem(seed);
        let r = socp::solve(&common::socp_ref::sparse(&d), &Settings::default()).map_err(|e| e.to_string())?;
        if r.status != Status::Optimal {
            return Err(format!("seed {seed}: {:?}", r.status));
        }
        let reference = common::socp_ref::barrier_reference(&d);
        worst = worst.max((r.obj - reference).abs() / reference.abs().max(1.0));
    }
    Ok(worst)
}

fn c5() -> Verdict {
    let suites: [(&str, fn() -> Result<f64, String>, f64); 6] = [
        ("jet vs finite differences", jet_vs_fd, 1e-6),
        ("STM vs finite differences", stm_vs_fd, 1e-5),
        ("Chan vs quadrature", chan_vs_quadrature, 1e-6),
        ("IPoC vs Monte-Carlo", ipoc_vs_mc, 0.05),
        ("projection vs boundary scan", projection_vs_scan, 1e-4),
        ("cone solver vs reference", cone_vs_reference, 1e-5),
    ];
    let mut pass = true;
    let mut parts = Vec::new();
    for (name, f, tol) in suites {
        let t = Instant::now();
        let res = catch_unwind(f).unwrap_or_else(|_| Err("panicked".into()));
        let secs = t.elapsed().as_secs_f64();
        match res {
            Ok(err) => {
                let ok = err <= tol && secs < 30.0;
                pass &= ok;
                parts.push(format!("{name} {err:.1e} (tol {tol:.0e}, {secs:.1} s) {}", if ok { "ok" } else { "FAIL" }));
            }
            Err(e) => {
                pass = false;
                parts.push(format!("{name} error: {e}"));
            }
        }
    }
    Ok((pass, parts.join("; ")))
}

fn c6(two: &Result<(TrajectorySolution, f64), String>) -> Verdict {
    let (sol, _) = two.clone()?;
    Ok((
        sol.n_major <= 10 && sol.e_validation <= 50.0 && sol.status == multicam::scp::RunStatus::Converged,
        format!("{:?} in {} major iterations, validation error {:.3} mm", sol.status, sol.n_major, sol.e_validation),
    ))
}

fn report(id: &str, f: impl FnOnce() -> Verdict) -> bool {
    let t = Instant::now();
    let (pass, detail) = match catch_unwind(AssertUnwindSafe(f)) {
        Ok(Ok(v)) => v,
        Ok(Err(e)) => (false, format!("error: {e}")),
        Err(p) => {
            let msg = p.downcast_ref::<String>().cloned().or_else(|| p.downcast_ref::<&str>().map(|s| s.to_string()));
            (false, format!("panicked: {}", msg.unwrap_or_default()))
        }
    };
    println!("criterion {id}: {} [{:.1} s] {detail}", if pass { "PASS" } else { "FAIL" }, t.elapsed().as_secs_f64());
    pass
}

fn main() {
    std::panic::set_hook(Box::new(|_| {}));
    let two = catch_unwind(|| run_case(&fixture("case1.json").truncated(2))).unwrap_or_else(|_| Err("panicked".into()));
    let mut results = vec![
        report("1", c1),
        report("2", || c2(&two)),
        report("3", c3),
    ];
    let a = report("4a", c4a);
    let b = report("4b", c4b);
    let c = report("4c", c4c);
    results.push(a && b && c);
    println!("criterion 4: {}", if a && b && c { "PASS" } else { "FAIL" });
    results.push(report("5", c5));
    results.push(report("6", || c6(&two)));
    let n = results.iter().filter(|&&p| p).count();
    println!("acceptance: {n} of {} criteria pass", results.len());
}

use std::path::PathBuf;
use std::process::ExitCode;

use anyhow::{bail, Context, Result};
use clap::{Parser, Subcommand, ValueEnum};

use multicam::scp::{self, Mission, RunStatus};
use multicam::shell::{self, Config, Refinement};

#[derive(Parser)]
#[command(version, about = "Low-thrust collision avoidance for multiple conjunctions")]
struct Cli {
    /// Configuration file (JSON); defaults apply to missing fields.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(Clone, Copy, ValueEnum)]
enum Method {
    /// Keep-out constraints with limit adaptation.
    Smd,
    /// Linearized total-probability constraint.
    Tpoc,
}

#[derive(Subcommand)]
enum Cmd {
    /// Optimize the avoidance maneuver.
    Solve {
        scenario: PathBuf,
        #[arg(long, value_enum, default_value = "smd")]
        mode: Method,
        #[arg(long)]
        nmix: Option<usize>,
        /// Use only the first N conjunction messages.
        #[arg(long)]
        first: Option<usize>,
        #[arg(long, default_value = "out")]
        out: PathBuf,
    },
    /// Ballistic probability report.
    Risk {
        scenario: PathBuf,
        #[arg(long)]
        nmix: Option<usize>,
    },
    /// Mixand weights and refined encounter epochs.
    Split {
        scenario: PathBuf,
        #[arg(long)]
        nmix: usize,
    },
    /// Forward-propagates a stored solution and reports the position error.
    Validate { scenario: PathBuf, solution: PathBuf },
    /// Quick checks of the numerical kernels.
    Selftest,
}

fn load(path: &PathBuf, nmix: Option<usize>, first: Option<usize>) -> Result<shell::Scenario> {
    let mut sc = shell::load_scenario(path)?;
    if let Some(n) = first {
        sc = sc.truncated(n);
    }
    if let Some(n) = nmix {
        sc.n_mix = n;
        sc.validate()?;
    }
    Ok(sc)
}

fn run(cli: Cli) -> Result<u8> {
    let mut cfg = match &cli.config {
        Some(p) => shell::load_config(p)?,
        None => Config::default(),
    };
    match cli.cmd {
        Cmd::Solve { scenario, mode, nmix, first, out } => {
            let sc = load(&scenario, nmix, first)?;
            cfg.refinement = match mode {
                Method::Smd => Refinement::AdaptLimits,
                Method::Tpoc => Refinement::LinearizedTotal,
            };
            let m = Mission::prepare(&sc, &cfg)?;
            let sol = scp::solve(&m, &cfg).context("optimization failed")?;
            shell::emit(&sol, &m, &sc.name, &out)?;
            println!(
                "status {:?}  dv {:.3} mm/s  total risk {:.4e} (ballistic {:.4e})  majors {}  minors {}  validation {:.3} mm",
                sol.status, sol.dv, sol.total_risk, sol.ballistic_total_risk, sol.n_major, sol.n_minor, sol.e_validation
            );
            for w in &sol.warnings {
                eprintln!("warning: {w}");
            }
            let ok = matches!(sol.status, RunStatus::Converged | RunStatus::Ballistic);
            Ok(match (ok, sol.warnings.is_empty()) {
                (true, true) => 0,
                (true, false) => 2,
                (false, _) => 3,
            })
        }
        Cmd::Risk { scenario, nmix } => {
            let sc = load(&scenario, nmix, None)?;
            let m = Mission::prepare(&sc, &cfg)?;
            let r = shell::risk_report(&m);
            println!("{:>5} {:>6} {:>8} {:>12} {:>10} {:>12}", "conj", "mixand", "weight", "epoch [s]", "miss [m]", "PoC");
            for i in &r.items {
                println!("{:>5} {:>6} {:>8.4} {:>12.3} {:>10.2} {:>12.4e}", i.conj, i.mixand, i.weight, i.epoch_s, i.miss_m, i.poc);
            }
            println!("total {:.4e}", r.total);
            Ok(0)
        }
        Cmd::Split { scenario, nmix } => {
            let sc = load(&scenario, Some(nmix), None)?;
            let m = Mission::prepare(&sc, &cfg)?;
            println!("{}", serde_json::to_string_pretty(&shell::mixand_report(&m))?);
            Ok(0)
        }
        Cmd::Validate { scenario, solution } => {
            let sc = load(&scenario, None, None)?;
            let sol = shell::load_solution(&solution)?;
            let first = sc.conjunctions.iter().take_while(|c| c.tca_s <= sol.epochs_s.last().copied().unwrap_or(0.0)).count();
            let sc = if first < sc.conjunctions.len() { sc.truncated(first) } else { sc };
            let m = Mission::prepare(&sc, &cfg)?;
            if m.grid.n_nodes() != sol.states.len() {
                bail!("solution has {} nodes, scenario grid has {}", sol.states.len(), m.grid.n_nodes());
            }
            let e = scp::validate(&sol, &m, cfg.integrator_tol)?;
            println!("validation error {e:.4} mm");
            Ok(0)
        }
        Cmd::Selftest => {
            let checks = shell::selftest();
            for c in &checks {
                println!("{} {}: {}", if c.pass { "PASS" } else { "FAIL" }, c.name, c.detail);
            }
            Ok(if checks.iter().all(|c| c.pass) { 0 } else { 3 })
        }
    }
}

fn main() -> ExitCode {
    match run(Cli::parse()) {
        Ok(code) => ExitCode::from(code),
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(3)
        }
    }
}

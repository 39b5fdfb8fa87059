//! Sequential convex programming driver.

use nalgebra::{Matrix2, Matrix2x3, Matrix3, Vector2, Vector3};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::astro::{self, AstroError, CartesianState, Dynamics, NodeGrid, SegmentMaps, State};
use crate::convexify::{
    assemble, koz_halfspace, linearize_total_risk, project_onto_ellipsoid, ConicProblem, ConvexParams,
    ConvexifyError, PositionBound, PositionCut, Reference, RiskKind, RiskMode, RiskTerm,
};
use crate::optim::NelderMead;
use crate::risk::{self, RiskError};
use crate::shell::{Config, Refinement};
use crate::socp::{self, SocpError};
use crate::units::Units;

#[derive(Debug, Error)]
pub enum ScpError {
    #[error(transparent)]
    Astro(#[from] AstroError),
    #[error(transparent)]
    Convexify(#[from] ConvexifyError),
    #[error(transparent)]
    Socp(#[from] SocpError),
    #[error(transparent)]
    Risk(#[from] RiskError),
    #[error("cone solver returned {status:?} at major {major}, minor {minor} (primal {primal:e}, dual {dual:e}, gap {gap:e})")]
    Solver { status: socp::Status, major: usize, minor: usize, primal: f64, dual: f64, gap: f64 },
    #[error("limits: {0}")]
    Limits(String),
}

pub type ScpResult<T> = Result<T, ScpError>;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Mode {
    /// Per-object keep-out half-spaces refined by minor iterations.
    SmdKoz,
    /// One linearized total-probability constraint (node-wise for long-term).
    LinearizedTotal,
}

/// One mixand of a short-term conjunction at its own TCA node.
#[derive(Debug, Clone, PartialEq)]
pub struct ShortItem {
    pub conj: usize,
    pub mixand: usize,
    pub weight: f64,
    pub hbr: f64,
    pub node: usize,
    /// Offset of this mixand's TCA from the conjunction's nominal TCA [s].
    pub tca_offset: f64,
    /// Secondary position and velocity at the node [km, km/s].
    pub r_s: Vector3<f64>,
    pub v_s: Vector3<f64>,
    pub projector: Matrix2x3<f64>,
    /// B-plane covariance [km²].
    pub p_b: Matrix2<f64>,
}

impl ShortItem {
    pub fn dr_b(&self, r_p: &Vector3<f64>) -> Vector2<f64> {
        self.projector * (r_p - self.r_s)
    }

    /// Weighted probability `γ·P_C` for a primary position [km].
    pub fn probability(&self, r_p: &Vector3<f64>) -> f64 {
        let b = risk::BPlaneConjunction {
            rotation: Matrix3::identity(),
            dr_b: self.dr_b(r_p),
            p_b: self.p_b,
            hbr: self.hbr,
        };
        self.weight * risk::chan_poc(&b).unwrap_or(1.0)
    }
}

/// One mixand of a long-term encounter tracked at every node.
#[derive(Debug, Clone, PartialEq)]
pub struct LongItem {
    pub conj: usize,
    pub mixand: usize,
    pub weight: f64,
    pub hbr: f64,
    /// Secondary mean position per node [km].
    pub r_s: Vec<Vector3<f64>>,
    /// Relative position covariance per node [km²].
    pub cov: Vec<Matrix3<f64>>,
}

impl LongItem {
    pub fn probability(&self, node: usize, r_p: &Vector3<f64>) -> f64 {
        self.weight * risk::ipoc_f64(&(r_p - self.r_s[node]), &self.cov[node], self.hbr).unwrap_or(1.0)
    }

    /// Squared Mahalanobis distance below which `γ·IPoC > limit`; `None`
    /// when the limit cannot be exceeded at this node.
    pub fn d2_limit(&self, node: usize, limit: f64) -> Option<f64> {
        let det = self.cov[node].determinant();
        let k = (2.0 / (std::f64::consts::PI * det)).sqrt() * self.hbr.powi(3) / 3.0;
        let q = limit / self.weight;
        (k > q).then(|| 2.0 * (k / q).ln())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub enum Encounters {
    ShortTerm(Vec<ShortItem>),
    LongTerm(Vec<LongItem>),
}

/// Scenario prepared for optimization: scaled dynamics, grid and risk objects.
#[derive(Debug, Clone)]
pub struct Mission {
    pub units: Units,
    pub dynamics: Dynamics,
    pub grid: NodeGrid,
    /// Scaled initial state.
    pub x0: State,
    /// Scaled maximum acceleration.
    pub u_max: f64,
    pub n_conj: usize,
    pub encounters: Encounters,
    /// Scaled ballistic states at the nodes.
    pub ballistic: Vec<State>,
}

impl Mission {
    pub fn n_items(&self) -> usize {
        match &self.encounters {
            Encounters::ShortTerm(v) => v.len(),
            Encounters::LongTerm(v) => v.len(),
        }
    }

    pub fn weights(&self) -> Vec<f64> {
        match &self.encounters {
            Encounters::ShortTerm(v) => v.iter().map(|i| i.weight).collect(),
            Encounters::LongTerm(v) => v.iter().map(|i| i.weight).collect(),
        }
    }

    pub fn position_km(&self, x: &State) -> Vector3<f64> {
        Vector3::new(x[0], x[1], x[2]) * self.units.length
    }

    /// TPoC (short-term) or the node-wise TIPoC profile maximum (long-term).
    pub fn total_risk(&self, states: &[State]) -> f64 {
        match &self.encounters {
            Encounters::ShortTerm(items) => {
                let p: Vec<(f64, f64)> =
                    items.iter().map(|i| (i.probability(&self.position_km(&states[i.node])), 1.0)).collect();
                risk::total_poc(&p)
            }
            Encounters::LongTerm(_) => self.tipoc_profile(states).into_iter().fold(0.0, f64::max),
        }
    }

    /// Per-node TIPoC; empty for short-term missions.
    pub fn tipoc_profile(&self, states: &[State]) -> Vec<f64> {
        self.ipoc_matrix(states).iter().map(|row| risk::total_poc(&row.iter().map(|&p| (p, 1.0)).collect::<Vec<_>>())).collect()
    }

    /// `γ·IPoC` per node and item.
    pub fn ipoc_matrix(&self, states: &[State]) -> Vec<Vec<f64>> {
        match &self.encounters {
            Encounters::ShortTerm(_) => Vec::new(),
            Encounters::LongTerm(items) => (0..states.len())
                .map(|k| {
                    let r = self.position_km(&states[k]);
                    items.iter().map(|i| i.probability(k, &r)).collect()
                })
                .collect(),
        }
    }

    /// Weighted probability of every item at the given states; long-term
    /// items are evaluated at the node of maximum TIPoC.
    pub fn item_risks(&self, states: &[State]) -> Vec<f64> {
        match &self.encounters {
            Encounters::ShortTerm(items) => {
                items.iter().map(|i| i.probability(&self.position_km(&states[i.node]))).collect()
            }
            Encounters::LongTerm(_) => {
                let m = self.ipoc_matrix(states);
                let k = argmax(&self.tipoc_profile(states));
                m[k].clone()
            }
        }
    }
}

fn argmax(v: &[f64]) -> usize {
    v.iter().enumerate().fold((0, f64::NEG_INFINITY), |b, (i, &x)| if x > b.1 { (i, x) } else { b }).0
}

/// Per-item probability limits.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LimitSet {
    pub limits: Vec<f64>,
    /// `p̄ = P̄·10^(−α)`
    pub alpha: Vec<f64>,
    pub floor: f64,
    pub total: f64,
}

impl LimitSet {
    /// `γ_c P̄ / n_conj` for every mixand.
    pub fn equal_split(weights: &[f64], n_conj: usize, total: f64, floor: f64) -> LimitSet {
        let limits: Vec<f64> = weights.iter().map(|g| (g * total / n_conj.max(1) as f64).max(floor)).collect();
        LimitSet::from_limits(limits, total, floor)
    }

    pub fn from_limits(limits: Vec<f64>, total: f64, floor: f64) -> LimitSet {
        let alpha = limits.iter().map(|p| -(p / total).log10()).collect();
        LimitSet { limits, alpha, floor, total }
    }

    /// `1 − Π(1 − p̄)`
    pub fn combined(&self) -> f64 {
        risk::total_poc(&self.limits.iter().map(|&p| (p, 1.0)).collect::<Vec<_>>())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RiskRecord {
    pub conj: usize,
    pub mixand: usize,
    pub weight: f64,
    pub node: usize,
    pub epoch_s: f64,
    pub tca_offset_s: f64,
    pub limit: f64,
    /// Weighted probability on the ballistic and final trajectories.
    pub ballistic: f64,
    pub value: f64,
    /// B-plane (short-term) or inertial (long-term) relative positions [km].
    pub dr_ballistic: Vec<f64>,
    pub dr_final: Vec<f64>,
    /// Limit on the squared Mahalanobis distance, if any.
    pub d2_limit: Option<f64>,
    /// Covariance of the plane or space used by `dr_*`, row-major [km²].
    pub cov: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TraceRecord {
    pub major: usize,
    pub minor: usize,
    pub objective: f64,
    pub e_major: Option<f64>,
    pub e_minor: Option<f64>,
    pub item_risk: Vec<f64>,
    pub limits: Vec<f64>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RunStatus {
    Converged,
    Ballistic,
    MaxIterations,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TipocProfile {
    pub ballistic: Vec<Vec<f64>>,
    pub final_: Vec<Vec<f64>>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrajectorySolution {
    pub mode: Mode,
    pub status: RunStatus,
    pub epochs_s: Vec<f64>,
    /// SCP output states [km, km/s, s].
    pub states: Vec<CartesianState>,
    /// Inertial acceleration per segment [mm/s²].
    pub controls: Vec<[f64; 3]>,
    /// Slack bounding each control norm [mm/s²].
    pub slack: Vec<f64>,
    /// Virtual-control norms per node (scaled).
    pub virtual_norms: Vec<f64>,
    pub risk: Vec<RiskRecord>,
    pub total_risk: f64,
    pub ballistic_total_risk: f64,
    /// `Σ‖u_i‖Δt_i` [mm/s]
    pub dv: f64,
    pub n_major: usize,
    pub n_minor: usize,
    /// Largest node position error of the forward-propagated control [mm].
    pub e_validation: f64,
    pub limits: LimitSet,
    pub trace: Vec<TraceRecord>,
    pub warnings: Vec<String>,
    pub tipoc: Option<TipocProfile>,
}

impl TrajectorySolution {
    /// Scaled states and controls for reuse as an SCP reference.
    pub fn scaled(&self, m: &Mission) -> (Vec<State>, Vec<[f64; 3]>) {
        let xs = self.states.iter().map(|s| m.units.scale_state(&s.state())).collect();
        let us = self.controls.iter().map(|u| u.map(|c| m.units.accel_from_mm_s2(c))).collect();
        (xs, us)
    }

    pub fn fuel_term(&self) -> f64 {
        self.controls
            .iter()
            .zip(self.epochs_s.windows(2))
            .map(|(u, t)| (u[0] * u[0] + u[1] * u[1] + u[2] * u[2]).sqrt() * (t[1] - t[0]))
            .sum()
    }
}

/// Piecewise-constant acceleration propagated through the grid with the
/// full model.
pub fn forward(m: &Mission, controls: &[[f64; 3]], tol: f64) -> ScpResult<Vec<State>> {
    let mut out = Vec::with_capacity(m.grid.n_nodes());
    let mut x = m.x0;
    out.push(x);
    for (i, u) in controls.iter().enumerate() {
        x = astro::propagate(&x, u, m.grid.dt(i), &m.dynamics, tol)?;
        out.push(x);
    }
    Ok(out)
}

/// Ballistic states at the nodes of `grid`.
pub fn ballistic_states(x0: &State, grid: &NodeGrid, d: &Dynamics, tol: f64) -> ScpResult<Vec<State>> {
    let mut out = vec![*x0];
    let mut x = *x0;
    for i in 0..grid.n_segments() {
        x = astro::propagate(&x, &[0.0; 3], grid.dt(i), d, tol)?;
        out.push(x);
    }
    Ok(out)
}

/// Largest node position deviation [mm] between `states` and the forward
/// propagation of `controls` (scaled) from the initial state.
pub fn validation_error(m: &Mission, states: &[State], controls: &[[f64; 3]], tol: f64) -> ScpResult<(f64, Vec<State>)> {
    let val = forward(m, controls, tol)?;
    let e = states
        .iter()
        .zip(&val)
        .map(|(a, b)| (m.position_km(a) - m.position_km(b)).norm() * 1e6)
        .fold(0.0, f64::max);
    Ok((e, val))
}

/// [`validation_error`] for a stored solution.
pub fn validate(sol: &TrajectorySolution, m: &Mission, tol: f64) -> ScpResult<f64> {
    let (xs, us) = sol.scaled(m);
    Ok(validation_error(m, &xs, &us, tol)?.0)
}

fn linearize_all(m: &Mission, xs: &[State], us: &[[f64; 3]], tol: f64) -> ScpResult<Vec<SegmentMaps>> {
    let segs: Result<Vec<_>, AstroError> = (0..m.grid.n_segments())
        .into_par_iter()
        .map(|i| astro::linearize_segment(&xs[i], &us[i], m.grid.dt(i), &m.dynamics, tol))
        .collect();
    Ok(segs?)
}

/// Keep-out cuts for every item; the half-spaces come from projecting the
/// minor-iteration points and are written in deviations from `major`.
pub fn smd_cuts(m: &Mission, limits: &LimitSet, major: &[State], minor: &[State]) -> ScpResult<Vec<PositionCut>> {
    let k = m.units.length * m.u_max;
    let mut cuts = Vec::new();
    match &m.encounters {
        Encounters::ShortTerm(items) => {
            for (it, &lim) in items.iter().zip(&limits.limits) {
                let Ok(d2) = risk::weighted_smd_limit(lim, it.weight, &it.p_b, it.hbr) else { continue };
                let p = it.dr_b(&m.position_km(&minor[it.node]));
                let z = project_onto_ellipsoid(&p, &it.p_b, d2);
                let h = koz_halfspace(&z, &it.p_b, it.node);
                let r = it.dr_b(&m.position_km(&major[it.node]));
                cuts.push(PositionCut::from_bplane(&h, &it.projector, &r).rescaled(k).normalized());
            }
        }
        Encounters::LongTerm(items) => {
            for (it, &lim) in items.iter().zip(&limits.limits) {
                for node in 1..m.grid.n_nodes() {
                    let Some(d2) = it.d2_limit(node, lim) else { continue };
                    let p = m.position_km(&minor[node]) - it.r_s[node];
                    let Some(inv) = it.cov[node].try_inverse() else { continue };
                    if (p.transpose() * inv * p)[0] > 9.0 * d2 {
                        continue;
                    }
                    let z = project_onto_ellipsoid(&p, &it.cov[node], d2);
                    let h = koz_halfspace(&z, &it.cov[node], node);
                    let r = m.position_km(&major[node]) - it.r_s[node];
                    let c = PositionCut::from_space(&h, &r).rescaled(k).normalized();
                    cuts.push(c);
                }
            }
        }
    }
    Ok(cuts)
}

/// Linearized total-risk cuts and their trust-region bounds.
pub fn total_cuts(m: &Mission, major: &[State], total: f64, nu_bar: f64) -> ScpResult<(Vec<PositionCut>, Vec<PositionBound>)> {
    let k = m.units.length * m.u_max;
    let (terms, mode): (Vec<RiskTerm>, RiskMode) = match &m.encounters {
        Encounters::ShortTerm(items) => (
            items
                .iter()
                .map(|i| RiskTerm {
                    node: i.node,
                    weight: i.weight,
                    r_s: i.r_s,
                    kind: RiskKind::Encounter { projector: i.projector, p_b: i.p_b, hbr: i.hbr },
                })
                .collect(),
            RiskMode::Total,
        ),
        Encounters::LongTerm(items) => {
            let mut t = Vec::new();
            let thresh = 1e-4 * total;
            for node in 1..m.grid.n_nodes() {
                let r = m.position_km(&major[node]);
                let here: Vec<f64> = items.iter().map(|i| i.probability(node, &r)).collect();
                if here.iter().sum::<f64>() < thresh {
                    continue;
                }
                for it in items {
                    t.push(RiskTerm {
                        node,
                        weight: it.weight,
                        r_s: it.r_s[node],
                        kind: RiskKind::Instantaneous { cov: it.cov[node], radius: it.hbr },
                    });
                }
            }
            (t, RiskMode::NodeWise)
        }
    };
    if terms.is_empty() {
        return Ok((Vec::new(), Vec::new()));
    }
    let lin = linearize_total_risk(&terms, |node| m.position_km(&major[node]), mode)?;
    let mut cuts = Vec::new();
    let mut bounds = Vec::new();
    for l in lin {
        let mut c = l.cut(total).rescaled(k);
        for (_, g) in &mut c.terms {
            *g /= total;
        }
        c.rhs /= total;
        cuts.push(c);
        for (node, xi) in l.nodes.iter().zip(&l.xi) {
            for (comp, &x) in xi.iter().enumerate() {
                if x > 0.0 {
                    bounds.push((*node, comp, nu_bar / (x * k)));
                }
            }
        }
    }
    Ok((cuts, bounds))
}

struct Solved {
    states: Vec<State>,
    controls: Vec<[f64; 3]>,
    w: Vec<[f64; 3]>,
    slack: Vec<f64>,
    vc_norm: Vec<f64>,
    obj: f64,
    relax_gap: f64,
}

fn solve_subproblem(
    m: &Mission,
    p: &ConicProblem,
    xs: &[State],
    settings: &socp::Settings,
    dump: Option<&std::path::Path>,
    major: usize,
    minor: usize,
) -> ScpResult<Solved> {
    let prob = p.to_socp();
    let mut s = socp::solve(&prob, settings)?;
    for k in [10.0, 100.0] {
        if matches!(s.status, socp::Status::Optimal | socp::Status::AlmostOptimal) {
            break;
        }
        let st = socp::Settings {
            static_reg: settings.static_reg * k,
            dynamic_reg: settings.dynamic_reg * k,
            ..*settings
        };
        s = socp::solve(&prob, &st)?;
    }
    if !matches!(s.status, socp::Status::Optimal | socp::Status::AlmostOptimal) {
        if let Some(dir) = dump {
            let path = dir.join(format!("subproblem_{major}_{minor}.txt"));
            // best effort: the solver error below is what matters
            let _ = std::fs::create_dir_all(dir).and_then(|_| std::fs::write(path, p.to_dump()));
        }
        return Err(ScpError::Solver {
            status: s.status,
            major,
            minor,
            primal: s.primal_residual,
            dual: s.dual_residual,
            gap: s.gap,
        });
    }
    let d = p.decode(&s.x);
    let states = xs
        .iter()
        .zip(&d.dx)
        .map(|(x, dx)| std::array::from_fn(|k| x[k] + m.u_max * dx[k]))
        .collect();
    let controls = d.u.iter().map(|w| w.map(|c| c * m.u_max)).collect();
    Ok(Solved {
        states,
        controls,
        relax_gap: d.relaxation_gap(),
        w: d.u,
        slack: d.slack,
        vc_norm: d.vc_norm,
        obj: s.obj,
    })
}

fn risk_nodes(m: &Mission) -> Vec<usize> {
    match &m.encounters {
        Encounters::ShortTerm(items) => {
            let mut v: Vec<usize> = items.iter().map(|i| i.node).collect();
            v.sort_unstable();
            v.dedup();
            v
        }
        Encounters::LongTerm(_) => (0..m.grid.n_nodes()).collect(),
    }
}

/// Runs major (and, in [`Mode::SmdKoz`], minor) iterations from `seed` or
/// from the ballistic trajectory.
pub fn run_scp(
    m: &Mission,
    cfg: &Config,
    mode: Mode,
    limits: &LimitSet,
    seed: Option<&TrajectorySolution>,
) -> ScpResult<TrajectorySolution> {
    let n = m.grid.n_segments();
    let tol = cfg.integrator_tol;
    let params = ConvexParams { kappa_vc: cfg.kappa_vc, nu_bar: cfg.nu_bar };
    let ball_total = m.total_risk(&m.ballistic);
    let (mut xs, mut us) = match seed {
        Some(s) => s.scaled(m),
        None => (m.ballistic.clone(), vec![[0.0; 3]; n]),
    };
    let mut trace = Vec::new();
    let mut warnings = Vec::new();
    if seed.is_none() && ball_total <= limits.total {
        trace.push(TraceRecord {
            major: 1,
            minor: 0,
            objective: 0.0,
            e_major: Some(0.0),
            e_minor: None,
            item_risk: m.item_risks(&xs),
            limits: limits.limits.clone(),
        });
        return finish(m, cfg, mode, limits, xs, us, vec![0.0; n], vec![0.0; n], RunStatus::Ballistic, (1, 0), trace, warnings);
    }
    let nodes = risk_nodes(m);
    let mut n_minor = 0;
    let mut status = RunStatus::MaxIterations;
    let mut w_prev: Vec<[f64; 3]> = us.iter().map(|u| u.map(|c| c / m.u_max)).collect();
    let mut last = (vec![0.0; n], vec![0.0; n]);
    let mut n_major = 0;
    for major in 1..=cfg.max_major {
        n_major = major;
        let segs = linearize_all(m, &xs, &us, tol)?;
        let reference = Reference { grid: &m.grid, segments: &segs, states: &xs, controls: &us, u_max: m.u_max };
        let solved = match mode {
            Mode::SmdKoz => {
                let mut pts = xs.clone();
                let mut out = None;
                for minor in 1..=cfg.max_minor {
                    n_minor += 1;
                    let cuts = smd_cuts(m, limits, &xs, &pts)?;
                    let p = assemble(&reference, &cuts, &[], &params)?;
                    let s = solve_subproblem(m, &p, &xs, &cfg.solver, cfg.dump_dir.as_deref(), major, minor)?;
                    let e_m = nodes
                        .iter()
                        .map(|&k| (m.position_km(&s.states[k]) - m.position_km(&pts[k])).norm())
                        .fold(0.0, f64::max);
                    trace.push(TraceRecord {
                        major,
                        minor,
                        objective: s.obj * m.u_max * m.units.velocity * 1e6,
                        e_major: None,
                        e_minor: Some(e_m),
                        item_risk: m.item_risks(&s.states),
                        limits: limits.limits.clone(),
                    });
                    pts = s.states.clone();
                    let done = e_m <= cfg.minor_tol;
                    out = Some(s);
                    if done {
                        break;
                    }
                    if minor == cfg.max_minor {
                        warnings.push(format!("minor iterations did not converge at major {major}"));
                    }
                }
                out.expect("at least one minor iteration")
            }
            Mode::LinearizedTotal => {
                let (cuts, bounds) = total_cuts(m, &xs, limits.total, cfg.nu_bar)?;
                let p = assemble(&reference, &cuts, &bounds, &params)?;
                solve_subproblem(m, &p, &xs, &cfg.solver, cfg.dump_dir.as_deref(), major, 0)?
            }
        };
        let e_major = solved
            .w
            .iter()
            .zip(&w_prev)
            .map(|(a, b)| ((a[0] - b[0]).powi(2) + (a[1] - b[1]).powi(2) + (a[2] - b[2]).powi(2)).sqrt())
            .fold(0.0, f64::max);
        if solved.relax_gap > 1e-7 {
            warnings.push(format!("relaxation gap {:.2e} at major {major}", solved.relax_gap));
        }
        trace.push(TraceRecord {
            major,
            minor: 0,
            objective: solved.obj * m.u_max * m.units.velocity * 1e6,
            e_major: Some(e_major),
            e_minor: None,
            item_risk: m.item_risks(&solved.states),
            limits: limits.limits.clone(),
        });
        xs = solved.states;
        us = solved.controls;
        w_prev = solved.w;
        last = (solved.slack.iter().map(|s| s * m.u_max).collect(), solved.vc_norm.iter().map(|v| v * m.u_max).collect());
        if e_major <= cfg.major_tol {
            status = RunStatus::Converged;
            break;
        }
    }
    if status == RunStatus::MaxIterations {
        warnings.push(format!("major iterations did not converge in {}", cfg.max_major));
    }
    finish(m, cfg, mode, limits, xs, us, last.0, last.1, status, (n_major, n_minor), trace, warnings)
}

#[allow(clippy::too_many_arguments)]
fn finish(
    m: &Mission,
    cfg: &Config,
    mode: Mode,
    limits: &LimitSet,
    xs: Vec<State>,
    us: Vec<[f64; 3]>,
    slack: Vec<f64>,
    vc: Vec<f64>,
    status: RunStatus,
    iters: (usize, usize),
    trace: Vec<TraceRecord>,
    mut warnings: Vec<String>,
) -> ScpResult<TrajectorySolution> {
    let (e_val, val) = validation_error(m, &xs, &us, cfg.integrator_tol)?;
    let vc_sum: f64 = vc.iter().sum();
    if vc_sum > 1e-6 {
        warnings.push(format!("virtual controls sum to {vc_sum:.2e} (scaled)"));
    }
    let u = &m.units;
    let epochs_s: Vec<f64> = m.grid.times.iter().map(|t| t * u.time).collect();
    let states = xs.iter().zip(&epochs_s).map(|(x, &t)| CartesianState::from_state(&u.unscale_state(x), t)).collect();
    let controls: Vec<[f64; 3]> = us.iter().map(|c| c.map(|a| u.accel_to_mm_s2(a))).collect();
    let records = risk_records(m, limits, &val, &epochs_s);
    let tipoc = match &m.encounters {
        Encounters::LongTerm(_) => {
            Some(TipocProfile { ballistic: m.ipoc_matrix(&m.ballistic), final_: m.ipoc_matrix(&val) })
        }
        Encounters::ShortTerm(_) => None,
    };
    let mut sol = TrajectorySolution {
        mode,
        status,
        epochs_s,
        states,
        controls,
        slack: slack.iter().map(|s| u.accel_to_mm_s2(*s)).collect(),
        virtual_norms: vc,
        risk: records,
        total_risk: m.total_risk(&val),
        ballistic_total_risk: m.total_risk(&m.ballistic),
        dv: 0.0,
        n_major: iters.0,
        n_minor: iters.1,
        e_validation: e_val,
        limits: limits.clone(),
        trace,
        warnings,
        tipoc,
    };
    sol.dv = sol.fuel_term();
    Ok(sol)
}

fn risk_records(m: &Mission, limits: &LimitSet, states: &[State], epochs: &[f64]) -> Vec<RiskRecord> {
    match &m.encounters {
        Encounters::ShortTerm(items) => items
            .iter()
            .zip(&limits.limits)
            .map(|(it, &lim)| {
                let rb = m.position_km(&m.ballistic[it.node]);
                let rf = m.position_km(&states[it.node]);
                RiskRecord {
                    conj: it.conj,
                    mixand: it.mixand,
                    weight: it.weight,
                    node: it.node,
                    epoch_s: epochs[it.node],
                    tca_offset_s: it.tca_offset,
                    limit: lim,
                    ballistic: it.probability(&rb),
                    value: it.probability(&rf),
                    dr_ballistic: it.dr_b(&rb).iter().copied().collect(),
                    dr_final: it.dr_b(&rf).iter().copied().collect(),
                    d2_limit: risk::weighted_smd_limit(lim, it.weight, &it.p_b, it.hbr).ok(),
                    cov: vec![it.p_b[(0, 0)], it.p_b[(0, 1)], it.p_b[(1, 0)], it.p_b[(1, 1)]],
                }
            })
            .collect(),
        Encounters::LongTerm(items) => {
            let k = argmax(&m.tipoc_profile(states));
            let kb = argmax(&m.tipoc_profile(&m.ballistic));
            items
                .iter()
                .zip(&limits.limits)
                .map(|(it, &lim)| {
                    let rb = m.position_km(&m.ballistic[kb]);
                    let rf = m.position_km(&states[k]);
                    RiskRecord {
                        conj: it.conj,
                        mixand: it.mixand,
                        weight: it.weight,
                        node: k,
                        epoch_s: epochs[k],
                        tca_offset_s: 0.0,
                        limit: lim,
                        ballistic: it.probability(kb, &rb),
                        value: it.probability(k, &rf),
                        dr_ballistic: (rb - it.r_s[kb]).iter().copied().collect(),
                        dr_final: (rf - it.r_s[k]).iter().copied().collect(),
                        d2_limit: it.d2_limit(k, lim),
                        cov: it.cov[k].transpose().iter().copied().collect(),
                    }
                })
                .collect()
        }
    }
}

/// One item of the short-term limit-adaptation problem. `prob(ρ)` is the
/// weighted probability at distance `ρ` from the ballistic point along the
/// direction of the previous solution.
pub struct AdaptItem<'a> {
    pub prev_limit: f64,
    pub prev_value: f64,
    pub rho0: f64,
    pub prob: Box<dyn Fn(f64) -> f64 + 'a>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct AdaptOutcome {
    pub limits: LimitSet,
    pub active: Vec<bool>,
    pub rho: Vec<f64>,
    pub objective: f64,
}

/// Smallest `ρ ∈ [0, ρ⁰]` with `prob(ρ) ≤ limit`, or `None`.
pub fn min_rho(item: &AdaptItem<'_>, limit: f64) -> Option<f64> {
    if (item.prob)(0.0) <= limit {
        return Some(0.0);
    }
    if (item.prob)(item.rho0) > limit * (1.0 + 1e-9) {
        return None;
    }
    let f = |r: f64| ((item.prob)(r).max(1e-300) / limit).ln();
    Some(crate::optim::bisect(0.0, item.rho0, item.rho0 * 1e-12, f).min(item.rho0))
}

/// Solves the limit-adaptation problem with the last active limit
/// eliminated through the product identity.
pub fn adapt_short_term(items: &[AdaptItem<'_>], total: f64, floor: f64, eps: f64) -> ScpResult<AdaptOutcome> {
    let active: Vec<bool> = items
        .iter()
        .map(|it| it.rho0 > 0.0 && (it.prev_value - it.prev_limit).abs() / it.prev_limit <= eps)
        .collect();
    let act: Vec<usize> = (0..items.len()).filter(|&i| active[i]).collect();
    if act.is_empty() {
        return Err(ScpError::Limits("no conjunction is active at its limit".into()));
    }
    // inactive items keep the smallest limit compatible with their last point
    let limits: Vec<f64> = items.iter().map(|it| it.prev_value.max(floor)).collect();
    let inactive: Vec<f64> = (0..items.len()).filter(|&i| !active[i]).map(|i| limits[i]).collect();
    if risk::remaining_limit(total, &inactive) <= 0.0 {
        return Err(ScpError::Limits("inactive conjunctions exhaust the total limit".into()));
    }
    let amax = 10.0f64.min((total / floor).log10());
    // the eliminated limit is the most probable active item
    let last = *act.iter().max_by(|&&a, &&b| items[a].prev_value.total_cmp(&items[b].prev_value)).unwrap();
    let free: Vec<usize> = act.iter().copied().filter(|&i| i != last).collect();
    let eval = |alpha: &[f64]| -> (f64, Vec<f64>) {
        let mut lim = limits.clone();
        let mut pen = 0.0;
        for (&i, &a) in free.iter().zip(alpha) {
            let ac = a.clamp(0.0, amax);
            pen += (a - ac).powi(2);
            lim[i] = total * 10f64.powf(-ac);
        }
        let others: Vec<f64> = (0..lim.len()).filter(|&i| i != last).map(|i| lim[i]).collect();
        let p_last = risk::remaining_limit(total, &others);
        let pl = p_last.clamp(floor, total);
        pen += ((p_last - pl) / total).powi(2) * 1e4;
        lim[last] = pl;
        let mut obj = 0.0;
        for &i in &act {
            match min_rho(&items[i], lim[i]) {
                Some(r) => obj += r,
                None => {
                    let p = (items[i].prob)(items[i].rho0);
                    obj += items[i].rho0;
                    pen += (p / lim[i]).ln().max(0.0) + 1.0;
                }
            }
        }
        let scale: f64 = act.iter().map(|&i| items[i].rho0).sum::<f64>().max(1e-300);
        (obj + 1e3 * scale * pen, lim)
    };
    let best = if free.is_empty() {
        Vec::new()
    } else {
        let x0: Vec<f64> = free
            .iter()
            .map(|&i| (-(items[i].prev_value.max(floor) / total).log10()).clamp(0.0, amax))
            .collect();
        let nm = NelderMead { step: 0.3, x_tol: 1e-9, f_tol: 1e-15, max_iter: 4000 };
        let mut b = nm.minimize(&x0, |a| eval(a).0);
        for _ in 0..3 {
            let r = nm.minimize(&b.x, |a| eval(a).0);
            if r.f >= b.f - 1e-15 * b.f.abs() {
                break;
            }
            b = r;
        }
        b.x
    };
    let (obj, mut lim) = eval(&best);
    let mut alpha_ok = true;
    for &i in &act {
        if min_rho(&items[i], lim[i]).is_none() {
            alpha_ok = false;
        }
    }
    if !alpha_ok {
        return Err(ScpError::Limits("adaptation problem is infeasible".into()));
    }
    // restore the product identity exactly on the eliminated limit
    let others: Vec<f64> = (0..items.len()).filter(|&i| i != last).map(|i| lim[i]).collect();
    lim[last] = risk::remaining_limit(total, &others);
    let rho = items.iter().zip(&lim).map(|(it, &l)| min_rho(it, l).unwrap_or(it.rho0)).collect();
    Ok(AdaptOutcome { limits: LimitSet::from_limits(lim, total, floor), active, rho, objective: obj })
}

/// New limits from a previous solution; falls back to the previous limits
/// (with a warning) when the adaptation problem has no solution.
pub fn adapt_limits(prev: &TrajectorySolution, m: &Mission, cfg: &Config) -> (LimitSet, Option<String>) {
    let total = cfg.total_limit;
    let floor = cfg.limit_floor;
    let (xs, _) = prev.scaled(m);
    let res = match &m.encounters {
        Encounters::ShortTerm(items) => {
            let adapt: Vec<AdaptItem> = items
                .iter()
                .zip(&prev.limits.limits)
                .map(|(it, &lim)| {
                    let rb = m.position_km(&m.ballistic[it.node]);
                    let r0 = m.position_km(&xs[it.node]);
                    let d = r0 - rb;
                    let rho0 = d.norm();
                    let dir = if rho0 > 0.0 { d / rho0 } else { Vector3::zeros() };
                    AdaptItem {
                        prev_limit: lim,
                        prev_value: it.probability(&r0),
                        rho0,
                        prob: Box::new(move |r| it.probability(&(rb + dir * r))),
                    }
                })
                .collect();
            adapt_short_term(&adapt, total, floor, cfg.beta_eps).map(|o| o.limits)
        }
        Encounters::LongTerm(items) => adapt_long_term(m, items, &xs, total, floor),
    };
    match res {
        Ok(l) => (l, None),
        Err(e) => (prev.limits.clone(), Some(format!("limit adaptation skipped: {e}"))),
    }
}

/// Single-node variant: the smallest step from the ballistic point toward
/// the previous solution at the node of maximum TIPoC for which the limits
/// can be shared out.
fn adapt_long_term(m: &Mission, items: &[LongItem], xs: &[State], total: f64, floor: f64) -> ScpResult<LimitSet> {
    let k = argmax(&m.tipoc_profile(xs));
    let rb = m.position_km(&m.ballistic[k]);
    let r0 = m.position_km(&xs[k]);
    let rho0 = (r0 - rb).norm();
    if rho0 == 0.0 {
        return Err(ScpError::Limits("solution coincides with the ballistic point".into()));
    }
    let dir = (r0 - rb) / rho0;
    let need = |rho: f64| -> Vec<f64> { items.iter().map(|it| it.probability(k, &(rb + dir * rho)).max(floor)).collect() };
    let combined = |p: &[f64]| risk::total_poc(&p.iter().map(|&x| (x, 1.0)).collect::<Vec<_>>());
    let at_prev = combined(&need(rho0));
    if at_prev > total * (1.0 + 1e-6) {
        return Err(ScpError::Limits("previous solution violates the total limit at its peak node".into()));
    }
    let rho = if combined(&need(0.0)) <= total {
        0.0
    } else if at_prev >= total {
        rho0
    } else {
        crate::optim::bisect(0.0, rho0, rho0 * 1e-12, |r| combined(&need(r)) - total)
    };
    let p0 = need(rho.min(rho0));
    // share the budget in proportion to the limits
    let scaled = |s: f64| -> Vec<f64> { p0.iter().map(|x| (x * s).max(floor)).collect() };
    let mut hi = 1.0;
    while combined(&scaled(hi)) < total && hi < 1e12 {
        hi *= 2.0;
    }
    let s = crate::optim::bisect(0.0, hi, hi * 1e-15, |s| combined(&scaled(s)) - total);
    let mut p = scaled(s);
    let top = argmax(&p);
    let others: Vec<f64> = p.iter().enumerate().filter(|&(j, _)| j != top).map(|(_, &x)| x).collect();
    p[top] = risk::remaining_limit(total, &others);
    if !(p[top] > 0.0) {
        return Err(ScpError::Limits("floors exhaust the total limit".into()));
    }
    Ok(LimitSet::from_limits(p, total, floor))
}

/// Second pass after a first SCP with equal limits.
pub fn refine(first: &TrajectorySolution, m: &Mission, cfg: &Config) -> ScpResult<TrajectorySolution> {
    let total = cfg.total_limit;
    if first.status == RunStatus::Ballistic || cfg.refinement == Refinement::None || m.n_items() == 1 {
        return Ok(first.clone());
    }
    if cfg.short_circuit && first.total_risk <= total && first.total_risk >= 0.98 * total {
        return Ok(first.clone());
    }
    let mut out = match cfg.refinement {
        Refinement::AdaptLimits => {
            let (limits, warn) = adapt_limits(first, m, cfg);
            let mut s = run_scp(m, cfg, Mode::SmdKoz, &limits, Some(first))?;
            s.warnings.extend(warn);
            if s.dv > first.dv * (1.0 + 1e-6) {
                s.warnings.push(format!("refined Δv {:.3} exceeds first-pass Δv {:.3} mm/s", s.dv, first.dv));
            }
            s
        }
        Refinement::LinearizedTotal => run_scp(m, cfg, Mode::LinearizedTotal, &first.limits, Some(first))?,
        Refinement::None => unreachable!(),
    };
    out.n_major += first.n_major;
    out.n_minor += first.n_minor;
    let mut trace = first.trace.clone();
    trace.append(&mut out.trace);
    out.trace = trace;
    Ok(out)
}

/// Full pipeline: equal split, first SCP in keep-out mode, refinement.
pub fn solve(m: &Mission, cfg: &Config) -> ScpResult<TrajectorySolution> {
    let limits = LimitSet::equal_split(&m.weights(), m.n_conj, cfg.total_limit, cfg.limit_floor);
    let first = run_scp(m, cfg, Mode::SmdKoz, &limits, None)?;
    refine(&first, m, cfg)
}

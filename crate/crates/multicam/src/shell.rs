//! Scenario files, configuration, mission preparation and output files.

use std::path::Path;

use nalgebra::{Matrix3, Matrix6, Vector3, Vector6};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::astro::{self, AstroError, Dynamics, Model, State};
use crate::dajet::Jet;
use crate::risk::{self, RiskError};
use crate::scp::{Encounters, LongItem, Mission, ShortItem, TrajectorySolution};
use crate::socp;
use crate::uncert::{self, GaussianState, UncertError};
use crate::units::{Units, MU_EARTH};

#[derive(Debug, Error)]
pub enum ShellError {
    #[error("{path}: {source}")]
    Io { path: String, source: std::io::Error },
    #[error("{path}: {source}")]
    Parse { path: String, source: serde_json::Error },
    #[error("invalid scenario: {0}")]
    Invalid(String),
    #[error(transparent)]
    Astro(#[from] AstroError),
    #[error(transparent)]
    Risk(#[from] RiskError),
    #[error(transparent)]
    Uncert(#[from] UncertError),
}

pub type ShellResult<T> = Result<T, ShellError>;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Refinement {
    AdaptLimits,
    LinearizedTotal,
    None,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct Config {
    pub nodes_per_orbit: usize,
    pub total_limit: f64,
    /// On the largest control change between majors, in units of `u_max`.
    pub major_tol: f64,
    /// On the largest position change between minors [km].
    pub minor_tol: f64,
    pub max_major: usize,
    pub max_minor: usize,
    pub kappa_vc: f64,
    pub nu_bar: f64,
    pub integrator_tol: f64,
    pub solver: socp::Settings,
    pub refinement: Refinement,
    pub short_circuit: bool,
    pub limit_floor: f64,
    pub beta_eps: f64,
    /// Encounter epochs closer than this to a node reuse it [s].
    pub snap_s: f64,
    /// Directory receiving the dump of any subproblem the cone solver fails on.
    pub dump_dir: Option<std::path::PathBuf>,
}

impl Default for Config {
    fn default() -> Self {
        Config {
            nodes_per_orbit: 60,
            total_limit: 1e-6,
            major_tol: 1e-3,
            minor_tol: 1e-6,
            max_major: 30,
            max_minor: 30,
            kappa_vc: 1e4,
            nu_bar: 1e-2,
            integrator_tol: 1e-12,
            solver: socp::Settings::default(),
            refinement: Refinement::AdaptLimits,
            short_circuit: false,
            limit_floor: 1e-9,
            beta_eps: 1e-2,
            snap_s: 0.05,
            dump_dir: None,
        }
    }
}

impl Config {
    pub fn check(&self) -> ShellResult<()> {
        let pos = [
            ("total_limit", self.total_limit),
            ("major_tol", self.major_tol),
            ("minor_tol", self.minor_tol),
            ("kappa_vc", self.kappa_vc),
            ("nu_bar", self.nu_bar),
            ("integrator_tol", self.integrator_tol),
            ("limit_floor", self.limit_floor),
            ("beta_eps", self.beta_eps),
        ];
        for (name, v) in pos {
            if !(v > 0.0 && v.is_finite()) {
                return Err(ShellError::Invalid(format!("config.{name} must be positive, got {v}")));
            }
        }
        if self.total_limit >= 1.0 || self.limit_floor >= self.total_limit {
            return Err(ShellError::Invalid("config: need limit_floor < total_limit < 1".into()));
        }
        if self.max_major == 0 || self.max_minor == 0 {
            return Err(ShellError::Invalid("config: iteration limits must be at least 1".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Elements {
    pub a_km: f64,
    pub e: f64,
    pub inc_deg: f64,
    pub raan_deg: f64,
    pub argp_deg: f64,
    pub ta_deg: f64,
}

impl Elements {
    pub fn state(&self) -> State {
        astro::elements_to_state(
            self.a_km,
            self.e,
            self.inc_deg.to_radians(),
            self.raan_deg.to_radians(),
            self.argp_deg.to_radians(),
            self.ta_deg.to_radians(),
            MU_EARTH,
        )
    }
}

/// Inertial position and velocity [km, km/s].
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Cartesian {
    pub r_km: [f64; 3],
    pub v_km_s: [f64; 3],
}

/// Secondary minus primary in the primary's rotating RTN frame.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RelativeRtn {
    pub dr_km: [f64; 3],
    pub dv_km_s: [f64; 3],
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Orbit {
    Elements(Elements),
    State(Cartesian),
    RelativeRtn(RelativeRtn),
}

/// Symmetric 3×3 in RTN: diagonal then off-diagonal entries.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Cov3Rtn {
    pub rr: f64,
    pub tt: f64,
    pub nn: f64,
    #[serde(default)]
    pub rt: f64,
    #[serde(default)]
    pub rn: f64,
    #[serde(default)]
    pub tn: f64,
}

impl Cov3Rtn {
    pub fn matrix(&self) -> Matrix3<f64> {
        Matrix3::new(self.rr, self.rt, self.rn, self.rt, self.tt, self.tn, self.rn, self.tn, self.nn)
    }
}

/// RTN covariance of position [km²] and velocity [km²/s²] without
/// cross terms.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Cov6Rtn {
    pub pos: Cov3Rtn,
    pub vel: Cov3Rtn,
}

impl Cov6Rtn {
    pub fn matrix(&self) -> Matrix6<f64> {
        let mut m = Matrix6::zeros();
        m.fixed_view_mut::<3, 3>(0, 0).copy_from(&self.pos.matrix());
        m.fixed_view_mut::<3, 3>(3, 3).copy_from(&self.vel.matrix());
        m
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Primary {
    pub orbit: Orbit,
    /// Epoch of `orbit` [s]; defaults to the start of the horizon.
    #[serde(default)]
    pub epoch_s: Option<f64>,
    pub u_max_mm_s2: f64,
    #[serde(default)]
    pub mass_kg: Option<f64>,
    #[serde(default)]
    pub cov_rtn: Option<Cov6Rtn>,
}

/// Conjunction data message at the time of closest approach.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Conjunction {
    pub tca_s: f64,
    /// Primary minus secondary, inertial [m].
    pub dr_m: [f64; 3],
    /// Primary minus secondary, inertial [km/s].
    pub dv_km_s: [f64; 3],
    /// Secondary position covariance in its RTN frame [km²].
    pub cov_rtn: Cov3Rtn,
    /// Secondary velocity covariance [km²/s²], needed for splitting.
    #[serde(default)]
    pub cov_vel_rtn: Option<Cov3Rtn>,
    pub hbr_m: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Secondary {
    pub orbit: Orbit,
    pub epoch_s: f64,
    pub cov_rtn: Cov6Rtn,
    pub hbr_m: f64,
    /// Approximate encounter epochs (short-term only) [s].
    #[serde(default)]
    pub encounters_s: Vec<f64>,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Horizon {
    pub t0_s: f64,
    pub tf_s: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum EncounterKind {
    ShortTerm,
    LongTerm,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Scenario {
    pub version: u32,
    #[serde(default)]
    pub name: String,
    pub dynamics: Model,
    pub horizon: Horizon,
    pub encounter: EncounterKind,
    #[serde(default = "one")]
    pub n_mix: usize,
    pub primary: Primary,
    #[serde(default)]
    pub conjunctions: Vec<Conjunction>,
    #[serde(default)]
    pub secondaries: Vec<Secondary>,
}

fn one() -> usize {
    1
}

fn check_psd(m: &Matrix3<f64>, what: &str) -> ShellResult<()> {
    let eig = m.symmetric_eigen();
    let lmin = eig.eigenvalues.min();
    if !(lmin > 0.0) {
        return Err(ShellError::Invalid(format!("{what}: covariance is not positive definite (eigenvalue {lmin:e})")));
    }
    Ok(())
}

impl Scenario {
    pub fn validate(&self) -> ShellResult<()> {
        let bad = |s: String| Err(ShellError::Invalid(s));
        if self.version != 1 {
            return bad(format!("unsupported version {}", self.version));
        }
        let h = self.horizon;
        if !(h.tf_s > h.t0_s) {
            return bad(format!("empty horizon [{}, {}]", h.t0_s, h.tf_s));
        }
        if self.n_mix == 0 || self.n_mix.is_multiple_of(2) {
            return bad(format!("n_mix must be odd, got {}", self.n_mix));
        }
        if !(self.primary.u_max_mm_s2 > 0.0) {
            return bad("primary.u_max_mm_s2 must be positive".into());
        }
        if matches!(self.primary.orbit, Orbit::RelativeRtn(_)) {
            return bad("primary.orbit cannot be relative".into());
        }
        if let Some(c) = &self.primary.cov_rtn {
            check_psd(&c.pos.matrix(), "primary.cov_rtn.pos")?;
            check_psd(&c.vel.matrix(), "primary.cov_rtn.vel")?;
        }
        let inside = |t: f64| t >= h.t0_s && t <= h.tf_s;
        for (k, c) in self.conjunctions.iter().enumerate() {
            let name = format!("conjunctions[{k}]");
            if !inside(c.tca_s) {
                return bad(format!("{name}: tca {} s outside the horizon", c.tca_s));
            }
            if !(c.hbr_m > 0.0) {
                return bad(format!("{name}: hbr_m must be positive"));
            }
            check_psd(&c.cov_rtn.matrix(), &format!("{name}.cov_rtn"))?;
            if let Some(v) = &c.cov_vel_rtn {
                check_psd(&v.matrix(), &format!("{name}.cov_vel_rtn"))?;
            } else if self.n_mix > 1 {
                return bad(format!("{name}: cov_vel_rtn is required when n_mix > 1"));
            }
            if self.encounter == EncounterKind::LongTerm {
                return bad(format!("{name}: conjunction messages describe short-term encounters"));
            }
        }
        for (k, s) in self.secondaries.iter().enumerate() {
            let name = format!("secondaries[{k}]");
            if !(s.hbr_m > 0.0) {
                return bad(format!("{name}: hbr_m must be positive"));
            }
            check_psd(&s.cov_rtn.pos.matrix(), &format!("{name}.cov_rtn.pos"))?;
            check_psd(&s.cov_rtn.vel.matrix(), &format!("{name}.cov_rtn.vel"))?;
            if self.encounter == EncounterKind::ShortTerm {
                if s.encounters_s.is_empty() {
                    return bad(format!("{name}: encounters_s is empty"));
                }
                if let Some(t) = s.encounters_s.iter().find(|&&t| !inside(t)) {
                    return bad(format!("{name}: encounter {t} s outside the horizon"));
                }
            }
        }
        if self.encounter == EncounterKind::LongTerm && self.primary.cov_rtn.is_none() {
            return bad("long-term encounters need primary.cov_rtn".into());
        }
        Ok(())
    }

    /// Number of conjunctions (CDMs plus encounters of tracked secondaries).
    pub fn n_conj(&self) -> usize {
        match self.encounter {
            EncounterKind::ShortTerm => {
                self.conjunctions.len() + self.secondaries.iter().map(|s| s.encounters_s.len()).sum::<usize>()
            }
            EncounterKind::LongTerm => self.secondaries.len(),
        }
    }

    /// Keeps only the first `n` conjunction messages and ends the horizon
    /// at the last one kept.
    pub fn truncated(&self, n: usize) -> Scenario {
        let mut s = self.clone();
        s.conjunctions.truncate(n);
        if let Some(t) = s.conjunctions.iter().map(|c| c.tca_s).reduce(f64::max) {
            s.horizon.tf_s = t;
        }
        s
    }
}

pub fn load_scenario(path: &Path) -> ShellResult<Scenario> {
    let text = std::fs::read_to_string(path).map_err(|e| ShellError::Io { path: path.display().to_string(), source: e })?;
    let s = parse_scenario(&text).map_err(|e| match e {
        ShellError::Parse { source, .. } => ShellError::Parse { path: path.display().to_string(), source },
        other => other,
    })?;
    Ok(s)
}

pub fn parse_scenario(text: &str) -> ShellResult<Scenario> {
    let s: Scenario = serde_json::from_str(text).map_err(|e| ShellError::Parse { path: "<scenario>".into(), source: e })?;
    s.validate()?;
    Ok(s)
}

pub fn load_config(path: &Path) -> ShellResult<Config> {
    let text = std::fs::read_to_string(path).map_err(|e| ShellError::Io { path: path.display().to_string(), source: e })?;
    let c: Config =
        serde_json::from_str(&text).map_err(|e| ShellError::Parse { path: path.display().to_string(), source: e })?;
    c.check()?;
    Ok(c)
}

/// Propagated state and first-order state transition matrix.
pub fn flow(x: &State, dt: f64, d: &Dynamics, tol: f64) -> ShellResult<(State, Matrix6<f64>)> {
    if dt == 0.0 {
        return Ok((*x, Matrix6::identity()));
    }
    let xj: [Jet<f64>; 6] = std::array::from_fn(|i| Jet::var(6, 1, i, x[i]));
    let uj: [Jet<f64>; 3] = std::array::from_fn(|_| Jet::constant(6, 1, 0.0));
    let out = astro::propagate(&xj, &uj, dt, d, tol)?;
    let mut phi = Matrix6::zeros();
    for (i, o) in out.iter().enumerate() {
        let g = o.gradient();
        for j in 0..6 {
            phi[(i, j)] = g[j];
        }
    }
    Ok((std::array::from_fn(|i| out[i].value()), phi))
}

/// Nonlinearity factors of the ballistic flow over `dt`.
pub fn flow_nli(x: &State, dt: f64, d: &Dynamics, tol: f64) -> ShellResult<Vector6<f64>> {
    let xj: [Jet<f64>; 6] = std::array::from_fn(|i| Jet::var(6, 2, i, x[i]));
    let uj: [Jet<f64>; 3] = std::array::from_fn(|_| Jet::constant(6, 2, 0.0));
    let out = astro::propagate(&xj, &uj, dt, d, tol)?;
    Ok(Vector6::from_vec(uncert::nli_of_map(&out)?))
}

fn coast(x: &State, dt: f64, d: &Dynamics, tol: f64) -> ShellResult<State> {
    if dt == 0.0 {
        return Ok(*x);
    }
    Ok(astro::propagate(x, &[0.0; 3], dt, d, tol)?)
}

fn pos(x: &State) -> Vector3<f64> {
    Vector3::new(x[0], x[1], x[2])
}

fn vel(x: &State) -> Vector3<f64> {
    Vector3::new(x[3], x[4], x[5])
}

/// Mixand of a secondary in scaled inertial coordinates at `epoch`.
struct ScaledMixand {
    weight: f64,
    mean: State,
    cov: Matrix6<f64>,
    epoch: f64,
}

/// One weighted Gaussian of a secondary to be placed on the grid.
struct Pending {
    conj: usize,
    mixand: usize,
    weight: f64,
    hbr_km: f64,
    /// Scaled epoch of the node (after TCA refinement).
    epoch: f64,
    tca_offset_s: f64,
    source: ScaledMixand,
}

impl Mission {
    /// Scales the scenario, splits the secondaries, refines encounter
    /// epochs, builds the grid and the ballistic reference.
    pub fn prepare(sc: &Scenario, cfg: &Config) -> ShellResult<Mission> {
        sc.validate()?;
        cfg.check()?;
        let tol = cfg.integrator_tol;
        let xp_epoch_km = match sc.primary.orbit {
            Orbit::Elements(e) => e.state(),
            Orbit::State(c) => [c.r_km[0], c.r_km[1], c.r_km[2], c.v_km_s[0], c.v_km_s[1], c.v_km_s[2]],
            Orbit::RelativeRtn(_) => unreachable!("rejected by validation"),
        };
        let (r, v) = (pos(&xp_epoch_km).norm(), vel(&xp_epoch_km).norm());
        let a = 1.0 / (2.0 / r - v * v / MU_EARTH);
        if !(a > 0.0) {
            return Err(ShellError::Invalid("primary orbit is not bound".into()));
        }
        let units = Units::from_semi_major_axis(a);
        let d = Dynamics::new(sc.dynamics, &units);
        let ts = |t: f64| t / units.time;
        let t0 = ts(sc.horizon.t0_s);
        let tf = ts(sc.horizon.tf_s);
        let p_epoch = ts(sc.primary.epoch_s.unwrap_or(sc.horizon.t0_s));
        let xp_epoch = units.scale_state(&xp_epoch_km);
        let x0 = coast(&xp_epoch, t0 - p_epoch, &d, tol)?;
        let primary_at = |t: f64| coast(&x0, t - t0, &d, tol);
        let cov_scale = |p: &Matrix6<f64>| units.scale_cov6(p);

        let mut pending: Vec<Pending> = Vec::new();
        let mut conj = 0usize;
        for c in &sc.conjunctions {
            let t = ts(c.tca_s);
            let xp = primary_at(t)?;
            let dx_km = [
                c.dr_m[0] * 1e-3,
                c.dr_m[1] * 1e-3,
                c.dr_m[2] * 1e-3,
                c.dv_km_s[0],
                c.dv_km_s[1],
                c.dv_km_s[2],
            ];
            let dx = units.scale_state(&dx_km);
            let xs: State = std::array::from_fn(|i| xp[i] - dx[i]);
            let mut p6 = Matrix6::zeros();
            p6.fixed_view_mut::<3, 3>(0, 0).copy_from(&c.cov_rtn.matrix());
            if let Some(v) = &c.cov_vel_rtn {
                p6.fixed_view_mut::<3, 3>(3, 3).copy_from(&v.matrix());
            }
            let xs_km = units.unscale_state(&xs);
            let cov = cov_scale(&astro::rtn_to_eci_cov6(&xs_km, &p6));
            let g = ScaledMixand { weight: 1.0, mean: xs, cov, epoch: t };
            let mix = if sc.n_mix > 1 { split(&g, sc.n_mix, t0 - t, &d, tol)? } else { vec![g] };
            let refine = sc.n_mix > 1;
            for (k, m) in mix.into_iter().enumerate() {
                let off = if refine { astro::refine_tca(&xp, &m.mean, &d, tol)? } else { 0.0 };
                pending.push(Pending {
                    conj,
                    mixand: k,
                    weight: m.weight,
                    hbr_km: c.hbr_m * 1e-3,
                    epoch: t + off,
                    tca_offset_s: off * units.time,
                    source: m,
                });
            }
            conj += 1;
        }

        let mut long_sources: Vec<(usize, f64, Vec<ScaledMixand>)> = Vec::new();
        for s in &sc.secondaries {
            let te = ts(s.epoch_s);
            let xs = match s.orbit {
                Orbit::Elements(e) => units.scale_state(&e.state()),
                Orbit::State(c) => {
                    units.scale_state(&[c.r_km[0], c.r_km[1], c.r_km[2], c.v_km_s[0], c.v_km_s[1], c.v_km_s[2]])
                }
                Orbit::RelativeRtn(r) => {
                    let xp = units.unscale_state(&primary_at(te)?);
                    let basis = astro::rtn_basis(&xp);
                    let (rp, vp) = (pos(&xp), vel(&xp));
                    let omega = rp.cross(&vp) / rp.norm_squared();
                    let dr = basis * Vector3::from(r.dr_km);
                    let dv = basis * Vector3::from(r.dv_km_s) + omega.cross(&dr);
                    units.scale_state(&[
                        rp.x + dr.x,
                        rp.y + dr.y,
                        rp.z + dr.z,
                        vp.x + dv.x,
                        vp.y + dv.y,
                        vp.z + dv.z,
                    ])
                }
            };
            let cov = cov_scale(&astro::rtn_to_eci_cov6(&units.unscale_state(&xs), &s.cov_rtn.matrix()));
            let g = ScaledMixand { weight: 1.0, mean: xs, cov, epoch: te };
            let last = match sc.encounter {
                EncounterKind::ShortTerm => s.encounters_s.iter().map(|&t| ts(t)).fold(f64::NEG_INFINITY, f64::max),
                EncounterKind::LongTerm => tf,
            };
            let mix = if sc.n_mix > 1 { split(&g, sc.n_mix, last - te, &d, tol)? } else { vec![g] };
            match sc.encounter {
                EncounterKind::ShortTerm => {
                    for &tc in &s.encounters_s {
                        let t = ts(tc);
                        let xp = primary_at(t)?;
                        for (k, m) in mix.iter().enumerate() {
                            let xm = coast(&m.mean, t - m.epoch, &d, tol)?;
                            let off = astro::refine_tca(&xp, &xm, &d, tol)?;
                            pending.push(Pending {
                                conj,
                                mixand: k,
                                weight: m.weight,
                                hbr_km: s.hbr_m * 1e-3,
                                epoch: t + off,
                                tca_offset_s: off * units.time,
                                source: ScaledMixand { weight: m.weight, mean: m.mean, cov: m.cov, epoch: m.epoch },
                            });
                        }
                        conj += 1;
                    }
                }
                EncounterKind::LongTerm => {
                    long_sources.push((conj, s.hbr_m * 1e-3, mix));
                    conj += 1;
                }
            }
        }

        let snap = ts(cfg.snap_s);
        let epochs: Vec<f64> = pending.iter().map(|p| p.epoch).collect();
        if let Some(e) = epochs.iter().find(|&&e| e <= t0 + snap || e > tf + snap) {
            return Err(ShellError::Invalid(format!(
                "encounter at {:.3} s falls outside the horizon after TCA refinement",
                e * units.time
            )));
        }
        let grid = astro::build_grid(t0, tf, 2.0 * std::f64::consts::PI, cfg.nodes_per_orbit, &epochs, snap)?;
        let ballistic = crate::scp::ballistic_states(&x0, &grid, &d, tol).map_err(|e| match e {
            crate::scp::ScpError::Astro(a) => ShellError::Astro(a),
            other => ShellError::Invalid(other.to_string()),
        })?;

        // primary covariance at each node, when given
        let primary_cov: Option<Vec<Matrix3<f64>>> = match &sc.primary.cov_rtn {
            None => None,
            Some(c) => {
                let p0 = cov_scale(&astro::rtn_to_eci_cov6(&units.unscale_state(&x0), &c.matrix()));
                let mut out = vec![p0.fixed_view::<3, 3>(0, 0).into_owned()];
                let mut phi = Matrix6::identity();
                for i in 0..grid.n_segments() {
                    let (_, a) = flow(&ballistic[i], grid.dt(i), &d, tol)?;
                    phi = a * phi;
                    out.push(uncert::propagate_cov(&p0, &phi).fixed_view::<3, 3>(0, 0).into_owned());
                }
                Some(out)
            }
        };
        let l2 = units.length * units.length;

        let encounters = match sc.encounter {
            EncounterKind::ShortTerm => {
                let mut items = Vec::new();
                for p in &pending {
                    let node = grid.node_at(p.epoch, snap).expect("epoch inserted in grid");
                    let t = grid.times[node];
                    let (xs, phi) = flow(&p.source.mean, t - p.source.epoch, &d, tol)?;
                    let ps = uncert::propagate_cov(&p.source.cov, &phi);
                    let mut prel: Matrix3<f64> = ps.fixed_view::<3, 3>(0, 0).into_owned();
                    if let Some(pc) = &primary_cov {
                        prel += pc[node];
                    }
                    let xp = ballistic[node];
                    let dr = (pos(&xp) - pos(&xs)) * units.length;
                    let dv = (vel(&xp) - vel(&xs)) * units.velocity;
                    let hint = vel(&xs).cross(&vel(&xp));
                    let b = risk::bplane_project(&dr, &dv, &(prel * l2), p.hbr_km, Some(hint))?;
                    items.push(ShortItem {
                        conj: p.conj,
                        mixand: p.mixand,
                        weight: p.weight,
                        hbr: p.hbr_km,
                        node,
                        tca_offset: p.tca_offset_s,
                        r_s: pos(&xs) * units.length,
                        v_s: vel(&xs) * units.velocity,
                        projector: b.projector(),
                        p_b: b.p_b,
                    });
                }
                Encounters::ShortTerm(items)
            }
            EncounterKind::LongTerm => {
                let pc = primary_cov.expect("checked by validation");
                let mut items = Vec::new();
                for (conj, hbr, mix) in &long_sources {
                    for (k, m) in mix.iter().enumerate() {
                        let mut x = coast(&m.mean, grid.times[0] - m.epoch, &d, tol)?;
                        let (_, mut phi) = flow(&m.mean, grid.times[0] - m.epoch, &d, tol)?;
                        let mut r_s = Vec::with_capacity(grid.n_nodes());
                        let mut cov = Vec::with_capacity(grid.n_nodes());
                        for i in 0..grid.n_nodes() {
                            if i > 0 {
                                let (xn, a) = flow(&x, grid.dt(i - 1), &d, tol)?;
                                x = xn;
                                phi = a * phi;
                            }
                            let ps = uncert::propagate_cov(&m.cov, &phi);
                            let prel = ps.fixed_view::<3, 3>(0, 0).into_owned() + pc[i];
                            r_s.push(pos(&x) * units.length);
                            cov.push(prel * l2);
                        }
                        items.push(LongItem { conj: *conj, mixand: k, weight: m.weight, hbr: *hbr, r_s, cov });
                    }
                }
                Encounters::LongTerm(items)
            }
        };

        Ok(Mission {
            units,
            dynamics: d,
            grid,
            x0,
            u_max: units.accel_from_mm_s2(sc.primary.u_max_mm_s2),
            n_conj: conj,
            encounters,
            ballistic,
        })
    }
}

/// Splits `g` along the direction picked by the nonlinearity of its flow
/// over `horizon` (scaled time).
fn split(g: &ScaledMixand, n: usize, horizon: f64, d: &Dynamics, tol: f64) -> ShellResult<Vec<ScaledMixand>> {
    let nu = flow_nli(&g.mean, horizon, d, tol)?;
    let dir = uncert::split_direction(&g.cov, &nu)?;
    let gs = GaussianState::new(Vector6::from_column_slice(&g.mean), g.cov);
    let mix = uncert::gmm_split(&gs, n, &dir)?;
    Ok(mix
        .into_iter()
        .map(|m| ScaledMixand {
            weight: m.weight,
            mean: std::array::from_fn(|i| m.state.mean[i]),
            cov: m.state.cov,
            epoch: g.epoch,
        })
        .collect())
}

/// Mixand dump for the `split` command.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MixandReport {
    pub conj: usize,
    pub mixand: usize,
    pub weight: f64,
    pub node: Option<usize>,
    pub epoch_s: f64,
    pub tca_offset_s: f64,
}

pub fn mixand_report(m: &Mission) -> Vec<MixandReport> {
    match &m.encounters {
        Encounters::ShortTerm(items) => items
            .iter()
            .map(|i| MixandReport {
                conj: i.conj,
                mixand: i.mixand,
                weight: i.weight,
                node: Some(i.node),
                epoch_s: m.grid.times[i.node] * m.units.time,
                tca_offset_s: i.tca_offset,
            })
            .collect(),
        Encounters::LongTerm(items) => items
            .iter()
            .map(|i| MixandReport {
                conj: i.conj,
                mixand: i.mixand,
                weight: i.weight,
                node: None,
                epoch_s: m.grid.times[0] * m.units.time,
                tca_offset_s: 0.0,
            })
            .collect(),
    }
}

/// Headline numbers written next to the CSV files.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Summary {
    pub name: String,
    pub status: crate::scp::RunStatus,
    pub dv_mm_s: f64,
    pub total_risk: f64,
    pub ballistic_total_risk: f64,
    pub total_limit: f64,
    pub n_major: usize,
    pub n_minor: usize,
    pub e_validation_mm: f64,
    pub limits: Vec<f64>,
    pub trace: Vec<crate::scp::TraceRecord>,
    pub warnings: Vec<String>,
}

impl Summary {
    pub fn new(name: &str, s: &TrajectorySolution) -> Summary {
        Summary {
            name: name.to_string(),
            status: s.status,
            dv_mm_s: s.dv,
            total_risk: s.total_risk,
            ballistic_total_risk: s.ballistic_total_risk,
            total_limit: s.limits.total,
            n_major: s.n_major,
            n_minor: s.n_minor,
            e_validation_mm: s.e_validation,
            limits: s.limits.limits.clone(),
            trace: s.trace.clone(),
            warnings: s.warnings.clone(),
        }
    }
}

fn write(path: &Path, text: &str) -> ShellResult<()> {
    std::fs::write(path, text).map_err(|e| ShellError::Io { path: path.display().to_string(), source: e })
}

/// Writes maneuver.csv, bplane.csv or tipoc.csv, summary.json and
/// solution.json into `dir`.
pub fn emit(sol: &TrajectorySolution, m: &Mission, name: &str, dir: &Path) -> ShellResult<()> {
    std::fs::create_dir_all(dir).map_err(|e| ShellError::Io { path: dir.display().to_string(), source: e })?;
    let mut man = String::from("epoch_s,dt_s,a_r_mm_s2,a_t_mm_s2,a_n_mm_s2,dv_r_mm_s,dv_t_mm_s,dv_n_mm_s\n");
    for (i, u) in sol.controls.iter().enumerate() {
        let dt = sol.epochs_s[i + 1] - sol.epochs_s[i];
        let basis = astro::rtn_basis(&sol.states[i].state());
        let a = basis.transpose() * Vector3::from(*u);
        man += &format!(
            "{},{},{},{},{},{},{},{}\n",
            sol.epochs_s[i],
            dt,
            a.x,
            a.y,
            a.z,
            a.x * dt,
            a.y * dt,
            a.z * dt
        );
    }
    write(&dir.join("maneuver.csv"), &man)?;
    match &m.encounters {
        Encounters::ShortTerm(_) => {
            let mut b = String::from(
                "conj,mixand,weight,node,epoch_s,tca_offset_s,limit,poc_ballistic,poc_final,eq_ballistic_x,eq_ballistic_y,eq_final_x,eq_final_y\n",
            );
            for r in &sol.risk {
                let p_b = nalgebra::Matrix2::new(r.cov[0], r.cov[1], r.cov[2], r.cov[3]);
                let (eb, ef) = match r.d2_limit {
                    Some(d2) => (
                        risk::equivalent_bplane(&nalgebra::Vector2::new(r.dr_ballistic[0], r.dr_ballistic[1]), &p_b, d2),
                        risk::equivalent_bplane(&nalgebra::Vector2::new(r.dr_final[0], r.dr_final[1]), &p_b, d2),
                    ),
                    None => (nalgebra::Vector2::repeat(f64::NAN), nalgebra::Vector2::repeat(f64::NAN)),
                };
                b += &format!(
                    "{},{},{},{},{},{},{},{},{},{},{},{},{}\n",
                    r.conj, r.mixand, r.weight, r.node, r.epoch_s, r.tca_offset_s, r.limit, r.ballistic, r.value, eb.x, eb.y, ef.x, ef.y
                );
            }
            write(&dir.join("bplane.csv"), &b)?;
        }
        Encounters::LongTerm(items) => {
            if let Some(t) = &sol.tipoc {
                let mut h = String::from("epoch_s");
                for it in items {
                    h += &format!(",ballistic_c{}_m{}", it.conj, it.mixand);
                }
                h += ",ballistic_total";
                for it in items {
                    h += &format!(",final_c{}_m{}", it.conj, it.mixand);
                }
                h += ",final_total\n";
                for (k, e) in sol.epochs_s.iter().enumerate() {
                    h += &e.to_string();
                    for row in [&t.ballistic[k], &t.final_[k]] {
                        for v in row.iter() {
                            h += &format!(",{v}");
                        }
                        h += &format!(",{}", risk::total_poc(&row.iter().map(|&p| (p, 1.0)).collect::<Vec<_>>()));
                    }
                    h += "\n";
                }
                write(&dir.join("tipoc.csv"), &h)?;
            }
        }
    }
    let summary = serde_json::to_string_pretty(&Summary::new(name, sol)).expect("summary serializes");
    write(&dir.join("summary.json"), &summary)?;
    let full = serde_json::to_string(sol).expect("solution serializes");
    write(&dir.join("solution.json"), &full)?;
    Ok(())
}

pub fn load_solution(path: &Path) -> ShellResult<TrajectorySolution> {
    let text = std::fs::read_to_string(path).map_err(|e| ShellError::Io { path: path.display().to_string(), source: e })?;
    serde_json::from_str(&text).map_err(|e| ShellError::Parse { path: path.display().to_string(), source: e })
}

/// Ballistic risk of every item.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RiskReport {
    pub items: Vec<ItemRisk>,
    pub total: f64,
    /// Node-wise totals for long-term encounters.
    pub tipoc: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ItemRisk {
    pub conj: usize,
    pub mixand: usize,
    pub weight: f64,
    pub epoch_s: f64,
    pub miss_m: f64,
    pub poc: f64,
}

pub fn risk_report(m: &Mission) -> RiskReport {
    let items = match &m.encounters {
        Encounters::ShortTerm(items) => items
            .iter()
            .map(|i| {
                let r = m.position_km(&m.ballistic[i.node]);
                ItemRisk {
                    conj: i.conj,
                    mixand: i.mixand,
                    weight: i.weight,
                    epoch_s: m.grid.times[i.node] * m.units.time,
                    miss_m: (r - i.r_s).norm() * 1e3,
                    poc: i.probability(&r) / i.weight,
                }
            })
            .collect(),
        Encounters::LongTerm(items) => {
            let tp = m.tipoc_profile(&m.ballistic);
            let k = tp.iter().enumerate().fold((0, f64::NEG_INFINITY), |b, (i, &x)| if x > b.1 { (i, x) } else { b }).0;
            let r = m.position_km(&m.ballistic[k]);
            items
                .iter()
                .map(|i| ItemRisk {
                    conj: i.conj,
                    mixand: i.mixand,
                    weight: i.weight,
                    epoch_s: m.grid.times[k] * m.units.time,
                    miss_m: (r - i.r_s[k]).norm() * 1e3,
                    poc: i.probability(k, &r) / i.weight,
                })
                .collect()
        }
    };
    RiskReport { items, total: m.total_risk(&m.ballistic), tipoc: m.tipoc_profile(&m.ballistic) }
}

/// One quick check of the `selftest` command.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Check {
    pub name: String,
    pub pass: bool,
    pub detail: String,
}

fn check(name: &str, err: f64, tol: f64) -> Check {
    Check { name: name.into(), pass: err <= tol, detail: format!("error {err:.3e} (tolerance {tol:.0e})") }
}

/// Small consistency checks of the numerical kernels.
pub fn selftest() -> Vec<Check> {
    let mut out = Vec::new();

    // jet gradient of the equations of motion against central differences
    let d = Dynamics { model: Model::TwoBodyJ2, j2_re2: 1.0826e-3 * 0.85, body_radius: 0.9 };
    let x: State = [1.01, 0.02, -0.03, 0.01, 0.98, 0.11];
    let xj: [Jet<f64>; 6] = std::array::from_fn(|i| Jet::var(6, 1, i, x[i]));
    let uj: [Jet<f64>; 3] = std::array::from_fn(|_| Jet::constant(6, 1, 0.0));
    let err = match astro::eom(&xj, &uj, &d) {
        Ok(f) => {
            let mut e: f64 = 0.0;
            for j in 0..6 {
                let h = 1e-6;
                let (mut xp, mut xm) = (x, x);
                xp[j] += h;
                xm[j] -= h;
                let fp = astro::eom(&xp, &[0.0; 3], &d).expect("finite state");
                let fm = astro::eom(&xm, &[0.0; 3], &d).expect("finite state");
                for i in 0..6 {
                    let fd = (fp[i] - fm[i]) / (2.0 * h);
                    e = e.max((f[i].gradient()[j] - fd).abs() / fd.abs().max(1.0));
                }
            }
            e
        }
        Err(_) => f64::INFINITY,
    };
    out.push(check("jet gradient vs finite differences", err, 1e-6));

    // Chan series against polar quadrature of an isotropic Gaussian over the disk
    let p_b = nalgebra::Matrix2::new(2e-2, 0.0, 0.0, 2e-2);
    let dr = nalgebra::Vector2::new(0.05, -0.08);
    let hbr = 0.02;
    let b = risk::BPlaneConjunction { rotation: Matrix3::identity(), dr_b: dr, p_b, hbr };
    let inv = p_b.try_inverse().expect("positive definite");
    let norm = 1.0 / (2.0 * std::f64::consts::PI * p_b.determinant().sqrt());
    let (nr, nt) = (2000, 200);
    let mut q = 0.0;
    for i in 0..nr {
        let r = (i as f64 + 0.5) / nr as f64 * hbr;
        for j in 0..nt {
            let t = (j as f64 + 0.5) / nt as f64 * 2.0 * std::f64::consts::PI;
            let w = nalgebra::Vector2::new(r * t.cos(), r * t.sin()) - dr;
            q += (-0.5 * (w.transpose() * inv * w)[0]).exp() * r;
        }
    }
    q *= norm * hbr / nr as f64 * 2.0 * std::f64::consts::PI / nt as f64;
    let err = risk::chan_poc(&b).map(|p| (p - q).abs() / q).unwrap_or(f64::INFINITY);
    out.push(check("Chan series vs quadrature", err, 1e-6));

    // cone solver on min t s.t. ‖(3, 4)‖ ≤ t
    let g = crate::sparse::Csc::from_triplets(3, 1, &[(0, 0, -1.0)]);
    let prob = socp::Problem {
        c: vec![1.0],
        a: crate::sparse::Csc::from_triplets(0, 1, &[]),
        b: vec![],
        g,
        h: vec![0.0, 3.0, 4.0],
        cones: socp::Cones { nonneg: 0, soc: vec![3] },
    };
    let err = socp::solve(&prob, &socp::Settings::default()).map(|s| (s.x[0] - 5.0).abs()).unwrap_or(f64::INFINITY);
    out.push(check("cone solver on a fixed cone member", err, 1e-7));

    // ellipse projection lands on the surface
    let cov = nalgebra::Matrix2::new(2.0, 0.3, 0.3, 0.5);
    let z = crate::convexify::project_onto_ellipsoid(&nalgebra::Vector2::new(0.2, 0.1), &cov, 4.0);
    let err = ((z.transpose() * cov.try_inverse().expect("positive definite") * z)[0] - 4.0).abs();
    out.push(check("keep-out projection on the boundary", err, 1e-9));

    // mixture moments of the builtin splits
    let mut p = Matrix6::identity();
    p[(0, 1)] = 0.3;
    p[(1, 0)] = 0.3;
    let gs = GaussianState::new(Vector6::new(1.0, 2.0, 3.0, 0.1, 0.2, 0.3), p);
    let dir = Vector6::new(1.0, 0.5, 0.0, 0.0, 0.0, 0.2).normalize();
    let mut err: f64 = 0.0;
    for n in [3, 5, 7] {
        match uncert::gmm_split(&gs, n, &dir) {
            Ok(mix) => {
                let (m, c) = uncert::mixture_moments(&mix);
                err = err.max((m - gs.mean).amax()).max((c - gs.cov).amax());
            }
            Err(_) => err = f64::INFINITY,
        }
    }
    out.push(check("mixture moments of the splits", err, 2e-2));
    out
}

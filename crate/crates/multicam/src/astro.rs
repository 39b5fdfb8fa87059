//! Orbital dynamics in scaled units (μ = 1): equations of motion, an
//! embedded Runge-Kutta-Fehlberg 7(8) integrator generic over [`Number`],
//! segment linearization, node grids and TCA refinement.

use nalgebra::{Matrix3, Matrix6, Matrix6x3, Vector3, Vector6};
use num_traits::{Float, One, ToPrimitive, Zero};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::dajet::{self, partial_invert, DaError, Jet};
use crate::scalar::{c, Number};
use crate::units::{Units, J2_EARTH, R_EARTH};

pub type State = [f64; 6];

#[derive(Debug, Error, Clone, PartialEq)]
pub enum AstroError {
    #[error("zero radius in equations of motion")]
    ZeroRadius,
    #[error("step size underflow at t = {t:e} (h = {h:e})")]
    Stiff { t: f64, h: f64 },
    #[error("trajectory intersects the central body (|r| = {0})")]
    Impact(f64),
    #[error("degenerate encounter: {0}")]
    Degenerate(&'static str),
    #[error("grid: {0}")]
    Grid(String),
    #[error(transparent)]
    Da(#[from] DaError),
}

pub type AstroResult<T> = Result<T, AstroError>;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Model {
    TwoBody,
    TwoBodyJ2,
}

/// Force model in scaled units.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Dynamics {
    pub model: Model,
    /// `J2 · (R_E / L)²`
    pub j2_re2: f64,
    /// Central body radius in scaled length.
    pub body_radius: f64,
}

impl Dynamics {
    pub fn new(model: Model, units: &Units) -> Dynamics {
        let re = R_EARTH / units.length;
        Dynamics { model, j2_re2: J2_EARTH * re * re, body_radius: re }
    }

    /// Point-mass gravity without a surface check.
    pub fn point_mass() -> Dynamics {
        Dynamics { model: Model::TwoBody, j2_re2: 0.0, body_radius: 0.0 }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CartesianState {
    pub r: [f64; 3],
    pub v: [f64; 3],
    pub epoch: f64,
}

impl CartesianState {
    pub fn from_state(x: &State, epoch: f64) -> Self {
        CartesianState { r: [x[0], x[1], x[2]], v: [x[3], x[4], x[5]], epoch }
    }
    pub fn state(&self) -> State {
        [self.r[0], self.r[1], self.r[2], self.v[0], self.v[1], self.v[2]]
    }
}

/// State derivative under `d` with acceleration `u`.
pub fn eom<N: Number>(x: &[N; 6], u: &[N; 3], d: &Dynamics) -> AstroResult<[N; 6]> {
    let r2 = x[0].clone().square() + x[1].clone().square() + x[2].clone().square();
    if r2.value() <= N::Scalar::zero() {
        return Err(AstroError::ZeroRadius);
    }
    let ir2 = r2.clone().recip();
    let ir = r2.sqrt().recip();
    let ir3 = ir2.clone() * ir.clone();
    let mut a = [
        -(x[0].clone() * ir3.clone()),
        -(x[1].clone() * ir3.clone()),
        -(x[2].clone() * ir3.clone()),
    ];
    if d.model == Model::TwoBodyJ2 && d.j2_re2 != 0.0 {
        let k = (ir3 * ir2.clone()).scale(c::<N::Scalar>(-1.5 * d.j2_re2));
        let z2r2 = (x[2].clone().square() * ir2).scale(c(5.0));
        let fxy = (-z2r2.clone()).shift(c(1.0));
        let fz = (-z2r2).shift(c(3.0));
        a[0] = a[0].clone() + k.clone() * x[0].clone() * fxy.clone();
        a[1] = a[1].clone() + k.clone() * x[1].clone() * fxy;
        a[2] = a[2].clone() + k * x[2].clone() * fz;
    }
    let [a0, a1, a2] = a;
    Ok([
        x[3].clone(),
        x[4].clone(),
        x[5].clone(),
        a0 + u[0].clone(),
        a1 + u[1].clone(),
        a2 + u[2].clone(),
    ])
}

// Fehlberg 7(8); the dynamics are autonomous so the nodes c_i are not needed.
const RK_A: [&[f64]; 13] = [
    &[],
    &[2.0 / 27.0],
    &[1.0 / 36.0, 1.0 / 12.0],
    &[1.0 / 24.0, 0.0, 1.0 / 8.0],
    &[5.0 / 12.0, 0.0, -25.0 / 16.0, 25.0 / 16.0],
    &[1.0 / 20.0, 0.0, 0.0, 1.0 / 4.0, 1.0 / 5.0],
    &[-25.0 / 108.0, 0.0, 0.0, 125.0 / 108.0, -65.0 / 27.0, 125.0 / 54.0],
    &[31.0 / 300.0, 0.0, 0.0, 0.0, 61.0 / 225.0, -2.0 / 9.0, 13.0 / 900.0],
    &[2.0, 0.0, 0.0, -53.0 / 6.0, 704.0 / 45.0, -107.0 / 9.0, 67.0 / 90.0, 3.0],
    &[-91.0 / 108.0, 0.0, 0.0, 23.0 / 108.0, -976.0 / 135.0, 311.0 / 54.0, -19.0 / 60.0, 17.0 / 6.0, -1.0 / 12.0],
    &[
        2383.0 / 4100.0,
        0.0,
        0.0,
        -341.0 / 164.0,
        4496.0 / 1025.0,
        -301.0 / 82.0,
        2133.0 / 4100.0,
        45.0 / 82.0,
        45.0 / 164.0,
        18.0 / 41.0,
    ],
    &[3.0 / 205.0, 0.0, 0.0, 0.0, 0.0, -6.0 / 41.0, -3.0 / 205.0, -3.0 / 41.0, 3.0 / 41.0, 6.0 / 41.0, 0.0],
    &[
        -1777.0 / 4100.0,
        0.0,
        0.0,
        -341.0 / 164.0,
        4496.0 / 1025.0,
        -289.0 / 82.0,
        2193.0 / 4100.0,
        51.0 / 82.0,
        33.0 / 164.0,
        12.0 / 41.0,
        0.0,
        1.0,
    ],
];

const RK_B8: [f64; 13] = [
    0.0,
    0.0,
    0.0,
    0.0,
    0.0,
    34.0 / 105.0,
    9.0 / 35.0,
    9.0 / 35.0,
    9.0 / 280.0,
    9.0 / 280.0,
    0.0,
    41.0 / 840.0,
    41.0 / 840.0,
];

/// Step length, either a plain number or a jet (for expansions in time).
enum Step<'a, N: Number> {
    Scalar(N::Scalar),
    Jet(&'a N),
}

impl<N: Number> Step<'_, N> {
    fn times(&self, v: N) -> N {
        match self {
            Step::Scalar(h) => v.scale(*h),
            Step::Jet(h) => (*h).clone() * v,
        }
    }
}

/// One Fehlberg step; returns the 8th-order update and the scaled error
/// estimate (value parts only).
fn rk78_step<N: Number>(
    x: &[N; 6],
    u: &[N; 3],
    d: &Dynamics,
    h: Step<'_, N>,
) -> AstroResult<([N; 6], N::Scalar)> {
    let mut k: Vec<[N; 6]> = Vec::with_capacity(13);
    for s in 0..13 {
        let xs: [N; 6] = if s == 0 {
            x.clone()
        } else {
            std::array::from_fn(|i| {
                let mut acc: Option<N> = None;
                for (j, &a) in RK_A[s].iter().enumerate() {
                    if a != 0.0 {
                        let term = k[j][i].clone().scale(c(a));
                        acc = Some(match acc {
                            None => term,
                            Some(v) => v + term,
                        });
                    }
                }
                x[i].clone() + h.times(acc.expect("every stage has a nonzero coefficient"))
            })
        };
        k.push(eom(&xs, u, d)?);
    }
    let mut err = N::Scalar::zero();
    let out: [N; 6] = std::array::from_fn(|i| {
        let mut acc = k[5][i].clone().scale(c(RK_B8[5]));
        for (s, &b) in RK_B8.iter().enumerate().skip(6) {
            if b != 0.0 {
                acc = acc + k[s][i].clone().scale(c(b));
            }
        }
        let e = (k[0][i].value() + k[10][i].value() - k[11][i].value() - k[12][i].value())
            * c(41.0 / 840.0);
        let hv = match &h {
            Step::Scalar(h) => *h,
            Step::Jet(h) => h.value(),
        };
        err = err.max((e * hv).abs());
        x[i].clone() + h.times(acc)
    });
    Ok((out, err))
}

#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct PropagationStats {
    pub accepted: usize,
    pub rejected: usize,
}

/// Propagates `x0` over `dt` (scaled time, either sign) with constant
/// acceleration `u`. Local error per step is kept below `tol`.
pub fn propagate<N: Number>(
    x0: &[N; 6],
    u: &[N; 3],
    dt: N::Scalar,
    d: &Dynamics,
    tol: N::Scalar,
) -> AstroResult<[N; 6]> {
    propagate_with_stats(x0, u, dt, d, tol).map(|(x, _)| x)
}

pub fn propagate_with_stats<N: Number>(
    x0: &[N; 6],
    u: &[N; 3],
    dt: N::Scalar,
    d: &Dynamics,
    tol: N::Scalar,
) -> AstroResult<([N; 6], PropagationStats)> {
    let mut stats = PropagationStats::default();
    let zero = N::Scalar::zero();
    if dt == zero {
        return Ok((x0.clone(), stats));
    }
    let span = dt.abs();
    let sign = dt.signum();
    let mut x = x0.clone();
    let mut t = zero;
    let mut h = span.min(c(0.25));
    let mut prev_err: N::Scalar = c(1e-4);
    let min_h: N::Scalar = c(1e-13);
    let body_r2 = c::<N::Scalar>(d.body_radius * d.body_radius);
    while t < span {
        let last = h >= span - t;
        let hh = if last { span - t } else { h };
        let (xn, err) = rk78_step(&x, u, d, Step::Scalar(hh * sign))?;
        let ratio = err / tol;
        if ratio <= N::Scalar::one() || hh <= min_h * (N::Scalar::one() + t) {
            if ratio > N::Scalar::one() {
                return Err(AstroError::Stiff { t: t.to_f64().unwrap_or(f64::NAN), h: hh.to_f64().unwrap_or(f64::NAN) });
            }
            x = xn;
            t = if last { span } else { t + hh };
            stats.accepted += 1;
            let r2 = x[0].value() * x[0].value() + x[1].value() * x[1].value() + x[2].value() * x[2].value();
            if r2 < body_r2 {
                return Err(AstroError::Impact(r2.sqrt().to_f64().unwrap_or(f64::NAN)));
            }
            // PI controller on the 8th-order error estimate
            let r = ratio.max(c(1e-10));
            let pr = (prev_err / tol).max(c(1e-10));
            let fac = c::<N::Scalar>(0.9) * r.powf(c(-0.7 / 8.0)) * pr.powf(c(0.4 / 8.0));
            let fac = fac.min(c(4.0)).max(c(0.25));
            if !last {
                h = hh * fac;
            }
            prev_err = err.max(tol * c(1e-10));
        } else {
            stats.rejected += 1;
            let fac = (c::<N::Scalar>(0.9) * ratio.powf(c(-1.0 / 8.0))).max(c(0.1));
            h = hh * fac;
        }
    }
    Ok((x, stats))
}

/// First- and second-order maps of one control segment.
#[derive(Debug, Clone, PartialEq)]
pub struct SegmentMaps {
    pub a: Matrix6<f64>,
    pub b: Matrix6x3<f64>,
    pub c: Vector6<f64>,
    pub xbar: Vector6<f64>,
    /// Nonlinearity factors for the 6 state and 3 control variables.
    pub xi: [f64; 9],
}

/// Expands the flow of one segment to second order in `(δx, δu)`.
pub fn linearize_segment(x: &State, u: &[f64; 3], dt: f64, d: &Dynamics, tol: f64) -> AstroResult<SegmentMaps> {
    let n = 9;
    let q = 2;
    let xj: [Jet<f64>; 6] = std::array::from_fn(|i| Jet::var(n, q, i, x[i]));
    let uj: [Jet<f64>; 3] = std::array::from_fn(|i| Jet::var(n, q, 6 + i, u[i]));
    let out = propagate(&xj, &uj, dt, d, tol)?;
    let mut a = Matrix6::zeros();
    let mut b = Matrix6x3::zeros();
    let mut xbar = Vector6::zeros();
    for (i, oi) in out.iter().enumerate() {
        xbar[i] = oi.value();
        let g = oi.gradient();
        for j in 0..6 {
            a[(i, j)] = g[j];
        }
        for j in 0..3 {
            b[(i, j)] = g[6 + j];
        }
    }
    let xv = Vector6::from_column_slice(x);
    let uv = Vector3::from_column_slice(u);
    let cvec = xbar - a * xv - b * uv;
    let r = dajet::second_order_ratios(&out)?;
    let xi = std::array::from_fn(|k| r[k]);
    Ok(SegmentMaps { a, b, c: cvec, xbar, xi })
}

/// Columns are the radial, transverse and normal unit vectors.
pub fn rtn_basis(x: &State) -> Matrix3<f64> {
    let r = Vector3::new(x[0], x[1], x[2]);
    let v = Vector3::new(x[3], x[4], x[5]);
    let rhat = r.normalize();
    let nhat = r.cross(&v).normalize();
    let that = nhat.cross(&rhat);
    Matrix3::from_columns(&[rhat, that, nhat])
}

/// 6×6 covariance from the owner's RTN frame to inertial axes.
pub fn rtn_to_eci_cov6(x: &State, p_rtn: &Matrix6<f64>) -> Matrix6<f64> {
    let m = rtn_basis(x);
    let mut big = Matrix6::zeros();
    big.fixed_view_mut::<3, 3>(0, 0).copy_from(&m);
    big.fixed_view_mut::<3, 3>(3, 3).copy_from(&m);
    big * p_rtn * big.transpose()
}

/// Classical elements (angles in radians) to a Cartesian state for
/// gravitational parameter `mu`.
pub fn elements_to_state(a: f64, e: f64, inc: f64, raan: f64, argp: f64, ta: f64, mu: f64) -> State {
    let p = a * (1.0 - e * e);
    let r = p / (1.0 + e * ta.cos());
    let (st, ct) = ta.sin_cos();
    let rp = Vector3::new(r * ct, r * st, 0.0);
    let k = (mu / p).sqrt();
    let vp = Vector3::new(-k * st, k * (e + ct), 0.0);
    let rot = nalgebra::Rotation3::from_axis_angle(&Vector3::z_axis(), raan)
        * nalgebra::Rotation3::from_axis_angle(&Vector3::x_axis(), inc)
        * nalgebra::Rotation3::from_axis_angle(&Vector3::z_axis(), argp);
    let r = rot * rp;
    let v = rot * vp;
    [r.x, r.y, r.z, v.x, v.y, v.z]
}

pub fn specific_energy(x: &State) -> f64 {
    let r = (x[0] * x[0] + x[1] * x[1] + x[2] * x[2]).sqrt();
    0.5 * (x[3] * x[3] + x[4] * x[4] + x[5] * x[5]) - 1.0 / r
}

/// Node epochs (scaled time) and segment lengths.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NodeGrid {
    pub times: Vec<f64>,
}

impl NodeGrid {
    pub fn n_nodes(&self) -> usize {
        self.times.len()
    }
    pub fn n_segments(&self) -> usize {
        self.times.len().saturating_sub(1)
    }
    pub fn dt(&self, i: usize) -> f64 {
        self.times[i + 1] - self.times[i]
    }
    /// Index of the node at `t`, within `tol`.
    pub fn node_at(&self, t: f64, tol: f64) -> Option<usize> {
        let i = self.times.partition_point(|&x| x < t - tol);
        (i < self.times.len() && (self.times[i] - t).abs() <= tol).then_some(i)
    }
}

/// Uniform grid of `nodes_per_orbit` nodes per `period` on `[t0, tf]`,
/// thickened with `epochs`. Epochs closer than `snap` to an existing node
/// reuse it.
pub fn build_grid(t0: f64, tf: f64, period: f64, nodes_per_orbit: usize, epochs: &[f64], snap: f64) -> AstroResult<NodeGrid> {
    if nodes_per_orbit < 8 {
        return Err(AstroError::Grid(format!("nodes_per_orbit = {nodes_per_orbit} < 8")));
    }
    if !(tf > t0) {
        return Err(AstroError::Grid(format!("empty horizon [{t0}, {tf}]")));
    }
    let step = period / nodes_per_orbit as f64;
    let mut times = Vec::new();
    let mut k = 0usize;
    loop {
        let t = t0 + k as f64 * step;
        if t >= tf - snap {
            break;
        }
        times.push(t);
        k += 1;
    }
    times.push(tf);
    let mut grid = NodeGrid { times };
    for &e in epochs {
        if e < t0 - snap || e > tf + snap {
            return Err(AstroError::Grid(format!("epoch {e} outside horizon [{t0}, {tf}]")));
        }
        if grid.node_at(e, snap).is_none() {
            let i = grid.times.partition_point(|&x| x < e);
            grid.times.insert(i, e);
        }
    }
    Ok(grid)
}

/// Time shift (scaled) to the closest approach of two objects given at a
/// common nominal epoch.
pub fn refine_tca(xp: &State, xs: &State, d: &Dynamics, tol: f64) -> AstroResult<f64> {
    let rel_v = |p: &State, s: &State| {
        let dv = Vector3::new(p[3] - s[3], p[4] - s[4], p[5] - s[5]);
        let dr = Vector3::new(p[0] - s[0], p[1] - s[1], p[2] - s[2]);
        (dr, dv)
    };
    let (dr0, dv0) = rel_v(xp, xs);
    if dv0.norm() <= 1e-14 * (1.0 + dr0.norm()) {
        return Err(AstroError::Degenerate("zero relative velocity"));
    }
    let zero = [0.0f64; 3];
    let mut p = *xp;
    let mut s = *xs;
    let mut total = 0.0;
    for _ in 0..10 {
        let h = Jet::var(1, 2, 0, 0.0);
        let lift = |x: &State| -> [Jet<f64>; 6] { std::array::from_fn(|i| Jet::constant(1, 2, x[i])) };
        let uj: [Jet<f64>; 3] = std::array::from_fn(|_| Jet::constant(1, 2, 0.0));
        let (jp, _) = rk78_step(&lift(&p), &uj, d, Step::Jet(&h))?;
        let (js, _) = rk78_step(&lift(&s), &uj, d, Step::Jet(&h))?;
        let mut g = Jet::constant(1, 2, 0.0);
        for i in 0..3 {
            g = &g + &(&(&jp[i] - &js[i]) * &(&jp[i + 3] - &js[i + 3]));
        }
        if g.value() == 0.0 {
            break;
        }
        let inv = partial_invert(&g, 0)?;
        let mut step = inv.eval(&[-g.value()])?;
        let before = rel_v(&p, &s).0.norm();
        let mut accepted = false;
        for _ in 0..30 {
            let pn = propagate(&p, &zero, step, d, tol)?;
            let sn = propagate(&s, &zero, step, d, tol)?;
            if rel_v(&pn, &sn).0.norm() <= before {
                p = pn;
                s = sn;
                accepted = true;
                break;
            }
            step *= 0.5;
        }
        if !accepted {
            break;
        }
        total += step;
        if step.abs() < 1e-13 {
            break;
        }
    }
    Ok(total)
}

//! Convex subproblem of one SCP iteration.
//!
//! Decision variables are deviations from the reference trajectory divided
//! by `u_max`, so that states, controls and virtual controls share one scale:
//! `x_i = x̃_i + u_max·δx_i`, `u_i = u_max·w_i`, virtual control
//! `υ_i = u_max·v_i`. The problem reads
//!
//! ```text
//! minimize    Σ s_i Δt_i + κ_vc Σ ν_i
//! subject to  δx_0 = 0
//!             δx_{i+1} − A_i δx_i − B_i w_i − v_{i+1} = (x̄_i − x̃_{i+1} − B_i ũ_i)/u_max
//!             ‖w_i‖ ≤ s_i ≤ 1,  ‖v_i‖ ≤ ν_i
//!             |δx_ik| ≤ ν̄/(ξ_ik u_max),  |w_ik − w̃_ik| ≤ ν̄/(ξ_{i,6+k} u_max)
//!             Σ g·δr_node ≤ rhs   (risk cuts)
//! ```

use std::fmt::Write as _;
use std::ops::Range;

use nalgebra::{DMatrix, DVector, Matrix2, Matrix2x3, Matrix3, SMatrix, SVector, SymmetricEigen, Vector3};
use thiserror::Error;

use crate::astro::{NodeGrid, SegmentMaps, State};
use crate::dajet::{self, DaError, Jet};
use crate::risk::{self, RiskError};
use crate::socp::{self, Cones};
use crate::sparse::Csc;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum ConvexifyError {
    #[error("expected {expected} segment maps, got {got}")]
    MissingSegments { expected: usize, got: usize },
    #[error("dimension mismatch: {0}")]
    Dimension(String),
    #[error(transparent)]
    Risk(#[from] RiskError),
    #[error(transparent)]
    Da(#[from] DaError),
}

pub type ConvexifyResult<T> = Result<T, ConvexifyError>;

/// Closest point to `p` on the surface `zᵀP⁻¹z = d2`.
///
/// Interior points are pushed to the nearest surface point as well.
pub fn project_onto_ellipsoid<const D: usize>(
    p: &SVector<f64, D>,
    cov: &SMatrix<f64, D, D>,
    d2: f64,
) -> SVector<f64, D> {
    let cd = DMatrix::from_column_slice(D, D, cov.as_slice());
    let e = SymmetricEigen::new(cd.clone());
    let lam = e.eigenvalues;
    let q = e.eigenvectors.transpose() * DVector::from_column_slice(p.as_slice());
    let f = |mu: f64| (0..D).map(|k| q[k] * q[k] * lam[k] / ((lam[k] + mu) * (lam[k] + mu))).sum::<f64>();
    let z_of = |mu: f64| SVector::<f64, D>::from_fn(|k, _| q[k] * lam[k] / (lam[k] + mu));
    let kmin = lam.imin();
    let lmin = lam[kmin];
    let f0 = f(0.0);
    let zl = if f0 >= d2 {
        let mut hi = lmin.max(1e-300);
        while f(hi) > d2 {
            hi *= 2.0;
        }
        z_of(crate::optim::bisect(0.0, hi, 0.0, |mu| f(mu) - d2))
    } else {
        // interior: the root lies in (−λ_min, 0) unless q has no λ_min component
        let others: f64 =
            (0..D).filter(|&k| k != kmin).map(|k| q[k] * q[k] * lam[k] / ((lam[k] - lmin) * (lam[k] - lmin))).sum();
        if q[kmin].abs() <= 1e-12 * q.norm().max(1e-300) && others <= d2 {
            let mut z = SVector::<f64, D>::from_fn(|k, _| if k == kmin { 0.0 } else { q[k] * lam[k] / (lam[k] - lmin) });
            let used: f64 = (0..D).filter(|&k| k != kmin).map(|k| z[k] * z[k] / lam[k]).sum();
            let sign = if q[kmin] < 0.0 { -1.0 } else { 1.0 };
            z[kmin] = sign * (lmin * (d2 - used).max(0.0)).sqrt();
            z
        } else {
            let mut step = lmin * 0.5;
            while f(-lmin + step) < d2 && step > lmin * 1e-300 {
                step *= 0.5;
            }
            z_of(crate::optim::bisect(-lmin + step, 0.0, 0.0, |mu| f(mu) - d2))
        }
    };
    let z = SVector::<f64, D>::from_column_slice((e.eigenvectors * DVector::from_column_slice(zl.as_slice())).as_slice());
    let inv = cd.try_inverse().expect("covariance is positive definite");
    let zd = DVector::from_column_slice(z.as_slice());
    let cur = zd.dot(&(inv * &zd));
    if cur > 0.0 {
        z * (d2 / cur).sqrt()
    } else {
        z
    }
}

/// Tangent plane to the keep-out ellipse/ellipsoid at `anchor`.
#[derive(Debug, Clone, PartialEq)]
pub struct KozHalfspace<const D: usize> {
    /// `∇(zᵀP⁻¹z) = 2P⁻¹z`
    pub normal: SVector<f64, D>,
    pub anchor: SVector<f64, D>,
    pub node: usize,
}

impl<const D: usize> KozHalfspace<D> {
    /// `normal·(p − anchor)`; nonnegative outside the keep-out zone.
    pub fn margin(&self, p: &SVector<f64, D>) -> f64 {
        self.normal.dot(&(p - self.anchor))
    }
    pub fn satisfied(&self, p: &SVector<f64, D>) -> bool {
        self.margin(p) >= 0.0
    }
}

pub fn koz_halfspace<const D: usize>(z: &SVector<f64, D>, cov: &SMatrix<f64, D, D>, node: usize) -> KozHalfspace<D> {
    let inv = DMatrix::from_column_slice(D, D, cov.as_slice()).try_inverse().expect("covariance is positive definite");
    let n = inv * DVector::from_column_slice(z.as_slice()) * 2.0;
    KozHalfspace { normal: SVector::from_column_slice(n.as_slice()), anchor: *z, node }
}

/// Linear constraint `Σ gᵀδr_node ≤ rhs` on primary positions at nodes.
#[derive(Debug, Clone, PartialEq)]
pub struct PositionCut {
    pub terms: Vec<(usize, Vector3<f64>)>,
    pub rhs: f64,
}

impl PositionCut {
    /// B-plane half-space in terms of a primary position deviation
    /// `δr` (same length unit as the B-plane) through the projector `m`.
    pub fn from_bplane(h: &KozHalfspace<2>, m: &Matrix2x3<f64>, dr_b_ref: &nalgebra::Vector2<f64>) -> PositionCut {
        // n·(Δr_B + M δr − z) ≥ 0
        let g = m.transpose() * h.normal;
        PositionCut { terms: vec![(h.node, -g)], rhs: h.margin(dr_b_ref) }
    }

    pub fn from_space(h: &KozHalfspace<3>, dr_ref: &Vector3<f64>) -> PositionCut {
        PositionCut { terms: vec![(h.node, -h.normal)], rhs: h.margin(dr_ref) }
    }

    /// Rescales the cut so the coefficient vector has unit norm.
    pub fn normalized(mut self) -> PositionCut {
        let n = self.terms.iter().map(|(_, g)| g.norm_squared()).sum::<f64>().sqrt();
        if n > 0.0 {
            for (_, g) in &mut self.terms {
                *g /= n;
            }
            self.rhs /= n;
        }
        self
    }

    /// Converts position units: `δr_cut = k · δr_var`.
    pub fn rescaled(mut self, k: f64) -> PositionCut {
        for (_, g) in &mut self.terms {
            *g *= k;
        }
        self
    }

    pub fn evaluate(&self, dr: impl Fn(usize) -> Vector3<f64>) -> f64 {
        self.terms.iter().map(|(k, g)| g.dot(&dr(*k))).sum()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub enum RiskKind {
    /// Short-term encounter evaluated with Chan's series in the B-plane.
    Encounter { projector: Matrix2x3<f64>, p_b: Matrix2<f64>, hbr: f64 },
    /// Instantaneous probability with a 3D relative covariance.
    Instantaneous { cov: Matrix3<f64>, radius: f64 },
}

/// One weighted object (conjunction or mixand) contributing at a node.
#[derive(Debug, Clone, PartialEq)]
pub struct RiskTerm {
    pub node: usize,
    pub weight: f64,
    pub r_s: Vector3<f64>,
    pub kind: RiskKind,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum RiskMode {
    /// One constraint on the product-form total of all terms.
    Total,
    /// One constraint per node over the terms at that node.
    NodeWise,
}

/// First-order model `value + Σ gᵀδr ≤ limit` of a total probability.
#[derive(Debug, Clone, PartialEq)]
pub struct LinearizedRisk {
    pub value: f64,
    pub nodes: Vec<usize>,
    pub gradient: Vec<Vector3<f64>>,
    /// Nonlinearity factors per node and position component.
    pub xi: Vec<[f64; 3]>,
}

impl LinearizedRisk {
    pub fn cut(&self, limit: f64) -> PositionCut {
        PositionCut { terms: self.nodes.iter().copied().zip(self.gradient.iter().copied()).collect(), rhs: limit - self.value }
    }
}

fn term_probability(t: &RiskTerm, dr: &[Jet<f64>; 3]) -> ConvexifyResult<Jet<f64>> {
    match &t.kind {
        RiskKind::Encounter { projector, p_b, hbr } => {
            let inv = p_b.try_inverse().ok_or(RiskError::NotPositiveDefinite)?;
            let b: [Jet<f64>; 2] = std::array::from_fn(|i| {
                let mut s = dr[0].constant_like(0.0);
                for j in 0..3 {
                    s = &s + &dr[j].scale_by(projector[(i, j)]);
                }
                s
            });
            let mut d2 = dr[0].constant_like(0.0);
            for i in 0..2 {
                for j in 0..2 {
                    d2 = &d2 + &(&b[i] * &b[j]).scale_by(inv[(i, j)]);
                }
            }
            let u = risk::chan_u(p_b, *hbr)?;
            Ok(risk::chan_series(u, d2))
        }
        RiskKind::Instantaneous { cov, radius } => {
            let chol = cov.cholesky().ok_or(RiskError::NotPositiveDefinite)?;
            Ok(risk::ipoc(dr, &chol.inverse(), cov.determinant(), *radius))
        }
    }
}

/// Second-order expansion of `1 − Π(1 − γ p)` in the primary position at
/// each node. `r_p(node)` gives the reference primary position.
pub fn linearize_total_risk(
    terms: &[RiskTerm],
    r_p: impl Fn(usize) -> Vector3<f64>,
    mode: RiskMode,
) -> ConvexifyResult<Vec<LinearizedRisk>> {
    let groups: Vec<Vec<&RiskTerm>> = match mode {
        RiskMode::Total => vec![terms.iter().collect()],
        RiskMode::NodeWise => {
            let mut nodes: Vec<usize> = terms.iter().map(|t| t.node).collect();
            nodes.sort_unstable();
            nodes.dedup();
            nodes.iter().map(|&k| terms.iter().filter(|t| t.node == k).collect()).collect()
        }
    };
    let mut out = Vec::new();
    for g in groups {
        if g.is_empty() {
            continue;
        }
        let mut nodes: Vec<usize> = g.iter().map(|t| t.node).collect();
        nodes.sort_unstable();
        nodes.dedup();
        let n = 3 * nodes.len();
        let mut keep = Jet::constant(n, 2, 1.0);
        for t in &g {
            let k = nodes.binary_search(&t.node).expect("node collected above");
            let r = r_p(t.node);
            let dr: [Jet<f64>; 3] = std::array::from_fn(|i| Jet::var(n, 2, 3 * k + i, r[i] - t.r_s[i]));
            let p = term_probability(t, &dr)?;
            keep = &keep * &(&Jet::constant(n, 2, 1.0) - &p.scale_by(t.weight));
        }
        let total = &Jet::constant(n, 2, 1.0) - &keep;
        let grad = total.gradient();
        let xi = match dajet::second_order_ratios(std::slice::from_ref(&total)) {
            Ok(v) => v,
            Err(DaError::Domain(_)) => vec![0.0; n],
            Err(e) => return Err(e.into()),
        };
        out.push(LinearizedRisk {
            value: total.value(),
            gradient: (0..nodes.len()).map(|k| Vector3::new(grad[3 * k], grad[3 * k + 1], grad[3 * k + 2])).collect(),
            xi: (0..nodes.len()).map(|k| [xi[3 * k], xi[3 * k + 1], xi[3 * k + 2]]).collect(),
            nodes,
        });
    }
    Ok(out)
}

/// Offsets of the variable blocks.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct VarMap {
    pub n_segments: usize,
}

impl VarMap {
    fn nn(&self) -> usize {
        self.n_segments + 1
    }
    /// State deviation at node `i`, `0 ≤ i ≤ N`.
    pub fn x(&self, i: usize) -> Range<usize> {
        6 * i..6 * i + 6
    }
    /// Normalized control vector of segment `i`.
    pub fn u(&self, i: usize) -> Range<usize> {
        let o = 6 * self.nn() + 3 * i;
        o..o + 3
    }
    /// Slack bounding `‖u_i‖`.
    pub fn slack(&self, i: usize) -> usize {
        6 * self.nn() + 3 * self.n_segments + i
    }
    /// Virtual control entering node `i`, `1 ≤ i ≤ N`.
    pub fn vc(&self, i: usize) -> Range<usize> {
        let o = 6 * self.nn() + 4 * self.n_segments + 6 * (i - 1);
        o..o + 6
    }
    pub fn vc_norm(&self, i: usize) -> usize {
        6 * self.nn() + 10 * self.n_segments + (i - 1)
    }
    /// `6(N+1) + 11N`
    pub fn len(&self) -> usize {
        6 * self.nn() + 11 * self.n_segments
    }
    pub fn is_empty(&self) -> bool {
        false
    }
    /// Named slices in storage order.
    pub fn slices(&self) -> Vec<(String, Range<usize>)> {
        let n = self.n_segments;
        let mut v: Vec<(String, Range<usize>)> = (0..=n).map(|i| (format!("x[{i}]"), self.x(i))).collect();
        v.extend((0..n).map(|i| (format!("u[{i}]"), self.u(i))));
        v.extend((0..n).map(|i| (format!("s[{i}]"), self.slack(i)..self.slack(i) + 1)));
        v.extend((1..=n).map(|i| (format!("v[{i}]"), self.vc(i))));
        v.extend((1..=n).map(|i| (format!("nu[{i}]"), self.vc_norm(i)..self.vc_norm(i) + 1)));
        v
    }
}

/// Linear objective, equalities, box bounds, general inequalities and
/// second-order cones over named variable slices.
#[derive(Debug, Clone, PartialEq)]
pub struct ConicProblem {
    pub cost: Vec<f64>,
    pub eq: Csc,
    pub eq_rhs: Vec<f64>,
    pub lower: Vec<f64>,
    pub upper: Vec<f64>,
    /// Rows `aᵀx ≤ b` as sparse `(index, coefficient)` lists.
    pub ineq: Vec<(Vec<(usize, f64)>, f64)>,
    /// Each cone lists `[t, v_1, …, v_k]` with `‖v‖ ≤ t`.
    pub socs: Vec<Vec<usize>>,
    pub var_map: VarMap,
}

impl ConicProblem {
    pub fn n_vars(&self) -> usize {
        self.cost.len()
    }

    pub fn to_socp(&self) -> socp::Problem {
        let n = self.n_vars();
        let mut g = Vec::new();
        let mut h = Vec::new();
        for j in 0..n {
            if self.lower[j].is_finite() {
                g.push((h.len(), j, -1.0));
                h.push(-self.lower[j]);
            }
            if self.upper[j].is_finite() {
                g.push((h.len(), j, 1.0));
                h.push(self.upper[j]);
            }
        }
        for (row, b) in &self.ineq {
            for &(j, a) in row {
                g.push((h.len(), j, a));
            }
            h.push(*b);
        }
        let nonneg = h.len();
        for cone in &self.socs {
            for &j in cone {
                g.push((h.len(), j, -1.0));
                h.push(0.0);
            }
        }
        socp::Problem {
            c: self.cost.clone(),
            a: self.eq.clone(),
            b: self.eq_rhs.clone(),
            g: Csc::from_triplets(h.len(), n, &g),
            h,
            cones: Cones { nonneg, soc: self.socs.iter().map(|c| c.len()).collect() },
        }
    }

    /// Plain-text dump: the variable map followed by the cone-form problem.
    pub fn to_dump(&self) -> String {
        let mut s = String::new();
        for (name, r) in self.var_map.slices() {
            let _ = writeln!(s, "# {name} {} {}", r.start, r.end);
        }
        s + &self.to_socp().to_dump()
    }

    pub fn decode(&self, x: &[f64]) -> Decoded {
        let m = &self.var_map;
        let n = m.n_segments;
        let arr = |r: Range<usize>| -> Vec<f64> { x[r].to_vec() };
        Decoded {
            dx: (0..=n).map(|i| arr(m.x(i)).try_into().unwrap()).collect(),
            u: (0..n).map(|i| arr(m.u(i)).try_into().unwrap()).collect(),
            slack: (0..n).map(|i| x[m.slack(i)]).collect(),
            vc: (1..=n).map(|i| arr(m.vc(i)).try_into().unwrap()).collect(),
            vc_norm: (1..=n).map(|i| x[m.vc_norm(i)]).collect(),
        }
    }
}

/// Solution of a [`ConicProblem`] split by block.
#[derive(Debug, Clone, PartialEq)]
pub struct Decoded {
    pub dx: Vec<[f64; 6]>,
    pub u: Vec<[f64; 3]>,
    pub slack: Vec<f64>,
    /// `vc[i]` enters node `i + 1`.
    pub vc: Vec<[f64; 6]>,
    pub vc_norm: Vec<f64>,
}

impl Decoded {
    /// Largest `s_i − ‖u_i‖`.
    pub fn relaxation_gap(&self) -> f64 {
        self.u
            .iter()
            .zip(&self.slack)
            .map(|(u, s)| s - (u[0] * u[0] + u[1] * u[1] + u[2] * u[2]).sqrt())
            .fold(0.0, f64::max)
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ConvexParams {
    pub kappa_vc: f64,
    pub nu_bar: f64,
}

impl Default for ConvexParams {
    fn default() -> Self {
        ConvexParams { kappa_vc: 1e4, nu_bar: 1e-2 }
    }
}

/// Everything [`assemble`] needs besides the risk cuts.
#[derive(Debug, Clone, Copy)]
pub struct Reference<'a> {
    pub grid: &'a NodeGrid,
    pub segments: &'a [SegmentMaps],
    pub states: &'a [State],
    /// Scaled accelerations per segment.
    pub controls: &'a [[f64; 3]],
    /// Scaled maximum acceleration.
    pub u_max: f64,
}

/// Extra symmetric bound `|δx_{node,k}| ≤ b` in variable units.
pub type PositionBound = (usize, usize, f64);

pub fn assemble(
    r: &Reference<'_>,
    cuts: &[PositionCut],
    extra_bounds: &[PositionBound],
    params: &ConvexParams,
) -> ConvexifyResult<ConicProblem> {
    let n = r.grid.n_segments();
    if r.segments.len() != n {
        return Err(ConvexifyError::MissingSegments { expected: n, got: r.segments.len() });
    }
    if r.states.len() != n + 1 || r.controls.len() != n {
        return Err(ConvexifyError::Dimension(format!(
            "{} nodes need {} states and {} controls, got {} and {}",
            n + 1,
            n + 1,
            n,
            r.states.len(),
            r.controls.len()
        )));
    }
    let m = VarMap { n_segments: n };
    let nv = m.len();
    let d = r.u_max;
    let mut cost = vec![0.0; nv];
    let mut lower = vec![f64::NEG_INFINITY; nv];
    let mut upper = vec![f64::INFINITY; nv];
    for i in 0..n {
        cost[m.slack(i)] = r.grid.dt(i);
        cost[m.vc_norm(i + 1)] = params.kappa_vc;
        upper[m.slack(i)] = 1.0;
    }
    let mut t = Vec::new();
    let mut rhs = Vec::with_capacity(6 * (n + 1));
    for k in 0..6 {
        t.push((k, m.x(0).start + k, 1.0));
        rhs.push(0.0);
    }
    for (i, seg) in r.segments.iter().enumerate() {
        let xn = &r.states[i + 1];
        let bu = seg.b * Vector3::from_column_slice(&r.controls[i]);
        for row in 0..6 {
            let e = rhs.len();
            t.push((e, m.x(i + 1).start + row, 1.0));
            t.push((e, m.vc(i + 1).start + row, -1.0));
            for col in 0..6 {
                let a = seg.a[(row, col)];
                if a != 0.0 {
                    t.push((e, m.x(i).start + col, -a));
                }
            }
            for col in 0..3 {
                let b = seg.b[(row, col)];
                if b != 0.0 {
                    t.push((e, m.u(i).start + col, -b));
                }
            }
            rhs.push((seg.xbar[row] - xn[row] - bu[row]) / d);
        }
        for k in 0..6 {
            if seg.xi[k] > 0.0 {
                let b = params.nu_bar / (seg.xi[k] * d);
                let j = m.x(i).start + k;
                if i > 0 {
                    lower[j] = lower[j].max(-b);
                    upper[j] = upper[j].min(b);
                }
            }
        }
        for k in 0..3 {
            if seg.xi[6 + k] > 0.0 {
                let b = params.nu_bar / (seg.xi[6 + k] * d);
                let w0 = r.controls[i][k] / d;
                // |w| ≤ 1 already; wider boxes never bind
                if b < 2.0 {
                    let j = m.u(i).start + k;
                    lower[j] = w0 - b;
                    upper[j] = w0 + b;
                }
            }
        }
    }
    for &(node, k, b) in extra_bounds {
        if node > n || k >= 6 {
            return Err(ConvexifyError::Dimension(format!("bound on x[{node}][{k}]")));
        }
        if node > 0 {
            let j = m.x(node).start + k;
            lower[j] = lower[j].max(-b);
            upper[j] = upper[j].min(b);
        }
    }
    let mut ineq = Vec::with_capacity(cuts.len());
    for c in cuts {
        let mut row = Vec::new();
        for (node, g) in &c.terms {
            if *node > n {
                return Err(ConvexifyError::Dimension(format!("cut on node {node} of {}", n + 1)));
            }
            for k in 0..3 {
                row.push((m.x(*node).start + k, g[k]));
            }
        }
        ineq.push((row, c.rhs));
    }
    let mut socs = Vec::with_capacity(2 * n);
    for i in 0..n {
        let mut cone = vec![m.slack(i)];
        cone.extend(m.u(i));
        socs.push(cone);
        let mut cone = vec![m.vc_norm(i + 1)];
        cone.extend(m.vc(i + 1));
        socs.push(cone);
    }
    Ok(ConicProblem {
        cost,
        eq: Csc::from_triplets(rhs.len(), nv, &t),
        eq_rhs: rhs,
        lower,
        upper,
        ineq,
        socs,
        var_map: m,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use nalgebra::{Vector2, Vector3};

    #[test]
    fn sphere_projection() {
        let z = project_onto_ellipsoid(&Vector2::new(2.0, 0.0), &Matrix2::identity(), 1.0);
        assert!((z - Vector2::new(1.0, 0.0)).norm() < 1e-12);
        let z = project_onto_ellipsoid(&Vector3::new(0.0, 0.3, 0.0), &Matrix3::identity(), 4.0);
        assert!((z - Vector3::new(0.0, 2.0, 0.0)).norm() < 1e-12);
    }

    #[test]
    fn surface_points_are_fixed() {
        let p = Matrix2::new(4.0, 1.0, 1.0, 2.0);
        let inv = p.try_inverse().unwrap();
        let w: Vector2<f64> = Vector2::new(0.7, -1.3);
        let w = w * (3.0 / (w.transpose() * inv * w)[0]).sqrt();
        let z = project_onto_ellipsoid(&w, &p, 3.0);
        assert!((z - w).norm() < 1e-9);
    }

    #[test]
    fn centre_goes_to_minor_axis() {
        let p = Matrix2::from_diagonal(&Vector2::new(4.0, 1.0));
        let z = project_onto_ellipsoid(&Vector2::zeros(), &p, 1.0);
        assert!((z.norm() - 1.0).abs() < 1e-12 && z.x.abs() < 1e-12);
    }

    #[test]
    fn halfspace_sides() {
        let h = koz_halfspace(&Vector2::new(1.0, 0.0), &Matrix2::identity(), 0);
        assert!(h.satisfied(&Vector2::new(2.0, 0.0)));
        assert!(!h.satisfied(&Vector2::new(0.5, 0.0)));
    }

    #[test]
    fn var_map_is_a_partition() {
        let m = VarMap { n_segments: 4 };
        let mut seen = vec![0; m.len()];
        for (_, r) in m.slices() {
            for j in r {
                seen[j] += 1;
            }
        }
        assert!(seen.iter().all(|&c| c == 1));
        assert_eq!(m.len(), 6 * 5 + 11 * 4);
    }
}

//! Encounter geometry and collision-probability metrics.

use nalgebra::{Matrix2, Matrix3, SymmetricEigen, Vector2, Vector3};
use num_traits::{Float, One, Zero};
use thiserror::Error;

use crate::scalar::{c, Number};

#[derive(Debug, Error, Clone, PartialEq)]
pub enum RiskError {
    #[error("degenerate encounter: zero relative velocity")]
    ZeroRelativeVelocity,
    #[error("covariance is not positive definite")]
    NotPositiveDefinite,
    #[error("probability {p:e} is not attainable (maximum {max:e})")]
    Unattainable { p: f64, max: f64 },
}

pub type RiskResult<T> = Result<T, RiskError>;

/// Short-term encounter projected on the plane normal to the relative velocity.
#[derive(Debug, Clone, PartialEq)]
pub struct BPlaneConjunction {
    /// Rows are ξ, η, ζ; η is along the relative velocity.
    pub rotation: Matrix3<f64>,
    pub dr_b: Vector2<f64>,
    pub p_b: Matrix2<f64>,
    pub hbr: f64,
}

impl BPlaneConjunction {
    /// Rows ξ and ζ of the rotation.
    pub fn projector(&self) -> nalgebra::Matrix2x3<f64> {
        nalgebra::Matrix2x3::from_rows(&[self.rotation.row(0), self.rotation.row(2)])
    }

    pub fn smd(&self) -> RiskResult<f64> {
        smd2(&self.dr_b, &self.p_b)
    }
}

/// B-plane axes for relative velocity `dv`. `hint` (usually `v_s × v_p`)
/// fixes ξ when it is not parallel to `dv`.
pub fn bplane_frame(dv: &Vector3<f64>, hint: Option<Vector3<f64>>) -> RiskResult<Matrix3<f64>> {
    let n = dv.norm();
    if n == 0.0 || !n.is_finite() {
        return Err(RiskError::ZeroRelativeVelocity);
    }
    let eta = dv / n;
    let pick = |h: Vector3<f64>| {
        let p = h - eta * eta.dot(&h);
        (p.norm() > 1e-10 * h.norm().max(1e-300)).then(|| p.normalize())
    };
    let xi = hint
        .and_then(pick)
        .or_else(|| {
            let k = eta.iamin();
            let mut e = Vector3::zeros();
            e[k] = 1.0;
            pick(e)
        })
        .expect("some axis is not parallel to eta");
    let zeta = xi.cross(&eta);
    Ok(Matrix3::from_rows(&[xi.transpose(), eta.transpose(), zeta.transpose()]))
}

pub fn bplane_project(
    dr: &Vector3<f64>,
    dv: &Vector3<f64>,
    p_rel: &Matrix3<f64>,
    hbr: f64,
    hint: Option<Vector3<f64>>,
) -> RiskResult<BPlaneConjunction> {
    let rotation = bplane_frame(dv, hint)?;
    let m = nalgebra::Matrix2x3::from_rows(&[rotation.row(0), rotation.row(2)]);
    let dr_b = m * dr;
    let p_b = m * p_rel * m.transpose();
    let p_b = (p_b + p_b.transpose()) * 0.5;
    Ok(BPlaneConjunction { rotation, dr_b, p_b, hbr })
}

/// Squared Mahalanobis distance.
pub fn smd2(dr: &Vector2<f64>, p: &Matrix2<f64>) -> RiskResult<f64> {
    let inv = p.try_inverse().ok_or(RiskError::NotPositiveDefinite)?;
    Ok((dr.transpose() * inv * dr)[0])
}

fn principal_sigmas(p: &Matrix2<f64>) -> RiskResult<(f64, f64)> {
    let e = SymmetricEigen::new(*p);
    let (a, b) = (e.eigenvalues[0], e.eigenvalues[1]);
    if !(a > 0.0 && b > 0.0) {
        return Err(RiskError::NotPositiveDefinite);
    }
    Ok((a.sqrt(), b.sqrt()))
}

/// Tails `e^{-u/2} Σ_{k>m} (u/2)^k/k!` for `m = 0, 1, …` until negligible.
fn poisson_tails<T: Float>(u: T) -> Vec<T> {
    let hu = u * c(0.5);
    let e = (-hu).exp();
    let kmax = (hu + c::<T>(40.0) * hu.sqrt() + c(60.0)).to_usize().unwrap_or(usize::MAX).min(20_000);
    let mut terms = Vec::with_capacity(kmax + 1);
    let mut t = e;
    terms.push(t);
    for k in 1..=kmax {
        t = t * hu / c(k as f64);
        terms.push(t);
        if k as f64 > hu.to_f64().unwrap_or(0.0) && t < terms[1] * c(1e-40) {
            break;
        }
    }
    let mut tails = vec![T::zero(); terms.len()];
    let mut acc = T::zero();
    for m in (0..terms.len()).rev() {
        tails[m] = acc;
        acc = acc + terms[m];
    }
    // tails[0] from expm1 avoids cancellation for small u
    tails[0] = -(-hu).exp_m1();
    tails
}

/// Chan's series as a function of `u = R²/(σ_x σ_y)` and the squared
/// Mahalanobis distance `v`.
pub fn chan_series<N: Number>(u: N::Scalar, v: N) -> N {
    let hv = v.clone().scale(c(0.5));
    let tails = poisson_tails(u);
    let tiny: N::Scalar = c(1e-15);
    let mut vm = v.lift(N::Scalar::one());
    let mut sum = vm.clone().scale(tails[0]);
    let mut prev = sum.value().abs();
    for (m, &tail) in tails.iter().enumerate().skip(1) {
        if tail == N::Scalar::zero() {
            break;
        }
        vm = (vm * hv.clone()).scale(c::<N::Scalar>(m as f64).recip());
        let term = vm.clone().scale(tail);
        let tv = term.value().abs();
        sum = sum + term;
        if tv <= tiny * sum.value().abs() && tv <= prev {
            break;
        }
        prev = tv;
    }
    (-hv).exp() * sum
}

/// Chan's estimate of the collision probability.
pub fn chan_poc(b: &BPlaneConjunction) -> RiskResult<f64> {
    if b.hbr <= 0.0 {
        principal_sigmas(&b.p_b)?;
        return Ok(0.0);
    }
    let (sx, sy) = principal_sigmas(&b.p_b)?;
    let v = smd2(&b.dr_b, &b.p_b)?;
    let u = b.hbr * b.hbr / (sx * sy);
    Ok(chan_series(u, v).clamp(0.0, 1.0))
}

/// `u` parameter of Chan's series for a B-plane covariance.
pub fn chan_u(p_b: &Matrix2<f64>, hbr: f64) -> RiskResult<f64> {
    let (sx, sy) = principal_sigmas(p_b)?;
    Ok(hbr * hbr / (sx * sy))
}

/// Squared Mahalanobis distance at which Chan's estimate equals `p`.
pub fn invert_chan(p: f64, p_b: &Matrix2<f64>, hbr: f64) -> RiskResult<f64> {
    let u = chan_u(p_b, hbr)?;
    invert_chan_u(p, u)
}

pub fn invert_chan_u(p: f64, u: f64) -> RiskResult<f64> {
    let max = chan_series(u, 0.0);
    if !(p > 0.0 && p < max) {
        return Err(RiskError::Unattainable { p, max });
    }
    let f = |v: f64| chan_series(u, v).ln() - p.ln();
    let mut lo = 0.0;
    let mut hi = 1.0;
    while f(hi) > 0.0 {
        lo = hi;
        hi *= 2.0;
    }
    // ln P is smooth and nearly linear in v: secant with bisection safeguard
    let (mut flo, mut fhi) = (f(lo), f(hi));
    for _ in 0..200 {
        let mut m = lo - flo * (hi - lo) / (fhi - flo);
        if !(m > lo && m < hi) {
            m = 0.5 * (lo + hi);
        }
        let fm = f(m);
        if fm == 0.0 {
            return Ok(m);
        }
        if fm > 0.0 {
            lo = m;
            flo = fm;
        } else {
            hi = m;
            fhi = fm;
        }
        if hi - lo <= 1e-15 * hi.max(1.0) || fm.abs() < 1e-14 {
            return Ok(m);
        }
    }
    Ok(0.5 * (lo + hi))
}

/// Limit on the squared Mahalanobis distance of a mixand of weight `gamma`.
pub fn weighted_smd_limit(p_limit: f64, gamma: f64, p_b: &Matrix2<f64>, hbr: f64) -> RiskResult<f64> {
    invert_chan(p_limit / gamma, p_b, hbr)
}

/// Instantaneous probability: Gaussian density at the centre times the
/// volume of the hard-body sphere.
pub fn ipoc<N: Number>(dr: &[N; 3], p_inv: &Matrix3<N::Scalar>, det_p: N::Scalar, radius: N::Scalar) -> N
where
    N::Scalar: nalgebra::RealField,
{
    let mut d2 = dr[0].lift(N::Scalar::zero());
    for i in 0..3 {
        for j in 0..3 {
            d2 = d2 + (dr[i].clone() * dr[j].clone()).scale(p_inv[(i, j)]);
        }
    }
    let pi: N::Scalar = c(std::f64::consts::PI);
    let k = Float::sqrt(c::<N::Scalar>(2.0) / (pi * det_p)) * radius * radius * radius / c(3.0);
    (d2.scale(c(-0.5))).exp().scale(k)
}

/// [`ipoc`] for plain vectors, clamped to `[0, 1]`.
pub fn ipoc_f64(dr: &Vector3<f64>, p_rel: &Matrix3<f64>, radius: f64) -> RiskResult<f64> {
    if radius == 0.0 {
        return Ok(0.0);
    }
    let chol = p_rel.cholesky().ok_or(RiskError::NotPositiveDefinite)?;
    let inv = chol.inverse();
    let det = p_rel.determinant();
    Ok(ipoc(&[dr.x, dr.y, dr.z], &inv, det, radius).clamp(0.0, 1.0))
}

/// `1 − Π(1 − γ p)`.
pub fn total_poc<T: Float>(items: &[(T, T)]) -> T {
    let log_keep = items.iter().fold(T::zero(), |a, &(p, g)| a + (-(g * p)).ln_1p());
    -log_keep.exp_m1()
}

/// The limit `q` that closes `1 − (1 − q) Π(1 − p_j) = total`.
pub fn remaining_limit<T: Float>(total: T, others: &[T]) -> T {
    let log_keep = others.iter().fold(T::zero(), |a, &p| a + (-p).ln_1p());
    -((-total).ln_1p() - log_keep).exp_m1()
}

/// `Σ γ p`, the small-probability form of [`total_poc`].
pub fn total_poc_sum<T: Float>(items: &[(T, T)]) -> T {
    items.iter().fold(T::zero(), |a, &(p, g)| a + g * p)
}

/// Node-wise totals; `per_node[i]` holds `(ipoc, γ)` for every object at node `i`.
pub fn tipoc_profile<T: Float>(per_node: &[Vec<(T, T)>]) -> Vec<T> {
    per_node.iter().map(|items| total_poc(items)).collect()
}

/// Maps a B-plane point to the frame where the limit ellipse is the unit circle.
pub fn equivalent_bplane(w: &Vector2<f64>, p_b: &Matrix2<f64>, d2_limit: f64) -> Vector2<f64> {
    let e = SymmetricEigen::new(*p_b);
    let local = e.eigenvectors.transpose() * w;
    Vector2::new(
        local[0] / (d2_limit * e.eigenvalues[0]).sqrt(),
        local[1] / (d2_limit * e.eigenvalues[1]).sqrt(),
    )
}

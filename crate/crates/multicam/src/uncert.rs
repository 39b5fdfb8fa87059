//! Covariance propagation, nonlinearity indices and Gaussian-mixture splits.

use nalgebra::{DMatrix, DVector, Matrix6, Vector6};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::dajet::{self, DaError, Jet};
use crate::optim::NelderMead;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum UncertError {
    #[error("degenerate input: {0}")]
    Degenerate(&'static str),
    #[error("covariance is not positive definite")]
    NotPositiveDefinite,
    #[error("mixture size must be odd, got {0}")]
    EvenCount(usize),
    #[error("no split table for {0} components")]
    NoTable(usize),
    #[error("split table: {0}")]
    Parse(String),
    #[error(transparent)]
    Da(#[from] DaError),
}

pub type UncertResult<T> = Result<T, UncertError>;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum Frame {
    #[default]
    Eci,
    Rtn,
}

#[derive(Debug, Clone, PartialEq)]
pub struct GaussianState {
    pub mean: Vector6<f64>,
    pub cov: Matrix6<f64>,
    pub frame: Frame,
}

impl GaussianState {
    pub fn new(mean: Vector6<f64>, cov: Matrix6<f64>) -> Self {
        GaussianState { mean, cov, frame: Frame::Eci }
    }

    pub fn is_valid(&self) -> bool {
        let scale = self.cov.amax().max(f64::MIN_POSITIVE);
        if (self.cov - self.cov.transpose()).amax() > 1e-12 * scale {
            return false;
        }
        let eig = self.cov.symmetric_eigen();
        eig.eigenvalues.iter().all(|&l| l >= -1e-12 * scale)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Mixand {
    pub weight: f64,
    pub state: GaussianState,
    pub tca_offsets: Vec<f64>,
}

pub fn propagate_cov(p0: &Matrix6<f64>, a: &Matrix6<f64>) -> Matrix6<f64> {
    let p = a * p0 * a.transpose();
    (p + p.transpose()) * 0.5
}

/// Splitting direction from a nonlinearity vector and the covariance columns.
pub fn split_direction(p0: &Matrix6<f64>, nu: &Vector6<f64>) -> UncertResult<Vector6<f64>> {
    if nu.iter().any(|&v| v < 0.0 || !v.is_finite()) {
        return Err(UncertError::Degenerate("negative nonlinearity index"));
    }
    let phi = Vector6::from_fn(|k, _| p0.column(k).norm());
    let (nn, pn) = (nu.norm(), phi.norm());
    if nn == 0.0 || pn == 0.0 {
        return Err(UncertError::Degenerate("zero nonlinearity or covariance"));
    }
    let raw = nu.component_mul(&phi) / (nn * pn);
    let r = raw.norm();
    if r == 0.0 {
        return Err(UncertError::Degenerate("direction vanishes"));
    }
    Ok(raw / r)
}

/// Nonlinearity factors of a second-order map, one per independent variable.
pub fn nli_of_map(map: &[Jet<f64>]) -> UncertResult<Vec<f64>> {
    dajet::second_order_ratios(map).map_err(|e| match e {
        DaError::Domain(_) => UncertError::Degenerate("first-order part vanishes"),
        other => other.into(),
    })
}

/// Homoscedastic univariate split of the standard normal.
#[derive(Debug, Clone, PartialEq)]
pub struct SplitTable {
    /// `(weight, mean, sigma)` rows.
    pub rows: Vec<(f64, f64, f64)>,
}

const TABLE_3: &str = include_str!("../data/split_n3.txt");
const TABLE_5: &str = include_str!("../data/split_n5.txt");
const TABLE_7: &str = include_str!("../data/split_n7.txt");

impl SplitTable {
    pub fn builtin(n: usize) -> UncertResult<SplitTable> {
        match n {
            1 => Ok(SplitTable { rows: vec![(1.0, 0.0, 1.0)] }),
            3 => TABLE_3.parse(),
            5 => TABLE_5.parse(),
            7 => TABLE_7.parse(),
            n if n % 2 == 0 => Err(UncertError::EvenCount(n)),
            n => Err(UncertError::NoTable(n)),
        }
    }

    pub fn len(&self) -> usize {
        self.rows.len()
    }

    pub fn is_empty(&self) -> bool {
        self.rows.is_empty()
    }

    /// Mean and variance of the univariate mixture.
    pub fn moments(&self) -> (f64, f64) {
        let mean: f64 = self.rows.iter().map(|(g, m, _)| g * m).sum();
        let second: f64 = self.rows.iter().map(|(g, m, s)| g * (s * s + m * m)).sum();
        (mean, second - mean * mean)
    }
}

impl std::str::FromStr for SplitTable {
    type Err = UncertError;
    fn from_str(s: &str) -> UncertResult<SplitTable> {
        let mut lines = s.lines().map(str::trim).filter(|l| !l.is_empty() && !l.starts_with('#'));
        let n: usize = lines
            .next()
            .ok_or_else(|| UncertError::Parse("empty".into()))?
            .parse()
            .map_err(|e| UncertError::Parse(format!("count: {e}")))?;
        let mut rows = Vec::with_capacity(n);
        for l in lines {
            let v: Vec<f64> = l
                .split_whitespace()
                .map(|t| t.parse::<f64>().map_err(|e| UncertError::Parse(format!("'{t}': {e}"))))
                .collect::<UncertResult<_>>()?;
            if v.len() != 3 {
                return Err(UncertError::Parse(format!("expected 3 columns, got {}", v.len())));
            }
            rows.push((v[0], v[1], v[2]));
        }
        if rows.len() != n {
            return Err(UncertError::Parse(format!("expected {n} rows, got {}", rows.len())));
        }
        Ok(SplitTable { rows })
    }
}

impl std::fmt::Display for SplitTable {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        writeln!(f, "# weight mean sigma")?;
        writeln!(f, "{}", self.rows.len())?;
        for (g, m, s) in &self.rows {
            writeln!(f, "{g:.17e} {m:.17e} {s:.17e}")?;
        }
        Ok(())
    }
}

fn normal_pdf(x: f64, var: f64) -> f64 {
    (-x * x / (2.0 * var)).exp() / (2.0 * std::f64::consts::PI * var).sqrt()
}

/// Weights minimizing the L2 distance to N(0,1) for fixed spacing and sigma,
/// subject to unit mass and unit variance. Returns `(means, weights, distance²)`.
pub fn split_weights(n: usize, spacing: f64, sigma: f64) -> Option<(Vec<f64>, Vec<f64>, f64)> {
    let m: Vec<f64> = (0..n).map(|i| (i as f64 - (n as f64 - 1.0) / 2.0) * spacing).collect();
    let s2 = sigma * sigma;
    let mut k = DMatrix::zeros(n + 2, n + 2);
    let mut r = DVector::zeros(n + 2);
    for i in 0..n {
        for j in 0..n {
            k[(i, j)] = 2.0 * normal_pdf(m[i] - m[j], 2.0 * s2);
        }
        r[i] = 2.0 * normal_pdf(m[i], 1.0 + s2);
        k[(i, n)] = 1.0;
        k[(n, i)] = 1.0;
        k[(i, n + 1)] = m[i] * m[i];
        k[(n + 1, i)] = m[i] * m[i];
    }
    r[n] = 1.0;
    r[n + 1] = 1.0 - s2;
    let sol = k.lu().solve(&r)?;
    let w: Vec<f64> = sol.iter().take(n).copied().collect();
    let mut dist = normal_pdf(0.0, 2.0);
    for i in 0..n {
        dist -= 2.0 * w[i] * normal_pdf(m[i], 1.0 + s2);
        for j in 0..n {
            dist += w[i] * w[j] * normal_pdf(m[i] - m[j], 2.0 * s2);
        }
    }
    Some((m, w, dist))
}

const SIGMA_PENALTY: f64 = 1e-3;

/// Regenerates the split table for `n` components.
pub fn generate_split_table(n: usize) -> UncertResult<SplitTable> {
    if n.is_multiple_of(2) {
        return Err(UncertError::EvenCount(n));
    }
    if n == 1 {
        return SplitTable::builtin(1);
    }
    let cost = |p: &[f64]| -> f64 {
        let (d, s) = (p[0], p[1]);
        if d <= 0.0 || s <= 0.0 || s >= 1.0 {
            return 1e3;
        }
        match split_weights(n, d, s) {
            Some((_, w, j)) => j + SIGMA_PENALTY * s + 1e3 * w.iter().map(|&v| v.min(0.0).powi(2)).sum::<f64>(),
            None => 1e3,
        }
    };
    let nm = NelderMead { step: 0.05, x_tol: 1e-12, f_tol: 1e-16, max_iter: 5000 };
    let mut best: Option<crate::optim::Minimum> = None;
    for i in 0..6 {
        for j in 0..6 {
            let x0 = [0.3 + 0.3 * i as f64, 0.15 + 0.14 * j as f64];
            let m = nm.minimize(&x0, cost);
            if best.as_ref().is_none_or(|b| m.f < b.f) {
                best = Some(m);
            }
        }
    }
    let best = best.expect("non-empty start grid");
    let (d, s) = (best.x[0], best.x[1]);
    let (m, w, _) = split_weights(n, d, s).ok_or(UncertError::Degenerate("singular weight system"))?;
    // symmetric by construction; enforce it exactly
    let rows = (0..n)
        .map(|i| {
            let wi = 0.5 * (w[i] + w[n - 1 - i]);
            let mi = 0.5 * (m[i] - m[n - 1 - i]);
            (wi, mi, s)
        })
        .collect::<Vec<_>>();
    let total: f64 = rows.iter().map(|r| r.0).sum();
    Ok(SplitTable { rows: rows.into_iter().map(|(g, m, s)| (g / total, m, s)).collect() })
}

/// Splits `g` along `dir` into `n_mix` mixands.
pub fn gmm_split(g: &GaussianState, n_mix: usize, dir: &Vector6<f64>) -> UncertResult<Vec<Mixand>> {
    if n_mix.is_multiple_of(2) {
        return Err(UncertError::EvenCount(n_mix));
    }
    if n_mix == 1 {
        return Ok(vec![Mixand { weight: 1.0, state: g.clone(), tca_offsets: Vec::new() }]);
    }
    let table = SplitTable::builtin(n_mix)?;
    split_with_table(g, &table, dir)
}

pub fn split_with_table(g: &GaussianState, table: &SplitTable, dir: &Vector6<f64>) -> UncertResult<Vec<Mixand>> {
    let chol = g.cov.cholesky().ok_or(UncertError::NotPositiveDefinite)?;
    let s = chol.l();
    let a = chol.l().solve_lower_triangular(dir).ok_or(UncertError::NotPositiveDefinite)?;
    let an = a.norm();
    if an == 0.0 || !an.is_finite() {
        return Err(UncertError::Degenerate("zero split direction"));
    }
    let a = a / an;
    let sa = s * a;
    let aat = a * a.transpose();
    Ok(table
        .rows
        .iter()
        .map(|&(w, m, sig)| {
            let p = s * (Matrix6::identity() + aat * (sig * sig - 1.0)) * s.transpose();
            Mixand {
                weight: w,
                state: GaussianState {
                    mean: g.mean + sa * m,
                    cov: (p + p.transpose()) * 0.5,
                    frame: g.frame,
                },
                tca_offsets: Vec::new(),
            }
        })
        .collect())
}

/// Mean and covariance of a mixture.
pub fn mixture_moments(mix: &[Mixand]) -> (Vector6<f64>, Matrix6<f64>) {
    let mean: Vector6<f64> = mix.iter().map(|c| c.state.mean * c.weight).sum();
    let mut cov = Matrix6::zeros();
    for c in mix {
        cov += (c.state.cov + c.state.mean * c.state.mean.transpose()) * c.weight;
    }
    (mean, cov - mean * mean.transpose())
}

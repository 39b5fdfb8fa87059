//! Truncated multivariate Taylor polynomials ("jets").
//!
//! A jet of order `q` in `n` variables stores every coefficient of total
//! degree `<= q` densely. Monomials are graded: constant first, then the
//! `n` linear terms in variable order, then the quadratic terms, and so on.

use std::collections::HashMap;
use std::fmt::{self, Debug};
use std::ops::{Add, Div, Mul, Neg, Sub};
use std::sync::{Mutex, OnceLock};

use num_traits::Float;
use thiserror::Error;

use crate::scalar::{c, Number};

#[derive(Debug, Error, Clone, PartialEq)]
pub enum DaError {
    #[error("dimension mismatch: {0}")]
    Dimension(String),
    #[error("domain error: {0}")]
    Domain(&'static str),
    #[error("map is not invertible: {0}")]
    NonInvertible(String),
}

pub type DaResult<T> = Result<T, DaError>;

/// Monomial bookkeeping for one `(n, q)` pair. Built once and shared.
pub struct Layout {
    n: usize,
    order: u32,
    exps: Vec<Vec<u8>>,
    degree_start: Vec<usize>,
    index: HashMap<Vec<u8>, usize>,
    triples: Vec<(u32, u32, u32)>,
}

impl Debug for Layout {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "Layout(n={}, q={}, len={})", self.n, self.order, self.len())
    }
}

fn monomials_of_degree(n: usize, d: u32, out: &mut Vec<Vec<u8>>) {
    fn rec(n: usize, i: usize, left: u32, cur: &mut Vec<u8>, out: &mut Vec<Vec<u8>>) {
        if i == n - 1 {
            cur[i] = left as u8;
            out.push(cur.clone());
            cur[i] = 0;
            return;
        }
        for e in (0..=left).rev() {
            cur[i] = e as u8;
            rec(n, i + 1, left - e, cur, out);
        }
        cur[i] = 0;
    }
    if n == 0 {
        if d == 0 {
            out.push(Vec::new());
        }
        return;
    }
    let mut cur = vec![0u8; n];
    rec(n, 0, d, &mut cur, out);
}

impl Layout {
    fn build(n: usize, order: u32) -> Layout {
        let mut exps = Vec::new();
        let mut degree_start = Vec::with_capacity(order as usize + 2);
        for d in 0..=order {
            degree_start.push(exps.len());
            monomials_of_degree(n, d, &mut exps);
        }
        degree_start.push(exps.len());
        let index: HashMap<Vec<u8>, usize> =
            exps.iter().enumerate().map(|(i, e)| (e.clone(), i)).collect();
        let deg = |e: &[u8]| e.iter().map(|&x| x as u32).sum::<u32>();
        let mut triples = Vec::new();
        for (i, ei) in exps.iter().enumerate() {
            let di = deg(ei);
            for (j, ej) in exps.iter().enumerate() {
                if di + deg(ej) > order {
                    continue;
                }
                let sum: Vec<u8> = ei.iter().zip(ej).map(|(a, b)| a + b).collect();
                triples.push((i as u32, j as u32, index[&sum] as u32));
            }
        }
        Layout { n, order, exps, degree_start, index, triples }
    }

    /// Shared layout for `n` variables at order `order`.
    pub fn get(n: usize, order: u32) -> &'static Layout {
        static CACHE: OnceLock<Mutex<HashMap<(usize, u32), &'static Layout>>> = OnceLock::new();
        let cache = CACHE.get_or_init(|| Mutex::new(HashMap::new()));
        let mut map = cache.lock().expect("layout cache poisoned");
        map.entry((n, order))
            .or_insert_with(|| Box::leak(Box::new(Layout::build(n, order))))
    }

    pub fn n_vars(&self) -> usize {
        self.n
    }
    pub fn order(&self) -> u32 {
        self.order
    }
    pub fn len(&self) -> usize {
        self.exps.len()
    }
    pub fn is_empty(&self) -> bool {
        self.exps.is_empty()
    }
    pub fn exponents(&self, k: usize) -> &[u8] {
        &self.exps[k]
    }
    pub fn degree(&self, k: usize) -> u32 {
        self.exps[k].iter().map(|&x| x as u32).sum()
    }
    /// Index range of the monomials of total degree `d`.
    pub fn degree_range(&self, d: u32) -> std::ops::Range<usize> {
        if d > self.order {
            return self.len()..self.len();
        }
        self.degree_start[d as usize]..self.degree_start[d as usize + 1]
    }
    pub fn index_of(&self, exps: &[u8]) -> Option<usize> {
        self.index.get(exps).copied()
    }
}

#[derive(Clone)]
pub struct Jet<T> {
    layout: &'static Layout,
    coeffs: Vec<T>,
}

impl<T: PartialEq> PartialEq for Jet<T> {
    fn eq(&self, o: &Self) -> bool {
        std::ptr::eq(self.layout, o.layout) && self.coeffs == o.coeffs
    }
}

impl<T: Debug> Debug for Jet<T> {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "Jet(n={}, q={}, {:?})", self.layout.n, self.layout.order, self.coeffs)
    }
}

fn same_space<T>(a: &Jet<T>, b: &Jet<T>) -> DaResult<()> {
    if std::ptr::eq(a.layout, b.layout) {
        Ok(())
    } else {
        Err(DaError::Dimension(format!(
            "(n={}, q={}) vs (n={}, q={})",
            a.layout.n, a.layout.order, b.layout.n, b.layout.order
        )))
    }
}

impl<T: Float> Jet<T> {
    pub fn constant(n: usize, order: u32, v: T) -> Self {
        let layout = Layout::get(n, order);
        let mut coeffs = vec![T::zero(); layout.len()];
        coeffs[0] = v;
        Jet { layout, coeffs }
    }

    /// `v + δx_i`.
    pub fn var(n: usize, order: u32, i: usize, v: T) -> Self {
        assert!(i < n, "variable index {i} out of range for n={n}");
        let mut j = Self::constant(n, order, v);
        if order >= 1 {
            j.coeffs[1 + i] = T::one();
        }
        j
    }

    pub fn from_coeffs(n: usize, order: u32, coeffs: Vec<T>) -> DaResult<Self> {
        let layout = Layout::get(n, order);
        if coeffs.len() != layout.len() {
            return Err(DaError::Dimension(format!(
                "expected {} coefficients, got {}",
                layout.len(),
                coeffs.len()
            )));
        }
        Ok(Jet { layout, coeffs })
    }

    pub fn constant_like(&self, v: T) -> Self {
        let mut coeffs = vec![T::zero(); self.layout.len()];
        coeffs[0] = v;
        Jet { layout: self.layout, coeffs }
    }

    pub fn layout(&self) -> &'static Layout {
        self.layout
    }
    pub fn n_vars(&self) -> usize {
        self.layout.n
    }
    pub fn order(&self) -> u32 {
        self.layout.order
    }
    pub fn coeffs(&self) -> &[T] {
        &self.coeffs
    }
    pub fn coeffs_mut(&mut self) -> &mut [T] {
        &mut self.coeffs
    }
    pub fn value(&self) -> T {
        self.coeffs[0]
    }

    /// Coefficient of the monomial with the given exponents (zero if absent).
    pub fn coeff(&self, exps: &[u8]) -> T {
        self.layout.index_of(exps).map_or(T::zero(), |k| self.coeffs[k])
    }

    /// First-order coefficients, one per variable.
    pub fn gradient(&self) -> Vec<T> {
        self.coeffs[self.layout.degree_range(1)].to_vec()
    }

    /// Second derivatives at the expansion point.
    pub fn hessian(&self) -> Vec<Vec<T>> {
        let n = self.layout.n;
        let mut h = vec![vec![T::zero(); n]; n];
        for k in self.layout.degree_range(2) {
            let e = &self.layout.exps[k];
            let idx: Vec<usize> = (0..n).filter(|&i| e[i] > 0).collect();
            if idx.len() == 1 {
                h[idx[0]][idx[0]] = self.coeffs[k] + self.coeffs[k];
            } else {
                h[idx[0]][idx[1]] = self.coeffs[k];
                h[idx[1]][idx[0]] = self.coeffs[k];
            }
        }
        h
    }

    /// Jet without its constant part.
    pub fn nilpotent(&self) -> Self {
        let mut out = self.clone();
        out.coeffs[0] = T::zero();
        out
    }

    /// Drops every term above degree `d`.
    pub fn truncated(&self, d: u32) -> Self {
        let mut out = self.clone();
        for k in self.layout.degree_range(d + 1).start..self.layout.len() {
            out.coeffs[k] = T::zero();
        }
        out
    }

    pub fn try_add(&self, o: &Self) -> DaResult<Self> {
        same_space(self, o)?;
        let coeffs = self.coeffs.iter().zip(&o.coeffs).map(|(&a, &b)| a + b).collect();
        Ok(Jet { layout: self.layout, coeffs })
    }

    pub fn try_sub(&self, o: &Self) -> DaResult<Self> {
        same_space(self, o)?;
        let coeffs = self.coeffs.iter().zip(&o.coeffs).map(|(&a, &b)| a - b).collect();
        Ok(Jet { layout: self.layout, coeffs })
    }

    pub fn try_mul(&self, o: &Self) -> DaResult<Self> {
        same_space(self, o)?;
        let mut coeffs = vec![T::zero(); self.layout.len()];
        for &(i, j, k) in &self.layout.triples {
            coeffs[k as usize] = coeffs[k as usize] + self.coeffs[i as usize] * o.coeffs[j as usize];
        }
        Ok(Jet { layout: self.layout, coeffs })
    }

    pub fn scale_by(&self, k: T) -> Self {
        Jet { layout: self.layout, coeffs: self.coeffs.iter().map(|&a| a * k).collect() }
    }

    /// `Σ_k series[k] · (self − value)^k` by Horner's rule.
    fn compose_series(&self, series: &[T]) -> Self {
        let delta = self.nilpotent();
        let mut acc = self.constant_like(*series.last().expect("non-empty series"));
        for &ck in series.iter().rev().skip(1) {
            acc = acc.try_mul(&delta).expect("same layout");
            acc.coeffs[0] = acc.coeffs[0] + ck;
        }
        acc
    }

    fn terms(&self) -> usize {
        self.layout.order as usize + 1
    }

    pub fn try_recip(&self) -> DaResult<Self> {
        let a0 = self.value();
        if a0 == T::zero() || !a0.is_finite() {
            return Err(DaError::Domain("reciprocal of a jet with zero constant part"));
        }
        let r = a0.recip();
        let mut s = Vec::with_capacity(self.terms());
        let mut t = r;
        for _ in 0..self.terms() {
            s.push(t);
            t = -t * r;
        }
        Ok(self.compose_series(&s))
    }

    pub fn try_pow(&self, p: T) -> DaResult<Self> {
        let a0 = self.value();
        if a0 <= T::zero() {
            return Err(DaError::Domain("power of a jet with non-positive constant part"));
        }
        let mut s = Vec::with_capacity(self.terms());
        let mut binom = T::one();
        let base = a0.powf(p);
        let mut apow = T::one();
        for k in 0..self.terms() {
            s.push(binom * base * apow);
            let kk: T = c(k as f64);
            binom = binom * (p - kk) / (kk + T::one());
            apow = apow / a0;
        }
        Ok(self.compose_series(&s))
    }

    pub fn try_sqrt(&self) -> DaResult<Self> {
        if self.value() <= T::zero() {
            if self.value() == T::zero() && self.layout.order == 0 {
                return Ok(self.clone());
            }
            return Err(DaError::Domain("square root of a jet with non-positive constant part"));
        }
        self.try_pow(c(0.5))
    }

    pub fn try_ln(&self) -> DaResult<Self> {
        let a0 = self.value();
        if a0 <= T::zero() {
            return Err(DaError::Domain("logarithm of a jet with non-positive constant part"));
        }
        let mut s = vec![a0.ln()];
        let mut t = a0.recip();
        for k in 1..self.terms() {
            s.push(t / c(k as f64));
            t = -t / a0;
        }
        Ok(self.compose_series(&s))
    }

    fn exp_series(&self) -> Self {
        let e = self.value().exp();
        let mut s = Vec::with_capacity(self.terms());
        let mut fact = T::one();
        for k in 0..self.terms() {
            if k > 0 {
                fact = fact * c(k as f64);
            }
            s.push(e / fact);
        }
        self.compose_series(&s)
    }

    fn trig(&self, phase: usize) -> Self {
        let (sn, cs) = self.value().sin_cos();
        let cycle = [sn, cs, -sn, -cs];
        let mut s = Vec::with_capacity(self.terms());
        let mut fact = T::one();
        for k in 0..self.terms() {
            if k > 0 {
                fact = fact * c(k as f64);
            }
            s.push(cycle[(k + phase) % 4] / fact);
        }
        self.compose_series(&s)
    }


    /// Evaluates the polynomial at the perturbation `delta`.
    pub fn eval(&self, delta: &[T]) -> DaResult<T> {
        if delta.len() != self.layout.n {
            return Err(DaError::Dimension(format!(
                "expected {} perturbation components, got {}",
                self.layout.n,
                delta.len()
            )));
        }
        let mut sum = T::zero();
        for (k, e) in self.layout.exps.iter().enumerate() {
            if self.coeffs[k] == T::zero() {
                continue;
            }
            let mut m = self.coeffs[k];
            for (i, &p) in e.iter().enumerate() {
                if p > 0 {
                    m = m * delta[i].powi(p as i32);
                }
            }
            sum = sum + m;
        }
        Ok(sum)
    }

    /// Substitutes variable `i` with `args[i]` (truncated polynomial composition).
    pub fn compose(&self, args: &[Jet<T>]) -> DaResult<Jet<T>> {
        if args.len() != self.layout.n {
            return Err(DaError::Dimension(format!(
                "expected {} arguments, got {}",
                self.layout.n,
                args.len()
            )));
        }
        let Some(first) = args.first() else {
            return Ok(self.clone());
        };
        for a in args {
            same_space(first, a)?;
        }
        let q = self.layout.order as usize;
        // powers[i][p] = args[i]^p
        let mut powers: Vec<Vec<Jet<T>>> = Vec::with_capacity(args.len());
        for a in args {
            let mut pw = vec![a.constant_like(T::one())];
            for p in 1..=q {
                let next = pw[p - 1].try_mul(a)?;
                pw.push(next);
            }
            powers.push(pw);
        }
        let mut out = first.constant_like(T::zero());
        for (k, e) in self.layout.exps.iter().enumerate() {
            if self.coeffs[k] == T::zero() {
                continue;
            }
            let mut term = first.constant_like(self.coeffs[k]);
            for (i, &p) in e.iter().enumerate() {
                if p > 0 {
                    term = term.try_mul(&powers[i][p as usize])?;
                }
            }
            out = out.try_add(&term)?;
        }
        Ok(out)
    }
}

fn invert_matrix<T: Float>(m: &[Vec<T>]) -> Option<Vec<Vec<T>>> {
    let n = m.len();
    let mut a: Vec<Vec<T>> = m.to_vec();
    let mut inv: Vec<Vec<T>> =
        (0..n).map(|i| (0..n).map(|j| if i == j { T::one() } else { T::zero() }).collect()).collect();
    let scale = m
        .iter()
        .flat_map(|r| r.iter())
        .fold(T::zero(), |acc, &x| acc.max(x.abs()));
    let tiny = scale * T::epsilon() * c(16.0);
    for col in 0..n {
        let piv = (col..n).max_by(|&i, &j| a[i][col].abs().partial_cmp(&a[j][col].abs()).unwrap())?;
        if a[piv][col].abs() <= tiny {
            return None;
        }
        a.swap(col, piv);
        inv.swap(col, piv);
        let d = a[col][col];
        for j in 0..n {
            a[col][j] = a[col][j] / d;
            inv[col][j] = inv[col][j] / d;
        }
        for i in 0..n {
            if i != col {
                let f = a[i][col];
                if f != T::zero() {
                    for j in 0..n {
                        a[i][j] = a[i][j] - f * a[col][j];
                        inv[i][j] = inv[i][j] - f * inv[col][j];
                    }
                }
            }
        }
    }
    Some(inv)
}

/// Inverts a square map of jets, ignoring constant parts.
///
/// Returns `M⁻¹` such that `M(M⁻¹(y)) = y` up to the truncation order, where
/// `M` is the map of deviations from its constant part.
pub fn invert_map<T: Float>(map: &[Jet<T>]) -> DaResult<Vec<Jet<T>>> {
    let n = map.len();
    let Some(first) = map.first() else {
        return Ok(Vec::new());
    };
    for m in map {
        same_space(first, m)?;
    }
    if first.n_vars() != n {
        return Err(DaError::Dimension(format!("map has {n} components over {} variables", first.n_vars())));
    }
    let q = first.order();
    let lin: Vec<Vec<T>> = map.iter().map(|m| m.gradient()).collect();
    let linv = invert_matrix(&lin).ok_or_else(|| DaError::NonInvertible("singular linear part".into()))?;
    let nonlin: Vec<Jet<T>> = map
        .iter()
        .map(|m| {
            let mut r = m.nilpotent();
            for k in r.layout.degree_range(1) {
                r.coeffs[k] = T::zero();
            }
            r
        })
        .collect();
    let ids: Vec<Jet<T>> = (0..n).map(|i| Jet::var(n, q, i, T::zero())).collect();
    let apply_linv = |v: &[Jet<T>]| -> DaResult<Vec<Jet<T>>> {
        (0..n)
            .map(|i| {
                let mut acc = v[0].constant_like(T::zero());
                for j in 0..n {
                    if linv[i][j] != T::zero() {
                        acc = acc.try_add(&v[j].scale_by(linv[i][j]))?;
                    }
                }
                Ok(acc)
            })
            .collect()
    };
    let mut inv = apply_linv(&ids)?;
    for _ in 1..q.max(1) {
        let rhs: Vec<Jet<T>> = ids
            .iter()
            .zip(&nonlin)
            .map(|(id, nl)| id.try_sub(&nl.compose(&inv)?))
            .collect::<DaResult<_>>()?;
        inv = apply_linv(&rhs)?;
    }
    Ok(inv)
}

/// Solves `g(δt, δx) = g0 + δg` for `δt` as a jet in `(δg, δx)`.
///
/// The returned jet lives in the same space as `g`; its variable
/// `target_var` stands for the deviation `δg` of `g` from its constant part,
/// the remaining variables keep their meaning.
pub fn partial_invert<T: Float>(g: &Jet<T>, target_var: usize) -> DaResult<Jet<T>> {
    let n = g.n_vars();
    if target_var >= n {
        return Err(DaError::Dimension(format!("target variable {target_var} out of range")));
    }
    if g.order() == 0 || g.gradient()[target_var] == T::zero() {
        return Err(DaError::NonInvertible(format!(
            "no first-order dependence on variable {target_var}"
        )));
    }
    let q = g.order();
    let map: Vec<Jet<T>> = (0..n)
        .map(|i| if i == target_var { g.clone() } else { Jet::var(n, q, i, T::zero()) })
        .collect();
    let inv = invert_map(&map)?;
    Ok(inv[target_var].clone())
}

macro_rules! jet_binop {
    ($tr:ident, $m:ident, $try:ident) => {
        impl<T: Float> $tr for Jet<T> {
            type Output = Jet<T>;
            fn $m(self, o: Jet<T>) -> Jet<T> {
                self.$try(&o).expect("jet operands must share variables and order")
            }
        }
        impl<'a, T: Float> $tr<&'a Jet<T>> for &'a Jet<T> {
            type Output = Jet<T>;
            fn $m(self, o: &'a Jet<T>) -> Jet<T> {
                self.$try(o).expect("jet operands must share variables and order")
            }
        }
    };
}

/// Per-variable ratio of second-order coefficient norm to first-order norm.
///
/// Entry `j` collects every degree-2 coefficient whose monomial contains
/// variable `j`, across all components, and divides its 2-norm by the
/// Frobenius norm of the Jacobian.
pub fn second_order_ratios<T: Float>(map: &[Jet<T>]) -> DaResult<Vec<T>> {
    let first = map.first().ok_or_else(|| DaError::Dimension("empty map".into()))?;
    let layout = first.layout;
    if layout.order < 2 {
        return Err(DaError::Dimension("map order below 2".into()));
    }
    let n = layout.n;
    let mut lin = T::zero();
    let mut acc = vec![T::zero(); n];
    for f in map {
        if !std::ptr::eq(f.layout, layout) {
            return Err(DaError::Dimension("mixed layouts".into()));
        }
        for k in layout.degree_range(1) {
            lin = lin + f.coeffs[k] * f.coeffs[k];
        }
        for k in layout.degree_range(2) {
            let a2 = f.coeffs[k] * f.coeffs[k];
            for (j, &e) in layout.exps[k].iter().enumerate() {
                if e > 0 {
                    acc[j] = acc[j] + a2;
                }
            }
        }
    }
    if lin == T::zero() {
        return Err(DaError::Domain("first-order part vanishes"));
    }
    let lin = lin.sqrt();
    Ok(acc.into_iter().map(|a| a.sqrt() / lin).collect())
}

jet_binop!(Add, add, try_add);
jet_binop!(Sub, sub, try_sub);
jet_binop!(Mul, mul, try_mul);

impl<T: Float> Div for Jet<T> {
    type Output = Jet<T>;
    fn div(self, o: Jet<T>) -> Jet<T> {
        let r = o.try_recip().unwrap_or_else(|_| o.constant_like(T::nan()).scale_by(T::nan()));
        self * r
    }
}

impl<T: Float> Neg for Jet<T> {
    type Output = Jet<T>;
    fn neg(self) -> Jet<T> {
        self.scale_by(-T::one())
    }
}

fn nan_like<T: Float>(j: &Jet<T>) -> Jet<T> {
    j.scale_by(T::nan())
}

impl<T: Float + Debug + Send + Sync + 'static> Number for Jet<T> {
    type Scalar = T;
    fn value(&self) -> T {
        self.coeffs[0]
    }
    fn lift(&self, v: T) -> Self {
        self.constant_like(v)
    }
    fn scale(self, k: T) -> Self {
        self.scale_by(k)
    }
    fn shift(mut self, k: T) -> Self {
        self.coeffs[0] = self.coeffs[0] + k;
        self
    }
    fn sqrt(self) -> Self {
        self.try_sqrt().unwrap_or_else(|_| nan_like(&self))
    }
    fn recip(self) -> Self {
        self.try_recip().unwrap_or_else(|_| nan_like(&self))
    }
    fn exp(self) -> Self {
        self.exp_series()
    }
    fn ln(self) -> Self {
        self.try_ln().unwrap_or_else(|_| nan_like(&self))
    }
    fn sin(self) -> Self {
        self.trig(0)
    }
    fn cos(self) -> Self {
        self.trig(1)
    }
    fn powf(self, p: T) -> Self {
        self.try_pow(p).unwrap_or_else(|_| nan_like(&self))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::scalar::Number;
    use approx::assert_abs_diff_eq;

    fn x1(q: u32, v: f64) -> Jet<f64> {
        Jet::var(1, q, 0, v)
    }

    #[test]
    fn layout_counts() {
        assert_eq!(Layout::get(9, 2).len(), 55);
        assert_eq!(Layout::get(6, 1).len(), 7);
        assert_eq!(Layout::get(2, 3).len(), 10);
        assert_eq!(Layout::get(3, 2).degree_range(2), 4..10);
    }

    #[test]
    fn square_of_one_plus_x() {
        let a = x1(2, 1.0);
        let p = &a * &a;
        assert_eq!(p.coeffs(), &[1.0, 2.0, 1.0]);
    }

    #[test]
    fn product_truncates() {
        let a = Jet::from_coeffs(1, 2, vec![1.0, 1.0, 1.0]).unwrap();
        let b = x1(2, 1.0);
        assert_eq!((&a * &b).coeffs(), &[1.0, 2.0, 2.0]);
    }

    #[test]
    fn exp_and_sqrt_series() {
        let e = x1(2, 0.0).exp();
        assert_abs_diff_eq!(e.coeffs()[..], [1.0, 1.0, 0.5][..], epsilon = 1e-15);
        let s = x1(2, 4.0).try_sqrt().unwrap();
        assert_abs_diff_eq!(s.coeffs()[..], [2.0, 0.25, -1.0 / 64.0][..], epsilon = 1e-15);
    }

    #[test]
    fn sin_cos_ln_recip_series() {
        let x = x1(3, 0.3);
        let s = x.clone().sin();
        let (sn, cs) = 0.3f64.sin_cos();
        assert_abs_diff_eq!(s.coeffs()[..], [sn, cs, -sn / 2.0, -cs / 6.0][..], epsilon = 1e-15);
        let l = x.try_ln().unwrap();
        let r = 1.0 / 0.3;
        assert_abs_diff_eq!(l.coeffs()[..], [0.3f64.ln(), r, -r * r / 2.0, r * r * r / 3.0][..], epsilon = 1e-12);
        let inv = x.try_recip().unwrap();
        assert_abs_diff_eq!(inv.coeffs()[..], [r, -r * r, r * r * r, -r * r * r * r][..], epsilon = 1e-10);
    }

    #[test]
    fn domain_errors() {
        assert!(matches!(x1(2, 0.0).try_recip(), Err(DaError::Domain(_))));
        assert!(matches!(x1(2, -1.0).try_sqrt(), Err(DaError::Domain(_))));
        assert!(matches!(x1(2, 0.0).try_ln(), Err(DaError::Domain(_))));
    }

    #[test]
    fn mismatched_operands() {
        let a = Jet::var(2, 2, 0, 1.0);
        let b = Jet::var(3, 2, 0, 1.0);
        assert!(matches!(a.try_add(&b), Err(DaError::Dimension(_))));
        let c = Jet::var(2, 1, 0, 1.0);
        assert!(matches!(a.try_mul(&c), Err(DaError::Dimension(_))));
    }

    #[test]
    fn evaluation() {
        let p = Jet::from_coeffs(1, 2, vec![1.0, 2.0, 1.0]).unwrap();
        assert_eq!(p.eval(&[1.0]).unwrap(), 4.0);
        assert_eq!(p.eval(&[0.0]).unwrap(), 1.0);
        assert!(matches!(p.eval(&[1.0, 2.0]), Err(DaError::Dimension(_))));
    }

    #[test]
    fn eval_error_scales_with_order() {
        // sin about 0.7: truncation error of the order-q jet behaves like h^{q+1}
        for q in 1..=3u32 {
            let s = x1(q, 0.7).sin();
            let e1 = (s.eval(&[1e-2]).unwrap() - (0.7f64 + 1e-2).sin()).abs();
            let e2 = (s.eval(&[5e-3]).unwrap() - (0.7f64 + 5e-3).sin()).abs();
            let rate = (e1 / e2).log2();
            assert!((rate - (q as f64 + 1.0)).abs() < 0.1, "q={q} rate={rate}");
        }
    }

    #[test]
    fn linear_inversions() {
        let g = Jet::var(1, 1, 0, 0.0).scale_by(2.0);
        let t = partial_invert(&g, 0).unwrap();
        assert_abs_diff_eq!(t.gradient()[0], 0.5);

        let g = Jet::var(2, 1, 0, 0.0) + Jet::var(2, 1, 1, 0.0);
        let t = partial_invert(&g, 0).unwrap();
        assert_abs_diff_eq!(t.gradient()[..], [1.0, -1.0][..]);
    }

    #[test]
    fn quadratic_partial_inversion() {
        // g = δt + δt·δx  →  δt = g − g·δx
        let dt = Jet::var(2, 2, 0, 0.0);
        let dx = Jet::var(2, 2, 1, 0.0);
        let g = &dt + &(&dt * &dx);
        let t = partial_invert(&g, 0).unwrap();
        assert_abs_diff_eq!(t.coeff(&[1, 0]), 1.0);
        assert_abs_diff_eq!(t.coeff(&[1, 1]), -1.0);
        assert_abs_diff_eq!(t.coeff(&[2, 0]), 0.0);
        assert_abs_diff_eq!(t.coeff(&[0, 1]), 0.0);
        // g(t(y, δx), δx) = y
        let back = g.compose(&[t, dx.clone()]).unwrap();
        assert_abs_diff_eq!(back.coeffs()[..], dt.coeffs()[..], epsilon = 1e-14);
    }

    #[test]
    fn non_invertible() {
        let dx = Jet::var(2, 2, 1, 0.0);
        assert!(matches!(partial_invert(&dx, 0), Err(DaError::NonInvertible(_))));
    }

    #[test]
    fn hessian_convention() {
        // f = x + x² + 3xy
        let x = Jet::var(2, 2, 0, 0.0);
        let y = Jet::var(2, 2, 1, 0.0);
        let f = &(&x + &(&x * &x)) + &(&x * &y).scale_by(3.0);
        let h = f.hessian();
        assert_eq!(h, vec![vec![2.0, 3.0], vec![3.0, 0.0]]);
    }

    #[test]
    fn generic_over_f32() {
        let a = Jet::<f32>::var(1, 2, 0, 4.0);
        let s = a.try_sqrt().unwrap();
        assert!((s.coeffs()[2] + 1.0 / 64.0).abs() < 1e-7);
    }
}

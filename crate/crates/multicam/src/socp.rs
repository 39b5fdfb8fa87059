//! Primal-dual interior-point solver for second-order cone programs.
//!
//! Standard form:
//!
//! ```text
//! minimize    cᵀx
//! subject to  A x = b
//!             G x + s = h,   s ∈ K
//! ```
//!
//! where `K` is a nonnegative orthant followed by second-order cones
//! `{(t, v) : ‖v‖ ≤ t}`. Iterates live on the homogeneous self-dual embedding
//! with Nesterov–Todd scaling and a Mehrotra predictor-corrector step.

use std::fmt::Write as _;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::sparse::{rcm_order, Csc, Ldl};

#[derive(Debug, Clone, PartialEq, Eq, Default, Serialize, Deserialize)]
pub struct Cones {
    pub nonneg: usize,
    pub soc: Vec<usize>,
}

impl Cones {
    pub fn dim(&self) -> usize {
        self.nonneg + self.soc.iter().sum::<usize>()
    }

    pub fn degree(&self) -> usize {
        self.nonneg + self.soc.len()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Problem {
    pub c: Vec<f64>,
    pub a: Csc,
    pub b: Vec<f64>,
    pub g: Csc,
    pub h: Vec<f64>,
    pub cones: Cones,
}

#[derive(Debug, Error, Clone, PartialEq)]
pub enum SocpError {
    #[error("dimension mismatch: {0}")]
    Dimension(String),
    #[error("dump format: {0}")]
    Format(String),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Status {
    Optimal,
    Infeasible,
    Unbounded,
    MaxIter,
    NumericalFailure,
    /// Stalled, but an earlier iterate met the loosened tolerances.
    AlmostOptimal,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Settings {
    pub feas_tol: f64,
    pub abs_gap_tol: f64,
    pub rel_gap_tol: f64,
    pub max_iter: usize,
    pub static_reg: f64,
    pub dynamic_reg: f64,
    pub refine_steps: usize,
    /// Loosening factor for [`Status::AlmostOptimal`].
    #[serde(default = "default_reduced")]
    pub reduced_factor: f64,
}

fn default_reduced() -> f64 {
    1e3
}

impl Default for Settings {
    fn default() -> Self {
        Settings {
            feas_tol: 1e-9,
            abs_gap_tol: 1e-9,
            rel_gap_tol: 1e-9,
            max_iter: 200,
            static_reg: 1e-8,
            dynamic_reg: 1e-7,
            refine_steps: 8,
            reduced_factor: default_reduced(),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Solution {
    pub status: Status,
    pub x: Vec<f64>,
    pub y: Vec<f64>,
    pub z: Vec<f64>,
    pub s: Vec<f64>,
    pub obj: f64,
    pub iterations: usize,
    pub primal_residual: f64,
    pub dual_residual: f64,
    pub gap: f64,
}

impl Problem {
    pub fn n(&self) -> usize {
        self.c.len()
    }

    pub fn check(&self) -> Result<(), SocpError> {
        let n = self.n();
        let err = |m: String| Err(SocpError::Dimension(m));
        if self.a.ncols != n || self.g.ncols != n {
            return err(format!("A has {} and G has {} columns, c has {n}", self.a.ncols, self.g.ncols));
        }
        if self.a.nrows != self.b.len() {
            return err(format!("A has {} rows, b has {}", self.a.nrows, self.b.len()));
        }
        if self.g.nrows != self.h.len() {
            return err(format!("G has {} rows, h has {}", self.g.nrows, self.h.len()));
        }
        if self.cones.dim() != self.h.len() {
            return err(format!("cones span {} rows, h has {}", self.cones.dim(), self.h.len()));
        }
        if self.cones.soc.contains(&0) {
            return err("empty second-order cone".into());
        }
        Ok(())
    }

    /// Plain-text dump, read back by [`Problem::from_dump`].
    pub fn to_dump(&self) -> String {
        let mut o = String::new();
        let vec = |o: &mut String, tag: &str, v: &[f64]| {
            let _ = write!(o, "{tag}");
            for x in v {
                let _ = write!(o, " {x:e}");
            }
            o.push('\n');
        };
        let _ = writeln!(o, "socp 1");
        let _ = writeln!(o, "dims {} {} {}", self.n(), self.b.len(), self.h.len());
        let _ = write!(o, "cones {}", self.cones.nonneg);
        for q in &self.cones.soc {
            let _ = write!(o, " {q}");
        }
        o.push('\n');
        vec(&mut o, "c", &self.c);
        vec(&mut o, "b", &self.b);
        vec(&mut o, "h", &self.h);
        for (tag, m) in [("A", &self.a), ("G", &self.g)] {
            let _ = writeln!(o, "{tag} {}", m.nnz());
            for (r, c, v) in m.triplets() {
                let _ = writeln!(o, "{r} {c} {v:e}");
            }
        }
        o
    }

    pub fn from_dump(text: &str) -> Result<Problem, SocpError> {
        let bad = |m: &str| SocpError::Format(m.to_string());
        let mut lines = text.lines().map(str::trim).filter(|l| !l.is_empty() && !l.starts_with('#'));
        let mut next = |what: &str| lines.next().ok_or_else(|| bad(&format!("missing {what}")));
        let words = |l: &str, tag: &str| -> Result<Vec<String>, SocpError> {
            let mut it = l.split_whitespace();
            if it.next() != Some(tag) {
                return Err(SocpError::Format(format!("expected '{tag}' line, got '{l}'")));
            }
            Ok(it.map(str::to_string).collect())
        };
        let num = |s: &str| s.parse::<f64>().map_err(|e| SocpError::Format(format!("'{s}': {e}")));
        let int = |s: &str| s.parse::<usize>().map_err(|e| SocpError::Format(format!("'{s}': {e}")));

        let head = words(next("header")?, "socp")?;
        if head != ["1"] {
            return Err(bad("unsupported version"));
        }
        let d = words(next("dims")?, "dims")?;
        if d.len() != 3 {
            return Err(bad("dims needs three entries"));
        }
        let (n, p, m) = (int(&d[0])?, int(&d[1])?, int(&d[2])?);
        let cw = words(next("cones")?, "cones")?;
        let cw: Vec<usize> = cw.iter().map(|s| int(s)).collect::<Result<_, _>>()?;
        let cones = Cones { nonneg: *cw.first().ok_or_else(|| bad("empty cones line"))?, soc: cw[1..].to_vec() };
        let mut vecline = |tag: &str, len: usize| -> Result<Vec<f64>, SocpError> {
            let v: Vec<f64> = words(next(tag)?, tag)?.iter().map(|s| num(s)).collect::<Result<_, _>>()?;
            if v.len() != len {
                return Err(SocpError::Format(format!("{tag} has {} entries, expected {len}", v.len())));
            }
            Ok(v)
        };
        let c = vecline("c", n)?;
        let b = vecline("b", p)?;
        let h = vecline("h", m)?;
        let mut mats = Vec::new();
        for (tag, rows) in [("A", p), ("G", m)] {
            let w = words(next(tag)?, tag)?;
            let nnz = int(w.first().ok_or_else(|| bad("missing nnz"))?)?;
            let mut t = Vec::with_capacity(nnz);
            for _ in 0..nnz {
                let e: Vec<&str> = next("entry")?.split_whitespace().collect();
                if e.len() != 3 {
                    return Err(bad("matrix entry needs three fields"));
                }
                let (r, cc, v) = (int(e[0])?, int(e[1])?, num(e[2])?);
                if r >= rows || cc >= n {
                    return Err(bad("matrix entry out of range"));
                }
                t.push((r, cc, v));
            }
            mats.push(Csc::from_triplets(rows, n, &t));
        }
        let g = mats.pop().unwrap();
        let a = mats.pop().unwrap();
        let prob = Problem { c, a, b, g, h, cones };
        prob.check()?;
        Ok(prob)
    }
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

fn norm(a: &[f64]) -> f64 {
    dot(a, a).sqrt()
}

fn axpy(alpha: f64, x: &[f64], y: &mut [f64]) {
    for (yi, xi) in y.iter_mut().zip(x) {
        *yi += alpha * xi;
    }
}

/// Nesterov–Todd scaling for one second-order cone.
#[derive(Debug, Clone)]
struct SocScaling {
    eta: f64,
    w: Vec<f64>,
}

impl SocScaling {
    fn identity(q: usize) -> Self {
        let mut w = vec![0.0; q];
        w[0] = 1.0;
        SocScaling { eta: 1.0, w }
    }

    fn apply(&self, v: &[f64], out: &mut [f64], inverse: bool) {
        let w0 = self.w[0];
        let w1 = &self.w[1..];
        let v1 = &v[1..];
        let wv = dot(w1, v1);
        let k = wv / (1.0 + w0);
        if !inverse {
            out[0] = self.eta * (w0 * v[0] + wv);
            for i in 0..w1.len() {
                out[i + 1] = self.eta * (v[0] * w1[i] + v1[i] + k * w1[i]);
            }
        } else {
            out[0] = (w0 * v[0] - wv) / self.eta;
            for i in 0..w1.len() {
                out[i + 1] = (-v[0] * w1[i] + v1[i] + k * w1[i]) / self.eta;
            }
        }
    }

    /// Dense `W²` as row-major `q × q`.
    fn squared(&self) -> Vec<f64> {
        let q = self.w.len();
        let mut wm = vec![0.0; q * q];
        let mut e = vec![0.0; q];
        let mut col = vec![0.0; q];
        for j in 0..q {
            e.iter_mut().for_each(|v| *v = 0.0);
            e[j] = 1.0;
            self.apply(&e, &mut col, false);
            for i in 0..q {
                wm[i * q + j] = col[i];
            }
        }
        let mut out = vec![0.0; q * q];
        for i in 0..q {
            for j in 0..q {
                let mut acc = 0.0;
                for k in 0..q {
                    acc += wm[i * q + k] * wm[k * q + j];
                }
                out[i * q + j] = acc;
            }
        }
        out
    }
}

fn soc_residual(v: &[f64]) -> f64 {
    let t = norm(&v[1..]);
    (v[0] - t) * (v[0] + t)
}

#[derive(Debug, Clone)]
struct Scaling {
    lp: Vec<f64>,
    soc: Vec<SocScaling>,
}

impl Scaling {
    fn identity(cones: &Cones) -> Self {
        Scaling { lp: vec![1.0; cones.nonneg], soc: cones.soc.iter().map(|&q| SocScaling::identity(q)).collect() }
    }

    fn nt(cones: &Cones, s: &[f64], z: &[f64]) -> Option<Self> {
        let l = cones.nonneg;
        let mut lp = Vec::with_capacity(l);
        for i in 0..l {
            if s[i] <= 0.0 || z[i] <= 0.0 {
                return None;
            }
            lp.push((s[i] / z[i]).sqrt());
        }
        let mut soc = Vec::with_capacity(cones.soc.len());
        let mut o = l;
        for &q in &cones.soc {
            let (sk, zk) = (&s[o..o + q], &z[o..o + q]);
            let (sr, zr) = (soc_residual(sk), soc_residual(zk));
            if sr <= 0.0 || zr <= 0.0 || sk[0] <= 0.0 || zk[0] <= 0.0 {
                return None;
            }
            let (ss, zs) = (sr.sqrt(), zr.sqrt());
            let sb: Vec<f64> = sk.iter().map(|v| v / ss).collect();
            let zb: Vec<f64> = zk.iter().map(|v| v / zs).collect();
            let gamma = ((1.0 + dot(&sb, &zb)) / 2.0).sqrt();
            let mut w = vec![0.0; q];
            w[0] = (sb[0] + zb[0]) / (2.0 * gamma);
            for i in 1..q {
                w[i] = (sb[i] - zb[i]) / (2.0 * gamma);
            }
            soc.push(SocScaling { eta: (sr / zr).powf(0.25), w });
            o += q;
        }
        Some(Scaling { lp, soc })
    }

    fn apply(&self, cones: &Cones, v: &[f64], inverse: bool) -> Vec<f64> {
        let mut out = vec![0.0; v.len()];
        for i in 0..cones.nonneg {
            out[i] = if inverse { v[i] / self.lp[i] } else { v[i] * self.lp[i] };
        }
        let mut o = cones.nonneg;
        for (k, &q) in cones.soc.iter().enumerate() {
            self.soc[k].apply(&v[o..o + q], &mut out[o..o + q], inverse);
            o += q;
        }
        out
    }

    /// Values of the `W²` blocks in the canonical slot order.
    fn squared_slots(&self, cones: &Cones) -> Vec<f64> {
        let mut out: Vec<f64> = self.lp.iter().map(|w| w * w).collect();
        for (k, &q) in cones.soc.iter().enumerate() {
            let w2 = self.soc[k].squared();
            for j in 0..q {
                for i in 0..=j {
                    out.push(w2[i * q + j]);
                }
            }
        }
        out
    }
}

fn jordan(cones: &Cones, u: &[f64], v: &[f64]) -> Vec<f64> {
    let mut out = vec![0.0; u.len()];
    for i in 0..cones.nonneg {
        out[i] = u[i] * v[i];
    }
    let mut o = cones.nonneg;
    for &q in &cones.soc {
        let (uk, vk) = (&u[o..o + q], &v[o..o + q]);
        out[o] = dot(uk, vk);
        for i in 1..q {
            out[o + i] = uk[0] * vk[i] + vk[0] * uk[i];
        }
        o += q;
    }
    out
}

/// Solves `λ ∘ x = v` for `x`.
fn jordan_div(cones: &Cones, lam: &[f64], v: &[f64]) -> Vec<f64> {
    let mut out = vec![0.0; v.len()];
    for i in 0..cones.nonneg {
        out[i] = v[i] / lam[i];
    }
    let mut o = cones.nonneg;
    for &q in &cones.soc {
        let (l, vk) = (&lam[o..o + q], &v[o..o + q]);
        let rho = soc_residual(l);
        let x0 = (l[0] * vk[0] - dot(&l[1..], &vk[1..])) / rho;
        out[o] = x0;
        for i in 1..q {
            out[o + i] = (vk[i] - x0 * l[i]) / l[0];
        }
        o += q;
    }
    out
}

fn add_identity(cones: &Cones, v: &mut [f64], k: f64) {
    for x in v.iter_mut().take(cones.nonneg) {
        *x += k;
    }
    let mut o = cones.nonneg;
    for &q in &cones.soc {
        v[o] += k;
        o += q;
    }
}

fn shift_interior(cones: &Cones, v: &mut [f64]) {
    let mut worst = f64::NEG_INFINITY;
    for &x in v.iter().take(cones.nonneg) {
        worst = worst.max(-x);
    }
    let mut o = cones.nonneg;
    for &q in &cones.soc {
        worst = worst.max(-(v[o] - norm(&v[o + 1..o + q])));
        o += q;
    }
    if worst >= 0.0 {
        add_identity(cones, v, 1.0 + worst);
    }
}

/// Largest `α` keeping `x + α d` inside the cone.
fn max_step(cones: &Cones, x: &[f64], d: &[f64]) -> f64 {
    let mut alpha = f64::INFINITY;
    for i in 0..cones.nonneg {
        if d[i] < 0.0 {
            alpha = alpha.min(-x[i] / d[i]);
        }
    }
    let mut o = cones.nonneg;
    for &q in &cones.soc {
        let (xk, dk) = (&x[o..o + q], &d[o..o + q]);
        let a = dk[0] * dk[0] - dot(&dk[1..], &dk[1..]);
        let b = 2.0 * (xk[0] * dk[0] - dot(&xk[1..], &dk[1..]));
        let c = soc_residual(xk).max(0.0);
        let mut root = f64::INFINITY;
        let scale = a.abs().max(b.abs()).max(c);
        if scale > 0.0 {
            if a.abs() <= 1e-14 * scale {
                if b < 0.0 {
                    root = -c / b;
                }
            } else {
                let disc = b * b - 4.0 * a * c;
                if disc >= 0.0 {
                    let sq = disc.sqrt();
                    let qq = -0.5 * (b + b.signum() * sq);
                    for r in [qq / a, if qq != 0.0 { c / qq } else { f64::INFINITY }] {
                        if r > 0.0 && r < root {
                            root = r;
                        }
                    }
                }
            }
        }
        // the vertex is reached before the cone boundary only in degenerate cases
        if dk[0] < 0.0 {
            root = root.min(-xk[0] / dk[0]);
        }
        alpha = alpha.min(root);
        o += q;
    }
    alpha
}

/// Regularized quasi-definite KKT matrix with fixed symbolic structure.
struct Kkt {
    n: usize,
    p: usize,
    m: usize,
    iperm: Vec<usize>,
    mat: Csc,
    zslots: Vec<usize>,
    zdiag: Vec<bool>,
    signs: Vec<f64>,
    ldl: Ldl,
    reg: f64,
}

impl Kkt {
    fn new(prob: &Problem, reg: f64) -> Option<Kkt> {
        let (n, p, m) = (prob.n(), prob.b.len(), prob.h.len());
        let dim = n + p + m;
        // (row, col, value) in original indices with row <= col
        let mut trip: Vec<(usize, usize, f64)> = Vec::new();
        for i in 0..n {
            trip.push((i, i, reg));
        }
        for (r, c, v) in prob.a.triplets() {
            trip.push((c, n + r, v));
        }
        for r in 0..p {
            trip.push((n + r, n + r, -reg));
        }
        for (r, c, v) in prob.g.triplets() {
            trip.push((c, n + p + r, v));
        }
        let zstart = trip.len();
        let base = n + p;
        for i in 0..prob.cones.nonneg {
            trip.push((base + i, base + i, -1.0 - reg));
        }
        let mut o = base + prob.cones.nonneg;
        for &q in &prob.cones.soc {
            for j in 0..q {
                for i in 0..=j {
                    trip.push((o + i, o + j, if i == j { -1.0 - reg } else { 0.0 }));
                }
            }
            o += q;
        }

        // cone rows are eliminated first; the rest follows a bandwidth-reducing
        // order on the pattern they leave behind
        let nxy = n + p;
        let mut adj = vec![Vec::new(); nxy];
        for (r, c, _) in prob.a.triplets() {
            adj[c].push(n + r);
            adj[n + r].push(c);
        }
        let g_rows = {
            let mut rows = vec![Vec::new(); m];
            for (r, c, _) in prob.g.triplets() {
                rows[r].push(c);
            }
            rows
        };
        let mut blocks: Vec<Vec<usize>> = g_rows[..prob.cones.nonneg].to_vec();
        let mut o = prob.cones.nonneg;
        for &q in &prob.cones.soc {
            let mut cols: Vec<usize> = g_rows[o..o + q].iter().flatten().copied().collect();
            cols.sort_unstable();
            cols.dedup();
            blocks.push(cols);
            o += q;
        }
        let threshold = 64usize.max((10.0 * (nxy as f64).sqrt()) as usize);
        for cols in blocks.iter().filter(|c| c.len() <= threshold) {
            for &i in cols {
                for &j in cols {
                    if i != j {
                        adj[i].push(j);
                    }
                }
            }
        }
        for a in adj.iter_mut() {
            a.sort_unstable();
            a.dedup();
        }
        let mut perm: Vec<usize> = (nxy..dim).collect();
        perm.extend(rcm_order(&adj, threshold));
        let mut iperm = vec![0; dim];
        for (new, &old) in perm.iter().enumerate() {
            iperm[old] = new;
        }

        let mut keyed: Vec<(usize, usize, usize)> = trip
            .iter()
            .enumerate()
            .map(|(id, &(r, c, _))| {
                let (a, b) = (iperm[r], iperm[c]);
                (a.min(b), a.max(b), id)
            })
            .collect();
        keyed.sort_unstable_by_key(|&(r, c, _)| (c, r));
        let mut colptr = vec![0; dim + 1];
        let mut rowidx = Vec::with_capacity(keyed.len());
        let mut vals = Vec::with_capacity(keyed.len());
        let mut pos = vec![0; trip.len()];
        for (k, &(r, c, id)) in keyed.iter().enumerate() {
            rowidx.push(r);
            vals.push(trip[id].2);
            colptr[c + 1] += 1;
            pos[id] = k;
        }
        for c in 0..dim {
            colptr[c + 1] += colptr[c];
        }
        let mat = Csc { nrows: dim, ncols: dim, colptr, rowidx, vals };
        let ldl = Ldl::analyse(&mat).ok()?;
        let mut signs = vec![0.0; dim];
        for (old, &new) in iperm.iter().enumerate() {
            signs[new] = if old < n { 1.0 } else { -1.0 };
        }
        let zdiag = trip[zstart..].iter().map(|&(r, c, _)| r == c).collect();
        Some(Kkt { n, p, m, iperm, mat, zslots: pos[zstart..].to_vec(), zdiag, signs, ldl, reg })
    }

    fn factor(&mut self, w2: &[f64], dyn_reg: f64) -> bool {
        for (k, &slot) in self.zslots.iter().enumerate() {
            self.mat.vals[slot] = -w2[k] - if self.zdiag[k] { self.reg } else { 0.0 };
        }
        self.ldl.factor(&self.mat, &self.signs, 1e-13, dyn_reg).is_ok()
    }

    fn solve_reg(&self, rhs: &[f64]) -> Vec<f64> {
        let mut x = vec![0.0; rhs.len()];
        for (old, &new) in self.iperm.iter().enumerate() {
            x[new] = rhs[old];
        }
        self.ldl.solve(&mut x);
        (0..rhs.len()).map(|old| x[self.iperm[old]]).collect()
    }

    /// Unregularized product `K v` with `W²` applied through the scaling.
    fn mul(&self, prob: &Problem, sc: &Scaling, v: &[f64]) -> Vec<f64> {
        let (n, p, m) = (self.n, self.p, self.m);
        let (vx, vy, vz) = (&v[..n], &v[n..n + p], &v[n + p..]);
        let mut out = vec![0.0; n + p + m];
        prob.a.gemv_t(1.0, vy, &mut out[..n]);
        prob.g.gemv_t(1.0, vz, &mut out[..n]);
        prob.a.gemv(1.0, vx, &mut out[n..n + p]);
        let wz = sc.apply(&prob.cones, vz, false);
        let w2z = sc.apply(&prob.cones, &wz, false);
        let oz = &mut out[n + p..];
        prob.g.gemv(1.0, vx, oz);
        axpy(-1.0, &w2z, oz);
        out
    }

    fn solve(&self, prob: &Problem, sc: &Scaling, rhs: &[f64], steps: usize) -> Vec<f64> {
        let mut x = self.solve_reg(rhs);
        let bnorm = rhs.iter().fold(0.0f64, |a, v| a.max(v.abs()));
        for _ in 0..steps {
            let kx = self.mul(prob, sc, &x);
            let r: Vec<f64> = rhs.iter().zip(&kx).map(|(a, b)| a - b).collect();
            let rn = r.iter().fold(0.0f64, |a, v| a.max(v.abs()));
            if rn <= 1e-14 * (1.0 + bnorm) {
                break;
            }
            let dx = self.solve_reg(&r);
            axpy(1.0, &dx, &mut x);
        }
        x
    }
}

struct Iterate {
    x: Vec<f64>,
    y: Vec<f64>,
    z: Vec<f64>,
    s: Vec<f64>,
    tau: f64,
    kappa: f64,
}

struct Residuals {
    rx: Vec<f64>,
    ry: Vec<f64>,
    rz: Vec<f64>,
    rt: f64,
}

fn residuals(p: &Problem, it: &Iterate) -> Residuals {
    let mut rx: Vec<f64> = p.c.iter().map(|v| v * it.tau).collect();
    p.a.gemv_t(1.0, &it.y, &mut rx);
    p.g.gemv_t(1.0, &it.z, &mut rx);
    let mut ry: Vec<f64> = p.b.iter().map(|v| v * it.tau).collect();
    p.a.gemv(-1.0, &it.x, &mut ry);
    let mut rz: Vec<f64> = p.h.iter().zip(&it.s).map(|(h, s)| h * it.tau - s).collect();
    p.g.gemv(-1.0, &it.x, &mut rz);
    let rt = -dot(&p.c, &it.x) - dot(&p.b, &it.y) - dot(&p.h, &it.z) - it.kappa;
    Residuals { rx, ry, rz, rt }
}

struct Direction {
    x: Vec<f64>,
    y: Vec<f64>,
    z: Vec<f64>,
    s: Vec<f64>,
    tau: f64,
    kappa: f64,
}

#[allow(clippy::too_many_arguments)]
fn direction(
    p: &Problem,
    kkt: &Kkt,
    sc: &Scaling,
    lam: &[f64],
    u1: &[f64],
    it: &Iterate,
    res: &Residuals,
    eta: f64,
    ds: &[f64],
    dk: f64,
    steps: usize,
) -> Direction {
    let (n, pp) = (p.n(), p.b.len());
    let cones = &p.cones;
    let lds = jordan_div(cones, lam, ds);
    let w_lds = sc.apply(cones, &lds, false);
    let mut rhs = Vec::with_capacity(u1.len());
    rhs.extend(res.rx.iter().map(|v| -eta * v));
    rhs.extend(res.ry.iter().map(|v| eta * v));
    rhs.extend(res.rz.iter().zip(&w_lds).map(|(r, w)| eta * r - w));
    let u2 = kkt.solve(p, sc, &rhs, steps);
    let (u1x, u1y, u1z) = (&u1[..n], &u1[n..n + pp], &u1[n + pp..]);
    let (u2x, u2y, u2z) = (&u2[..n], &u2[n..n + pp], &u2[n + pp..]);
    let num = -eta * res.rt + dot(&p.c, u2x) + dot(&p.b, u2y) + dot(&p.h, u2z) + dk / it.tau;
    let den = -dot(&p.c, u1x) - dot(&p.b, u1y) - dot(&p.h, u1z) + it.kappa / it.tau;
    let dtau = num / den;
    let dx: Vec<f64> = u2x.iter().zip(u1x).map(|(a, b)| a + dtau * b).collect();
    let dy: Vec<f64> = u2y.iter().zip(u1y).map(|(a, b)| a + dtau * b).collect();
    let dz: Vec<f64> = u2z.iter().zip(u1z).map(|(a, b)| a + dtau * b).collect();
    let wdz = sc.apply(cones, &dz, false);
    let inner: Vec<f64> = lds.iter().zip(&wdz).map(|(a, b)| a - b).collect();
    let dsv = sc.apply(cones, &inner, false);
    let dkappa = (dk - it.kappa * dtau) / it.tau;
    Direction { x: dx, y: dy, z: dz, s: dsv, tau: dtau, kappa: dkappa }
}

fn step_length(p: &Problem, it: &Iterate, d: &Direction) -> f64 {
    let mut a = max_step(&p.cones, &it.s, &d.s).min(max_step(&p.cones, &it.z, &d.z));
    if d.tau < 0.0 {
        a = a.min(-it.tau / d.tau);
    }
    if d.kappa < 0.0 {
        a = a.min(-it.kappa / d.kappa);
    }
    a
}

pub fn solve(prob: &Problem, st: &Settings) -> Result<Solution, SocpError> {
    prob.check()?;
    let cones = &prob.cones;
    let (n, p, m) = (prob.n(), prob.b.len(), prob.h.len());
    let failure = |status, iterations| Solution {
        status,
        x: vec![f64::NAN; n],
        y: vec![f64::NAN; p],
        z: vec![f64::NAN; m],
        s: vec![f64::NAN; m],
        obj: f64::NAN,
        iterations,
        primal_residual: f64::NAN,
        dual_residual: f64::NAN,
        gap: f64::NAN,
    };
    let Some(mut kkt) = Kkt::new(prob, st.static_reg) else {
        return Ok(failure(Status::NumericalFailure, 0));
    };

    // initial point from two least-squares solves with W = I
    let ident = Scaling::identity(cones);
    if !kkt.factor(&ident.squared_slots(cones), st.dynamic_reg) {
        return Ok(failure(Status::NumericalFailure, 0));
    }
    let mut rhs = vec![0.0; n];
    rhs.extend_from_slice(&prob.b);
    rhs.extend_from_slice(&prob.h);
    let sol = kkt.solve(prob, &ident, &rhs, st.refine_steps);
    let x0 = sol[..n].to_vec();
    let mut s0: Vec<f64> = sol[n + p..].iter().map(|v| -v).collect();
    shift_interior(cones, &mut s0);
    let mut rhs: Vec<f64> = prob.c.iter().map(|v| -v).collect();
    rhs.extend(std::iter::repeat_n(0.0, p + m));
    let sol = kkt.solve(prob, &ident, &rhs, st.refine_steps);
    let y0 = sol[n..n + p].to_vec();
    let mut z0 = sol[n + p..].to_vec();
    shift_interior(cones, &mut z0);
    let mut it = Iterate { x: x0, y: y0, z: z0, s: s0, tau: 1.0, kappa: 1.0 };

    let bh_norm = 1f64.max(norm(&prob.b)).max(norm(&prob.h));
    let c_norm = 1f64.max(norm(&prob.c));
    let degree = cones.degree() as f64;
    let mut last = failure(Status::MaxIter, 0);
    let mut near: Option<Solution> = None;
    let fallback = |last: Solution, near: Option<Solution>| match near {
        Some(mut b) => {
            b.status = Status::AlmostOptimal;
            b
        }
        None => last,
    };

    for iter in 0..=st.max_iter {
        let res = residuals(prob, &it);
        // termination on the current iterate
        let tau = it.tau;
        let mut ax = vec![0.0; p];
        prob.a.gemv(1.0, &it.x, &mut ax);
        let mut gxs = it.s.clone();
        prob.g.gemv(1.0, &it.x, &mut gxs);
        let pres_abs = (dot(&res.ry, &res.ry) + dot(&res.rz, &res.rz)).sqrt() / tau;
        let pres = pres_abs / bh_norm;
        let dres = norm(&res.rx) / tau / c_norm;
        let pcost = dot(&prob.c, &it.x) / tau;
        let by_hz = dot(&prob.b, &it.y) + dot(&prob.h, &it.z);
        let dcost = -by_hz / tau;
        let gap = dot(&it.s, &it.z) / (tau * tau);
        let rel_gap = if pcost < 0.0 {
            gap / -pcost
        } else if dcost > 0.0 {
            gap / dcost
        } else {
            f64::INFINITY
        };
        let scale = |v: &[f64], k: f64| v.iter().map(|x| x / k).collect::<Vec<_>>();
        last = Solution {
            status: Status::MaxIter,
            x: scale(&it.x, tau),
            y: scale(&it.y, tau),
            z: scale(&it.z, tau),
            s: scale(&it.s, tau),
            obj: pcost,
            iterations: iter,
            primal_residual: pres,
            dual_residual: dres,
            gap,
        };
        if pres < st.feas_tol && dres < st.feas_tol && (gap < st.abs_gap_tol || rel_gap < st.rel_gap_tol) {
            last.status = Status::Optimal;
            return Ok(last);
        }
        let f = st.reduced_factor;
        if pres < f * st.feas_tol && dres < f * st.feas_tol && (gap < f * st.abs_gap_tol || rel_gap < f * st.rel_gap_tol) {
            near = Some(last.clone());
        }
        let mut aty = vec![0.0; n];
        prob.a.gemv_t(1.0, &it.y, &mut aty);
        prob.g.gemv_t(1.0, &it.z, &mut aty);
        if by_hz < 0.0 && norm(&aty) / -by_hz < st.feas_tol {
            let k = -by_hz;
            last.status = Status::Infeasible;
            last.x = vec![f64::NAN; n];
            last.y = scale(&it.y, k);
            last.z = scale(&it.z, k);
            return Ok(last);
        }
        let ctx = dot(&prob.c, &it.x);
        if ctx < 0.0 && (norm(&ax).powi(2) + norm(&gxs).powi(2)).sqrt() / -ctx < st.feas_tol {
            last.status = Status::Unbounded;
            last.x = scale(&it.x, -ctx);
            last.s = scale(&it.s, -ctx);
            last.y = vec![f64::NAN; p];
            last.z = vec![f64::NAN; m];
            return Ok(last);
        }
        if iter == st.max_iter {
            return Ok(fallback(last, near));
        }

        let Some(sc) = Scaling::nt(cones, &it.s, &it.z) else {
            last.status = Status::NumericalFailure;
            return Ok(fallback(last, near));
        };
        let lam = sc.apply(cones, &it.z, false);
        if !kkt.factor(&sc.squared_slots(cones), st.dynamic_reg) {
            last.status = Status::NumericalFailure;
            return Ok(fallback(last, near));
        }
        let mut rhs1: Vec<f64> = prob.c.iter().map(|v| -v).collect();
        rhs1.extend_from_slice(&prob.b);
        rhs1.extend_from_slice(&prob.h);
        let u1 = kkt.solve(prob, &sc, &rhs1, st.refine_steps);

        let mu = (dot(&it.s, &it.z) + it.tau * it.kappa) / (degree + 1.0);
        let ll = jordan(cones, &lam, &lam);
        let ds_aff: Vec<f64> = ll.iter().map(|v| -v).collect();
        let aff = direction(prob, &kkt, &sc, &lam, &u1, &it, &res, 1.0, &ds_aff, -it.kappa * it.tau, st.refine_steps);
        let alpha_aff = step_length(prob, &it, &aff).min(1.0);
        let sigma = (1.0 - alpha_aff).powi(3);

        let ws = sc.apply(cones, &aff.s, true);
        let wz = sc.apply(cones, &aff.z, false);
        let corr = jordan(cones, &ws, &wz);
        let mut ds: Vec<f64> = ll.iter().zip(&corr).map(|(a, b)| -a - b).collect();
        add_identity(cones, &mut ds, sigma * mu);
        let dk = -it.kappa * it.tau - aff.kappa * aff.tau + sigma * mu;
        let d = direction(prob, &kkt, &sc, &lam, &u1, &it, &res, 1.0 - sigma, &ds, dk, st.refine_steps);
        let alpha = (0.99 * step_length(prob, &it, &d)).min(1.0);
        if !(alpha > 1e-12) {
            last.status = Status::NumericalFailure;
            return Ok(fallback(last, near));
        }
        axpy(alpha, &d.x, &mut it.x);
        axpy(alpha, &d.y, &mut it.y);
        axpy(alpha, &d.z, &mut it.z);
        axpy(alpha, &d.s, &mut it.s);
        it.tau += alpha * d.tau;
        it.kappa += alpha * d.kappa;
        if !(it.tau > 0.0 && it.kappa > 0.0) || it.x.iter().any(|v| !v.is_finite()) {
            last.status = Status::NumericalFailure;
            return Ok(fallback(last, near));
        }
    }
    Ok(last)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn nt_scaling_maps_z_and_s_to_the_same_point() {
        let cones = Cones { nonneg: 2, soc: vec![3, 4] };
        let s = [1.0, 2.0, 3.0, 1.0, -0.5, 2.0, 0.3, 0.4, -1.0];
        let z = [0.5, 0.1, 1.5, 0.2, 1.0, 1.1, -0.5, 0.0, 0.2];
        let sc = Scaling::nt(&cones, &s, &z).unwrap();
        let wz = sc.apply(&cones, &z, false);
        let wis = sc.apply(&cones, &s, true);
        for (a, b) in wz.iter().zip(&wis) {
            assert!((a - b).abs() < 1e-13, "{wz:?} vs {wis:?}");
        }
        let back = sc.apply(&cones, &sc.apply(&cones, &z, false), true);
        for (a, b) in back.iter().zip(&z) {
            assert!((a - b).abs() < 1e-13);
        }
    }

    #[test]
    fn jordan_division_inverts_product() {
        let cones = Cones { nonneg: 1, soc: vec![3] };
        let lam = [2.0, 2.0, 0.5, 0.7];
        let v = [1.0, -0.3, 0.8, 0.1];
        let x = jordan_div(&cones, &lam, &v);
        let back = jordan(&cones, &lam, &x);
        for (a, b) in back.iter().zip(&v) {
            assert!((a - b).abs() < 1e-14);
        }
    }

    #[test]
    fn step_to_cone_boundary() {
        let cones = Cones { nonneg: 0, soc: vec![2] };
        // (2, 0) + a (-1, 1): boundary at 2 - a = a
        assert!((max_step(&cones, &[2.0, 0.0], &[-1.0, 1.0]) - 1.0).abs() < 1e-15);
        assert_eq!(max_step(&cones, &[2.0, 0.0], &[1.0, 0.5]), f64::INFINITY);
    }

    fn lp_one_var(c: f64, lower: f64) -> Problem {
        // min c x s.t. x >= lower, written as -x + s = -lower
        Problem {
            c: vec![c],
            a: Csc::zeros(0, 1),
            b: vec![],
            g: Csc::from_triplets(1, 1, &[(0, 0, -1.0)]),
            h: vec![-lower],
            cones: Cones { nonneg: 1, soc: vec![] },
        }
    }

    #[test]
    fn bound_constrained_scalar() {
        let r = solve(&lp_one_var(1.0, 1.0), &Settings::default()).unwrap();
        assert_eq!(r.status, Status::Optimal);
        assert!((r.x[0] - 1.0).abs() < 1e-8);
    }

    #[test]
    fn fixed_cone_member() {
        // min t s.t. ‖(3, 4)‖ <= t
        let p = Problem {
            c: vec![1.0],
            a: Csc::zeros(0, 1),
            b: vec![],
            g: Csc::from_triplets(3, 1, &[(0, 0, -1.0)]),
            h: vec![0.0, 3.0, 4.0],
            cones: Cones { nonneg: 0, soc: vec![3] },
        };
        let r = solve(&p, &Settings::default()).unwrap();
        assert_eq!(r.status, Status::Optimal);
        assert!((r.x[0] - 5.0).abs() < 1e-8);
    }

    #[test]
    fn infeasible_and_unbounded() {
        // x >= 1 and x <= 0
        let p = Problem {
            c: vec![1.0],
            a: Csc::zeros(0, 1),
            b: vec![],
            g: Csc::from_triplets(2, 1, &[(0, 0, -1.0), (1, 0, 1.0)]),
            h: vec![-1.0, 0.0],
            cones: Cones { nonneg: 2, soc: vec![] },
        };
        assert_eq!(solve(&p, &Settings::default()).unwrap().status, Status::Infeasible);
        assert_eq!(solve(&lp_one_var(-1.0, 1.0), &Settings::default()).unwrap().status, Status::Unbounded);
    }

    #[test]
    fn dump_round_trip() {
        let p = lp_one_var(2.5, -3.0);
        let q = Problem::from_dump(&p.to_dump()).unwrap();
        assert_eq!(p, q);
        assert!(Problem::from_dump("socp 2\n").is_err());
    }
}

#![allow(dead_code)]
//! Independent reference computations shared by the integration tests.

pub mod socp_ref;

use nalgebra::{Matrix2, Matrix3, Vector2, Vector3};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

/// Gauss-Legendre nodes and weights on [-1, 1] (Newton on P_n).
pub fn gauss_legendre(n: usize) -> (Vec<f64>, Vec<f64>) {
    let mut x = vec![0.0; n];
    let mut w = vec![0.0; n];
    for i in 0..n {
        let mut z = (std::f64::consts::PI * (i as f64 + 0.75) / (n as f64 + 0.5)).cos();
        for _ in 0..100 {
            let (mut p0, mut p1) = (1.0, z);
            for k in 2..=n {
                let p2 = ((2 * k - 1) as f64 * z * p1 - (k - 1) as f64 * p0) / k as f64;
                p0 = p1;
                p1 = p2;
            }
            let dp = n as f64 * (z * p1 - p0) / (z * z - 1.0);
            let dz = p1 / dp;
            z -= dz;
            if dz.abs() < 1e-16 {
                let (mut q0, mut q1) = (1.0, z);
                for k in 2..=n {
                    let q2 = ((2 * k - 1) as f64 * z * q1 - (k - 1) as f64 * q0) / k as f64;
                    q0 = q1;
                    q1 = q2;
                }
                let dq = n as f64 * (z * q1 - q0) / (z * z - 1.0);
                x[i] = z;
                w[i] = 2.0 / ((1.0 - z * z) * dq * dq);
                break;
            }
        }
    }
    (x, w)
}

/// Probability mass of N(0, P) inside the disk of radius `r` centred at `c`.
pub fn disk_probability(c: &Vector2<f64>, p: &Matrix2<f64>, r: f64) -> f64 {
    let inv = p.try_inverse().unwrap();
    let norm = 1.0 / (2.0 * std::f64::consts::PI * p.determinant().sqrt());
    let (gx, gw) = gauss_legendre(48);
    let panels = 8;
    let n_theta = 256;
    let mut total = 0.0;
    for k in 0..panels {
        let a = r * k as f64 / panels as f64;
        let b = r * (k + 1) as f64 / panels as f64;
        for (xi, wi) in gx.iter().zip(&gw) {
            let rho = 0.5 * (b - a) * xi + 0.5 * (a + b);
            let mut ring = 0.0;
            for j in 0..n_theta {
                let th = 2.0 * std::f64::consts::PI * j as f64 / n_theta as f64;
                let q = c + Vector2::new(rho * th.cos(), rho * th.sin());
                ring += (-0.5 * (q.transpose() * inv * q)[0]).exp();
            }
            ring *= 2.0 * std::f64::consts::PI / n_theta as f64;
            total += 0.5 * (b - a) * wi * rho * ring;
        }
    }
    total * norm
}

/// Monte-Carlo mass of N(0, P) inside the sphere of radius `r` centred at
/// `c`: sphere volume times the mean density over uniform samples in the ball.
pub fn sphere_probability_mc(c: &Vector3<f64>, p: &Matrix3<f64>, r: f64, n: usize, seed: u64) -> f64 {
    let inv = p.try_inverse().unwrap();
    let norm = 1.0 / ((2.0 * std::f64::consts::PI).powf(1.5) * p.determinant().sqrt());
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut acc = 0.0;
    for _ in 0..n {
        let z = Vector3::new(rng.sample(StandardNormal), rng.sample(StandardNormal), rng.sample(StandardNormal));
        let rad: f64 = r * rng.random::<f64>().cbrt();
        let x = c + z.normalize() * rad;
        acc += (-0.5 * (x.transpose() * inv * x)[0]).exp();
    }
    norm * acc / n as f64 * 4.0 / 3.0 * std::f64::consts::PI * r.powi(3)
}

/// Bisection root of a decreasing function on [lo, hi].
pub fn bisect(mut lo: f64, mut hi: f64, f: impl Fn(f64) -> f64) -> f64 {
    for _ in 0..200 {
        let m = 0.5 * (lo + hi);
        if f(m) > 0.0 {
            lo = m;
        } else {
            hi = m;
        }
    }
    0.5 * (lo + hi)
}

/// Nearest of `n` evenly spaced boundary samples.
pub fn boundary_scan(p: &Vector2<f64>, cov: &Matrix2<f64>, d2: f64, n: usize) -> Vector2<f64> {
    let chol = cov.cholesky().unwrap().l() * d2.sqrt();
    let mut best = (f64::INFINITY, Vector2::zeros());
    for k in 0..n {
        let th = 2.0 * std::f64::consts::PI * k as f64 / n as f64;
        let z = chol * Vector2::new(th.cos(), th.sin());
        let d = (z - p).norm();
        if d < best.0 {
            best = (d, z);
        }
    }
    best.1
}

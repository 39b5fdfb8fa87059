//! Dense reference solver for random cone programs.

use multicam::socp::{Cones, Problem};
use multicam::sparse::Csc;
use nalgebra::{DMatrix, DVector};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub struct Dense {
    pub c: DVector<f64>,
    pub a: DMatrix<f64>,
    pub b: DVector<f64>,
    pub g: DMatrix<f64>,
    pub h: DVector<f64>,
    pub cones: Cones,
    pub x_feas: DVector<f64>,
}

pub fn csc(m: &DMatrix<f64>) -> Csc {
    let mut t = Vec::new();
    for j in 0..m.ncols() {
        for i in 0..m.nrows() {
            if m[(i, j)] != 0.0 {
                t.push((i, j, m[(i, j)]));
            }
        }
    }
    Csc::from_triplets(m.nrows(), m.ncols(), &t)
}

pub fn interior_point(cones: &Cones, rng: &mut ChaCha8Rng) -> DVector<f64> {
    let mut v = Vec::new();
    for _ in 0..cones.nonneg {
        v.push(rng.random_range(0.1..2.0));
    }
    for &q in &cones.soc {
        let tail: Vec<f64> = (1..q).map(|_| rng.random_range(-1.0..1.0)).collect();
        let n = tail.iter().map(|x| x * x).sum::<f64>().sqrt();
        v.push(n + rng.random_range(0.1..1.0));
        v.extend(tail);
    }
    DVector::from_vec(v)
}

/// Random problem that is strictly primal and dual feasible.
pub fn random_problem(seed: u64) -> Dense {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let n = rng.random_range(2..=30);
    let p = rng.random_range(0..=n / 3);
    let nonneg = rng.random_range(n..=2 * n);
    let soc: Vec<usize> = (0..rng.random_range(1..=4)).map(|_| rng.random_range(2..=6)).collect();
    let cones = Cones { nonneg, soc };
    let m = cones.dim();
    let a = DMatrix::from_fn(p, n, |_, _| rng.random_range(-1.0..1.0));
    let g = DMatrix::from_fn(m, n, |_, _| if rng.random_bool(0.6) { rng.random_range(-1.0..1.0) } else { 0.0 });
    let x_feas = DVector::from_fn(n, |_, _| rng.random_range(-1.0..1.0));
    let s = interior_point(&cones, &mut rng);
    let z = interior_point(&cones, &mut rng);
    let y = DVector::from_fn(p, |_, _| rng.random_range(-1.0..1.0));
    let b = &a * &x_feas;
    let h = &g * &x_feas + s;
    let c = -(a.transpose() * y + g.transpose() * z);
    Dense { c, a, b, g, h, cones, x_feas }
}

pub fn sparse(d: &Dense) -> Problem {
    Problem {
        c: d.c.iter().copied().collect(),
        a: csc(&d.a),
        b: d.b.iter().copied().collect(),
        g: csc(&d.g),
        h: d.h.iter().copied().collect(),
        cones: d.cones.clone(),
    }
}

/// Barrier value, gradient and Hessian with respect to the slack.
pub fn barrier(cones: &Cones, s: &DVector<f64>) -> Option<(f64, DVector<f64>, DMatrix<f64>)> {
    let m = s.len();
    let mut f = 0.0;
    let mut gr = DVector::zeros(m);
    let mut he = DMatrix::zeros(m, m);
    for i in 0..cones.nonneg {
        if s[i] <= 0.0 {
            return None;
        }
        f -= s[i].ln();
        gr[i] = -1.0 / s[i];
        he[(i, i)] = 1.0 / (s[i] * s[i]);
    }
    let mut o = cones.nonneg;
    for &q in &cones.soc {
        let sk = s.rows(o, q).clone_owned();
        let mut js = sk.clone();
        for i in 1..q {
            js[i] = -js[i];
        }
        let r = sk.dot(&js);
        if r <= 0.0 || sk[0] <= 0.0 {
            return None;
        }
        f -= r.ln();
        gr.rows_mut(o, q).copy_from(&(&js * (-2.0 / r)));
        let mut jm = DMatrix::identity(q, q);
        for i in 1..q {
            jm[(i, i)] = -1.0;
        }
        let blk = jm * (-2.0 / r) + &js * js.transpose() * (4.0 / (r * r));
        he.view_mut((o, o), (q, q)).copy_from(&blk);
        o += q;
    }
    Some((f, gr, he))
}

/// Reference optimum by a feasible-start log-barrier method with dense Newton steps.
pub fn barrier_reference(d: &Dense) -> f64 {
    let n = d.c.len();
    let p = d.b.len();
    let degree = d.cones.nonneg as f64 + 2.0 * d.cones.soc.len() as f64;
    let mut x = d.x_feas.clone();
    let mut t = 1.0;
    let obj = |x: &DVector<f64>, t: f64| -> Option<f64> {
        let s = &d.h - &d.g * x;
        barrier(&d.cones, &s).map(|(f, _, _)| t * d.c.dot(x) + f)
    };
    while degree / t > 1e-10 {
        for _ in 0..200 {
            let s = &d.h - &d.g * &x;
            let (_, gs, hs) = barrier(&d.cones, &s).unwrap();
            let grad = &d.c * t - d.g.transpose() * gs;
            let hess = d.g.transpose() * hs * &d.g;
            let mut k = DMatrix::zeros(n + p, n + p);
            k.view_mut((0, 0), (n, n)).copy_from(&hess);
            k.view_mut((n, 0), (p, n)).copy_from(&d.a);
            k.view_mut((0, n), (n, p)).copy_from(&d.a.transpose());
            let mut rhs = DVector::zeros(n + p);
            rhs.rows_mut(0, n).copy_from(&(-&grad));
            let sol = k.lu().solve(&rhs).unwrap();
            let dx = sol.rows(0, n).clone_owned();
            let dec = dx.dot(&(&hess * &dx));
            if dec / 2.0 < 1e-12 {
                break;
            }
            let f0 = obj(&x, t).unwrap();
            let mut step = 1.0;
            loop {
                let xn = &x + &dx * step;
                if let Some(f) = obj(&xn, t) {
                    if f <= f0 - 0.25 * step * dec {
                        x = xn;
                        break;
                    }
                }
                step *= 0.5;
                if step < 1e-14 {
                    break;
                }
            }
            if step < 1e-14 {
                break;
            }
        }
        t *= 30.0;
    }
    d.c.dot(&x)
}

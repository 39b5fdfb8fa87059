//! Derivative-free minimization for the small outer problems.

#[derive(Debug, Clone, Copy)]
pub struct NelderMead {
    pub step: f64,
    pub x_tol: f64,
    pub f_tol: f64,
    pub max_iter: usize,
}

impl Default for NelderMead {
    fn default() -> Self {
        NelderMead { step: 0.1, x_tol: 1e-10, f_tol: 1e-14, max_iter: 4000 }
    }
}

#[derive(Debug, Clone)]
pub struct Minimum {
    pub x: Vec<f64>,
    pub f: f64,
    pub iterations: usize,
}

impl NelderMead {
    pub fn minimize<F: FnMut(&[f64]) -> f64>(&self, x0: &[f64], mut f: F) -> Minimum {
        let n = x0.len();
        let mut simplex: Vec<Vec<f64>> = vec![x0.to_vec()];
        for i in 0..n {
            let mut v = x0.to_vec();
            v[i] += if v[i] != 0.0 { self.step * v[i].abs().max(1e-3) } else { self.step };
            simplex.push(v);
        }
        let mut vals: Vec<f64> = simplex.iter().map(|v| f(v)).collect();
        let mut it = 0;
        while it < self.max_iter {
            it += 1;
            let mut order: Vec<usize> = (0..=n).collect();
            order.sort_by(|&a, &b| vals[a].total_cmp(&vals[b]));
            simplex = order.iter().map(|&i| simplex[i].clone()).collect();
            vals = order.iter().map(|&i| vals[i]).collect();

            let spread = (vals[n] - vals[0]).abs();
            let size = simplex[1..]
                .iter()
                .flat_map(|v| v.iter().zip(&simplex[0]).map(|(a, b)| (a - b).abs()))
                .fold(0.0, f64::max);
            if spread <= self.f_tol && size <= self.x_tol {
                break;
            }

            let mut centroid = vec![0.0; n];
            for v in &simplex[..n] {
                for (c, x) in centroid.iter_mut().zip(v) {
                    *c += x / n as f64;
                }
            }
            let along = |t: f64| -> Vec<f64> {
                centroid.iter().zip(&simplex[n]).map(|(c, w)| c + t * (w - c)).collect()
            };

            let xr = along(-1.0);
            let fr = f(&xr);
            if fr < vals[0] {
                let xe = along(-2.0);
                let fe = f(&xe);
                if fe < fr {
                    simplex[n] = xe;
                    vals[n] = fe;
                } else {
                    simplex[n] = xr;
                    vals[n] = fr;
                }
                continue;
            }
            if fr < vals[n - 1] {
                simplex[n] = xr;
                vals[n] = fr;
                continue;
            }
            let (xc, fc) = if fr < vals[n] {
                let xc = along(-0.5);
                let fc = f(&xc);
                (xc, fc)
            } else {
                let xc = along(0.5);
                let fc = f(&xc);
                (xc, fc)
            };
            if fc < vals[n].min(fr) {
                simplex[n] = xc;
                vals[n] = fc;
                continue;
            }
            for i in 1..=n {
                let v: Vec<f64> = simplex[i].iter().zip(&simplex[0]).map(|(a, b)| b + 0.5 * (a - b)).collect();
                vals[i] = f(&v);
                simplex[i] = v;
            }
        }
        let best = (0..=n).min_by(|&a, &b| vals[a].total_cmp(&vals[b])).unwrap();
        Minimum { x: simplex[best].clone(), f: vals[best], iterations: it }
    }
}

/// Bisection for a sign change of `f` on `[lo, hi]`.
pub fn bisect<F: FnMut(f64) -> f64>(mut lo: f64, mut hi: f64, tol: f64, mut f: F) -> f64 {
    let mut flo = f(lo);
    for _ in 0..200 {
        if hi - lo <= tol {
            break;
        }
        let mid = 0.5 * (lo + hi);
        let fm = f(mid);
        if (fm <= 0.0) == (flo <= 0.0) {
            lo = mid;
            flo = fm;
        } else {
            hi = mid;
        }
    }
    0.5 * (lo + hi)
}

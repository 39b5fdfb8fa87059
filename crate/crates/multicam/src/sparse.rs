//! Compressed-column matrices, fill-reducing ordering and LDLᵀ.

use std::collections::VecDeque;

/// Column-compressed sparse matrix.
#[derive(Debug, Clone, PartialEq)]
pub struct Csc {
    pub nrows: usize,
    pub ncols: usize,
    pub colptr: Vec<usize>,
    pub rowidx: Vec<usize>,
    pub vals: Vec<f64>,
}

impl Csc {
    pub fn zeros(nrows: usize, ncols: usize) -> Csc {
        Csc { nrows, ncols, colptr: vec![0; ncols + 1], rowidx: Vec::new(), vals: Vec::new() }
    }

    /// Builds from `(row, col, value)` triplets; duplicates are summed.
    pub fn from_triplets(nrows: usize, ncols: usize, trip: &[(usize, usize, f64)]) -> Csc {
        let mut t: Vec<(usize, usize, f64)> = trip.to_vec();
        t.sort_by_key(|a| (a.1, a.0));
        let mut colptr = vec![0; ncols + 1];
        let mut rowidx = Vec::with_capacity(t.len());
        let mut vals: Vec<f64> = Vec::with_capacity(t.len());
        let mut last: Option<(usize, usize)> = None;
        for &(r, c, v) in &t {
            assert!(r < nrows && c < ncols, "triplet ({r},{c}) out of bounds");
            if last == Some((r, c)) {
                *vals.last_mut().unwrap() += v;
                continue;
            }
            rowidx.push(r);
            vals.push(v);
            colptr[c + 1] += 1;
            last = Some((r, c));
        }
        for c in 0..ncols {
            colptr[c + 1] += colptr[c];
        }
        Csc { nrows, ncols, colptr, rowidx, vals }
    }

    pub fn nnz(&self) -> usize {
        self.vals.len()
    }

    pub fn triplets(&self) -> impl Iterator<Item = (usize, usize, f64)> + '_ {
        (0..self.ncols).flat_map(move |c| {
            (self.colptr[c]..self.colptr[c + 1]).map(move |k| (self.rowidx[k], c, self.vals[k]))
        })
    }

    /// `y += alpha * self * x`
    pub fn gemv(&self, alpha: f64, x: &[f64], y: &mut [f64]) {
        for c in 0..self.ncols {
            let xc = alpha * x[c];
            if xc == 0.0 {
                continue;
            }
            for k in self.colptr[c]..self.colptr[c + 1] {
                y[self.rowidx[k]] += self.vals[k] * xc;
            }
        }
    }

    /// `y += alpha * selfᵀ * x`
    pub fn gemv_t(&self, alpha: f64, x: &[f64], y: &mut [f64]) {
        for c in 0..self.ncols {
            let mut acc = 0.0;
            for k in self.colptr[c]..self.colptr[c + 1] {
                acc += self.vals[k] * x[self.rowidx[k]];
            }
            y[c] += alpha * acc;
        }
    }

    pub fn mul(&self, x: &[f64]) -> Vec<f64> {
        let mut y = vec![0.0; self.nrows];
        self.gemv(1.0, x, &mut y);
        y
    }

    pub fn tmul(&self, x: &[f64]) -> Vec<f64> {
        let mut y = vec![0.0; self.ncols];
        self.gemv_t(1.0, x, &mut y);
        y
    }

    pub fn to_dense(&self) -> nalgebra::DMatrix<f64> {
        let mut m = nalgebra::DMatrix::zeros(self.nrows, self.ncols);
        for (r, c, v) in self.triplets() {
            m[(r, c)] += v;
        }
        m
    }
}

/// Reverse Cuthill–McKee on a symmetric pattern given as adjacency lists.
/// Nodes with more than `dense_threshold` neighbours are ordered last.
pub fn rcm_order(adj: &[Vec<usize>], dense_threshold: usize) -> Vec<usize> {
    let n = adj.len();
    let dense: Vec<bool> = adj.iter().map(|a| a.len() > dense_threshold).collect();
    let degree = |i: usize| adj[i].iter().filter(|&&j| !dense[j]).count();
    let mut visited = dense.clone();
    let mut order = Vec::with_capacity(n);
    let bfs = |start: usize, visited: &mut Vec<bool>, out: &mut Vec<usize>| -> usize {
        let mut q = VecDeque::from([start]);
        visited[start] = true;
        let mut last = start;
        while let Some(v) = q.pop_front() {
            out.push(v);
            last = v;
            let mut nb: Vec<usize> = adj[v].iter().copied().filter(|&j| !visited[j]).collect();
            nb.sort_by_key(|&j| (degree(j), j));
            nb.dedup();
            for j in nb {
                if !visited[j] {
                    visited[j] = true;
                    q.push_back(j);
                }
            }
        }
        last
    };
    loop {
        let start = (0..n).filter(|&i| !visited[i]).min_by_key(|&i| (degree(i), i));
        let Some(start) = start else { break };
        // one sweep towards a pseudo-peripheral node
        let mut probe_visited = visited.clone();
        let mut scratch = Vec::new();
        let far = bfs(start, &mut probe_visited, &mut scratch);
        bfs(far, &mut visited, &mut order);
    }
    order.reverse();
    order.extend((0..n).filter(|&i| dense[i]));
    order
}

#[derive(Debug, thiserror::Error, Clone, PartialEq)]
pub enum LdlError {
    #[error("matrix is not upper triangular")]
    NotUpper,
    #[error("missing diagonal entry in column {0}")]
    MissingDiagonal(usize),
    #[error("zero pivot at {0}")]
    ZeroPivot(usize),
}

/// LDLᵀ factor of a quasi-definite matrix given by its upper triangle.
#[derive(Debug, Clone)]
pub struct Ldl {
    n: usize,
    etree: Vec<Option<usize>>,
    lp: Vec<usize>,
    li: Vec<usize>,
    lx: Vec<f64>,
    d: Vec<f64>,
    dinv: Vec<f64>,
    pub regularized: usize,
}

impl Ldl {
    /// Symbolic analysis; `upper` must hold every diagonal entry.
    pub fn analyse(upper: &Csc) -> Result<Ldl, LdlError> {
        let n = upper.ncols;
        let mut work = vec![usize::MAX; n];
        let mut lnz = vec![0usize; n];
        let mut etree = vec![None; n];
        for j in 0..n {
            work[j] = j;
            let mut has_diag = false;
            for p in upper.colptr[j]..upper.colptr[j + 1] {
                let mut i = upper.rowidx[p];
                if i > j {
                    return Err(LdlError::NotUpper);
                }
                if i == j {
                    has_diag = true;
                }
                while work[i] != j {
                    if etree[i].is_none() {
                        etree[i] = Some(j);
                    }
                    lnz[i] += 1;
                    work[i] = j;
                    i = etree[i].unwrap_or(j);
                }
            }
            if !has_diag {
                return Err(LdlError::MissingDiagonal(j));
            }
        }
        let mut lp = vec![0; n + 1];
        for i in 0..n {
            lp[i + 1] = lp[i] + lnz[i];
        }
        let nnz = lp[n];
        Ok(Ldl {
            n,
            etree,
            lp,
            li: vec![0; nnz],
            lx: vec![0.0; nnz],
            d: vec![0.0; n],
            dinv: vec![0.0; n],
            regularized: 0,
        })
    }

    pub fn nnz(&self) -> usize {
        self.lp[self.n]
    }

    /// Numeric factorization. Pivots whose sign disagrees with `signs` or whose
    /// magnitude falls below `eps` are replaced by `signs[k] * delta`.
    pub fn factor(&mut self, upper: &Csc, signs: &[f64], eps: f64, delta: f64) -> Result<(), LdlError> {
        let n = self.n;
        let mut y_vals = vec![0.0; n];
        let mut y_used = vec![false; n];
        let mut y_idx = vec![0usize; n];
        let mut elim = vec![0usize; n];
        let mut next_space: Vec<usize> = self.lp[..n].to_vec();
        self.regularized = 0;
        for k in 0..n {
            let mut nnz_y = 0;
            self.d[k] = 0.0;
            for p in upper.colptr[k]..upper.colptr[k + 1] {
                let b = upper.rowidx[p];
                if b == k {
                    self.d[k] = upper.vals[p];
                    continue;
                }
                y_vals[b] = upper.vals[p];
                if !y_used[b] {
                    y_used[b] = true;
                    elim[0] = b;
                    let mut ne = 1;
                    let mut next = self.etree[b];
                    while let Some(ni) = next {
                        if ni >= k || y_used[ni] {
                            break;
                        }
                        y_used[ni] = true;
                        elim[ne] = ni;
                        ne += 1;
                        next = self.etree[ni];
                    }
                    while ne > 0 {
                        ne -= 1;
                        y_idx[nnz_y] = elim[ne];
                        nnz_y += 1;
                    }
                }
            }
            for t in (0..nnz_y).rev() {
                let c = y_idx[t];
                let slot = next_space[c];
                let yc = y_vals[c];
                for j in self.lp[c]..slot {
                    y_vals[self.li[j]] -= self.lx[j] * yc;
                }
                self.li[slot] = k;
                self.lx[slot] = yc * self.dinv[c];
                self.d[k] -= yc * self.lx[slot];
                next_space[c] += 1;
                y_vals[c] = 0.0;
                y_used[c] = false;
            }
            if self.d[k] * signs[k] <= eps {
                self.d[k] = signs[k] * delta;
                self.regularized += 1;
            }
            if self.d[k] == 0.0 || !self.d[k].is_finite() {
                return Err(LdlError::ZeroPivot(k));
            }
            self.dinv[k] = 1.0 / self.d[k];
        }
        Ok(())
    }

    /// Solves in place.
    pub fn solve(&self, x: &mut [f64]) {
        for i in 0..self.n {
            let xi = x[i];
            for j in self.lp[i]..self.lp[i + 1] {
                x[self.li[j]] -= self.lx[j] * xi;
            }
        }
        for i in 0..self.n {
            x[i] *= self.dinv[i];
        }
        for i in (0..self.n).rev() {
            let mut acc = x[i];
            for j in self.lp[i]..self.lp[i + 1] {
                acc -= self.lx[j] * x[self.li[j]];
            }
            x[i] = acc;
        }
    }
}

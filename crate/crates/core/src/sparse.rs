//! Small sparse and banded linear algebra used by the grid operators and the
//! implicit solvers: CSR matrices assembled from triplets, a banded LU
//! without pivoting, and Krylov iterations (CG, preconditioned BiCGSTAB).

use crate::error::{Error, Result};

/// Compressed sparse row matrix.
#[derive(Debug, Clone, PartialEq)]
pub struct Csr {
    pub nrows: usize,
    pub ncols: usize,
    pub indptr: Vec<usize>,
    pub indices: Vec<usize>,
    pub values: Vec<f64>,
}

/// Triplet accumulator; duplicate entries are summed on conversion.
#[derive(Debug, Clone)]
pub struct Triplets {
    nrows: usize,
    ncols: usize,
    entries: Vec<(usize, usize, f64)>,
}

impl Triplets {
    pub fn new(nrows: usize, ncols: usize) -> Self {
        Self {
            nrows,
            ncols,
            entries: Vec::new(),
        }
    }

    pub fn push(&mut self, row: usize, col: usize, value: f64) {
        debug_assert!(row < self.nrows && col < self.ncols);
        if value != 0.0 {
            self.entries.push((row, col, value));
        }
    }

    pub fn into_csr(mut self) -> Csr {
        self.entries.sort_by_key(|a| (a.0, a.1));
        let mut indptr = vec![0usize; self.nrows + 1];
        let mut indices = Vec::with_capacity(self.entries.len());
        let mut values: Vec<f64> = Vec::with_capacity(self.entries.len());
        let mut last: Option<(usize, usize)> = None;
        for (r, c, v) in self.entries {
            if last == Some((r, c)) {
                *values.last_mut().unwrap() += v;
            } else {
                indices.push(c);
                values.push(v);
                indptr[r + 1] += 1;
                last = Some((r, c));
            }
        }
        for r in 0..self.nrows {
            indptr[r + 1] += indptr[r];
        }
        Csr {
            nrows: self.nrows,
            ncols: self.ncols,
            indptr,
            indices,
            values,
        }
    }
}

impl Csr {
    pub fn nnz(&self) -> usize {
        self.values.len()
    }

    pub fn row(&self, r: usize) -> impl Iterator<Item = (usize, f64)> + '_ {
        let span = self.indptr[r]..self.indptr[r + 1];
        self.indices[span.clone()]
            .iter()
            .copied()
            .zip(self.values[span].iter().copied())
    }

    pub fn matvec(&self, x: &[f64]) -> Vec<f64> {
        assert_eq!(x.len(), self.ncols);
        (0..self.nrows)
            .map(|r| self.row(r).map(|(c, v)| v * x[c]).sum())
            .collect()
    }

    pub fn matvec_transpose(&self, x: &[f64]) -> Vec<f64> {
        assert_eq!(x.len(), self.nrows);
        let mut y = vec![0.0; self.ncols];
        for (r, &xr) in x.iter().enumerate() {
            if xr != 0.0 {
                for (c, v) in self.row(r) {
                    y[c] += v * xr;
                }
            }
        }
        y
    }

    pub fn transpose(&self) -> Csr {
        let mut t = Triplets::new(self.ncols, self.nrows);
        for r in 0..self.nrows {
            for (c, v) in self.row(r) {
                t.push(c, r, v);
            }
        }
        t.into_csr()
    }

    /// Sparse product `self * rhs`.
    pub fn matmul(&self, rhs: &Csr) -> Csr {
        assert_eq!(self.ncols, rhs.nrows);
        let mut t = Triplets::new(self.nrows, rhs.ncols);
        let mut acc = vec![0.0; rhs.ncols];
        let mut touched = Vec::new();
        let mut mark = vec![false; rhs.ncols];
        for r in 0..self.nrows {
            for (k, a) in self.row(r) {
                for (c, b) in rhs.row(k) {
                    if !mark[c] {
                        mark[c] = true;
                        touched.push(c);
                    }
                    acc[c] += a * b;
                }
            }
            for &c in &touched {
                t.push(r, c, acc[c]);
                acc[c] = 0.0;
                mark[c] = false;
            }
            touched.clear();
        }
        t.into_csr()
    }

    /// `alpha * self + beta * other`.
    pub fn add_scaled(&self, alpha: f64, other: &Csr, beta: f64) -> Csr {
        assert_eq!((self.nrows, self.ncols), (other.nrows, other.ncols));
        let mut t = Triplets::new(self.nrows, self.ncols);
        for r in 0..self.nrows {
            for (c, v) in self.row(r) {
                t.push(r, c, alpha * v);
            }
            for (c, v) in other.row(r) {
                t.push(r, c, beta * v);
            }
        }
        t.into_csr()
    }

    /// Lower and upper bandwidths.
    pub fn bandwidths(&self) -> (usize, usize) {
        let mut kl = 0;
        let mut ku = 0;
        for r in 0..self.nrows {
            for (c, _) in self.row(r) {
                if c < r {
                    kl = kl.max(r - c);
                } else {
                    ku = ku.max(c - r);
                }
            }
        }
        (kl, ku)
    }
}

/// Square banded matrix, row-major band storage.
#[derive(Debug, Clone)]
pub struct Banded {
    pub n: usize,
    pub kl: usize,
    pub ku: usize,
    data: Vec<f64>,
}

impl Banded {
    pub fn zeros(n: usize, kl: usize, ku: usize) -> Self {
        Self {
            n,
            kl,
            ku,
            data: vec![0.0; n * (kl + ku + 1)],
        }
    }

    #[inline]
    fn width(&self) -> usize {
        self.kl + self.ku + 1
    }

    #[inline]
    fn idx(&self, r: usize, c: usize) -> usize {
        debug_assert!(c + self.kl >= r && c <= r + self.ku);
        r * self.width() + (c + self.kl - r)
    }

    pub fn get(&self, r: usize, c: usize) -> f64 {
        if c + self.kl < r || c > r + self.ku {
            0.0
        } else {
            self.data[self.idx(r, c)]
        }
    }

    #[inline]
    pub fn add(&mut self, r: usize, c: usize, v: f64) {
        let i = self.idx(r, c);
        self.data[i] += v;
    }

    pub fn add_csr(&mut self, m: &Csr, scale: f64) {
        for r in 0..m.nrows {
            for (c, v) in m.row(r) {
                self.add(r, c, scale * v);
            }
        }
    }

    /// Accumulates `Aᵀ diag(w) A` for a sparse `A` whose column count is `n`.
    pub fn add_weighted_gram(&mut self, a: &Csr, weights: &[f64]) {
        assert_eq!(a.ncols, self.n);
        assert_eq!(a.nrows, weights.len());
        for (r, &w) in weights.iter().enumerate() {
            if w == 0.0 {
                continue;
            }
            let span = a.indptr[r]..a.indptr[r + 1];
            let cols = &a.indices[span.clone()];
            let vals = &a.values[span];
            for (p, &cp) in cols.iter().enumerate() {
                let wp = w * vals[p];
                for (q, &cq) in cols.iter().enumerate() {
                    self.add(cp, cq, wp * vals[q]);
                }
            }
        }
    }

    pub fn matvec(&self, x: &[f64]) -> Vec<f64> {
        let w = self.width();
        (0..self.n)
            .map(|r| {
                let lo = r.saturating_sub(self.kl);
                let hi = (r + self.ku).min(self.n - 1);
                let row = &self.data[r * w..(r + 1) * w];
                dot(&row[lo + self.kl - r..=hi + self.kl - r], &x[lo..=hi])
            })
            .collect()
    }

    /// In-place LU factorization without pivoting. Valid for matrices whose
    /// symmetric part is positive definite and for M-matrices.
    pub fn factor(mut self) -> Result<BandedLu> {
        let n = self.n;
        let (kl, ku) = (self.kl, self.ku);
        let w = self.width();
        for k in 0..n {
            let pivot = self.data[k * w + kl];
            if !(pivot.abs() > 1e-300) || !pivot.is_finite() {
                return Err(Error::LinearSolver {
                    solver: "banded LU",
                    iterations: k,
                    residual: pivot,
                });
            }
            let last = (k + kl).min(n - 1);
            let ucol = (k + ku).min(n - 1);
            for r in k + 1..=last {
                let lrk = self.data[r * w + (k + kl - r)] / pivot;
                if lrk == 0.0 {
                    continue;
                }
                self.data[r * w + (k + kl - r)] = lrk;
                let (head, tail) = self.data.split_at_mut(r * w);
                let len = ucol - k;
                let src = &head[k * w + kl + 1..k * w + kl + 1 + len];
                let dst = &mut tail[k + 1 + kl - r..k + 1 + kl - r + len];
                for (d, s) in dst.iter_mut().zip(src) {
                    *d -= lrk * s;
                }
            }
        }
        Ok(BandedLu { lu: self })
    }
}

/// Factors produced by [`Banded::factor`].
#[derive(Debug, Clone)]
pub struct BandedLu {
    lu: Banded,
}

impl BandedLu {
    pub fn solve(&self, b: &[f64]) -> Vec<f64> {
        let m = &self.lu;
        let (n, kl, ku, w) = (m.n, m.kl, m.ku, m.width());
        let mut x = b.to_vec();
        for r in 0..n {
            let lo = r.saturating_sub(kl);
            let row = &m.data[r * w..(r + 1) * w];
            let s = dot(&row[lo + kl - r..kl], &x[lo..r]);
            x[r] -= s;
        }
        for r in (0..n).rev() {
            let hi = (r + ku).min(n - 1);
            let row = &m.data[r * w..(r + 1) * w];
            let s = dot(&row[kl + 1..kl + 1 + hi - r], &x[r + 1..=hi]);
            x[r] = (x[r] - s) / row[kl];
        }
        x
    }
}

/// Dot product with four independent partial sums.
pub(crate) fn dot(a: &[f64], b: &[f64]) -> f64 {
    let n = a.len().min(b.len());
    let (a, b) = (&a[..n], &b[..n]);
    let mut acc = [0.0; 4];
    let (ca, cb) = (a.chunks_exact(4), b.chunks_exact(4));
    let tail: f64 = ca
        .remainder()
        .iter()
        .zip(cb.remainder())
        .map(|(x, y)| x * y)
        .sum();
    for (x, y) in ca.zip(cb) {
        for k in 0..4 {
            acc[k] += x[k] * y[k];
        }
    }
    (acc[0] + acc[1]) + (acc[2] + acc[3]) + tail
}

fn norm(a: &[f64]) -> f64 {
    dot(a, a).sqrt()
}

/// Outcome of an iterative solve.
#[derive(Debug, Clone, Copy)]
pub struct Convergence {
    pub iterations: usize,
    pub relative_residual: f64,
}

/// Conjugate gradients for a symmetric positive (semi)definite operator.
/// For singular operators the right-hand side must lie in the range.
pub fn conjugate_gradient<F>(
    apply: F,
    b: &[f64],
    x: &mut [f64],
    rel_tol: f64,
    max_iters: usize,
) -> Result<Convergence>
where
    F: Fn(&[f64]) -> Vec<f64>,
{
    let bnorm = norm(b);
    if bnorm == 0.0 {
        x.iter_mut().for_each(|v| *v = 0.0);
        return Ok(Convergence {
            iterations: 0,
            relative_residual: 0.0,
        });
    }
    let ax = apply(x);
    let mut r: Vec<f64> = b.iter().zip(&ax).map(|(b, a)| b - a).collect();
    let mut p = r.clone();
    let mut rr = dot(&r, &r);
    for it in 0..max_iters {
        if rr.sqrt() <= rel_tol * bnorm {
            return Ok(Convergence {
                iterations: it,
                relative_residual: rr.sqrt() / bnorm,
            });
        }
        let ap = apply(&p);
        let pap = dot(&p, &ap);
        if pap <= 0.0 {
            break;
        }
        let alpha = rr / pap;
        for i in 0..x.len() {
            x[i] += alpha * p[i];
            r[i] -= alpha * ap[i];
        }
        let rr_new = dot(&r, &r);
        let beta = rr_new / rr;
        rr = rr_new;
        for i in 0..p.len() {
            p[i] = r[i] + beta * p[i];
        }
    }
    let rel = rr.sqrt() / bnorm;
    if rel <= rel_tol {
        return Ok(Convergence {
            iterations: max_iters,
            relative_residual: rel,
        });
    }
    Err(Error::LinearSolver {
        solver: "conjugate gradient",
        iterations: max_iters,
        residual: rel,
    })
}

/// Right-preconditioned BiCGSTAB. Returns `Err` on breakdown or when the
/// tolerance is not met within `max_iters`; `x` then holds the last iterate.
pub fn bicgstab<A, P>(
    apply: A,
    precond: P,
    b: &[f64],
    x: &mut [f64],
    rel_tol: f64,
    max_iters: usize,
) -> Result<Convergence>
where
    A: Fn(&[f64]) -> Vec<f64>,
    P: Fn(&[f64]) -> Vec<f64>,
{
    let n = b.len();
    let bnorm = norm(b);
    if bnorm == 0.0 {
        x.iter_mut().for_each(|v| *v = 0.0);
        return Ok(Convergence {
            iterations: 0,
            relative_residual: 0.0,
        });
    }
    let ax = apply(x);
    let mut r: Vec<f64> = b.iter().zip(&ax).map(|(b, a)| b - a).collect();
    let r0 = r.clone();
    let mut rho = 1.0;
    let mut alpha = 1.0;
    let mut omega = 1.0;
    let mut v = vec![0.0; n];
    let mut p = vec![0.0; n];
    let fail = |it: usize, res: f64| Error::LinearSolver {
        solver: "BiCGSTAB",
        iterations: it,
        residual: res,
    };
    for it in 0..max_iters {
        let rel = norm(&r) / bnorm;
        if rel <= rel_tol {
            return Ok(Convergence {
                iterations: it,
                relative_residual: rel,
            });
        }
        let rho_new = dot(&r0, &r);
        if rho_new == 0.0 || !rho_new.is_finite() {
            return Err(fail(it, rel));
        }
        let beta = (rho_new / rho) * (alpha / omega);
        rho = rho_new;
        for i in 0..n {
            p[i] = r[i] + beta * (p[i] - omega * v[i]);
        }
        let phat = precond(&p);
        v = apply(&phat);
        let r0v = dot(&r0, &v);
        if r0v == 0.0 {
            return Err(fail(it, rel));
        }
        alpha = rho / r0v;
        let s: Vec<f64> = r.iter().zip(&v).map(|(r, v)| r - alpha * v).collect();
        if norm(&s) / bnorm <= rel_tol {
            for i in 0..n {
                x[i] += alpha * phat[i];
            }
            return Ok(Convergence {
                iterations: it + 1,
                relative_residual: norm(&s) / bnorm,
            });
        }
        let shat = precond(&s);
        let t = apply(&shat);
        let tt = dot(&t, &t);
        if tt == 0.0 {
            return Err(fail(it, rel));
        }
        omega = dot(&t, &s) / tt;
        for i in 0..n {
            x[i] += alpha * phat[i] + omega * shat[i];
            r[i] = s[i] - omega * t[i];
        }
        if omega == 0.0 {
            return Err(fail(it, norm(&r) / bnorm));
        }
    }
    Err(fail(max_iters, norm(&r) / bnorm))
}

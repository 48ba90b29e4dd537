//! Sparse linear algebra used by the time integrator.
//!
//! Row-compressed matrices share their sparsity pattern through an `Arc`, so
//! operators assembled on the same background mesh can be added entrywise
//! without re-merging structure. Solvers report iteration counts and the final
//! relative residual in a [`SolverReport`].

use std::collections::VecDeque;
use std::sync::Arc;
use std::time::Instant;

use nalgebra::{DMatrix, DVector};
use rayon::prelude::*;
use thiserror::Error;

/// Row count above which matrix-vector products run on the rayon pool.
const PAR_ROWS: usize = 4096;

/// Largest system the dense oracle accepts.
pub const DENSE_LIMIT: usize = 2000;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum LinalgError {
    #[error("invalid argument: {0}")]
    InvalidArgument(String),
    #[error("solver did not converge after {} iterations (relative residual {:.3e})", .0.iterations, .0.final_residual)]
    NonConvergence(SolverReport),
    #[error("solver breakdown: {0}")]
    Breakdown(String),
    #[error("matrix is not positive definite (pivot {pivot} = {value:.3e})")]
    NotPositiveDefinite { pivot: usize, value: f64 },
}

#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct SolverReport {
    pub iterations: usize,
    /// Residual relative to the right-hand side norm.
    pub final_residual: f64,
    pub converged: bool,
    pub wall_time: f64,
}

/// Column structure of a CSR matrix, shared between operators.
#[derive(Debug, Clone, PartialEq)]
pub struct CsrPattern {
    pub nrows: usize,
    pub ncols: usize,
    pub row_ptr: Vec<usize>,
    pub col_idx: Vec<usize>,
}

impl CsrPattern {
    /// Builds a pattern from per-row column lists; columns are sorted and deduplicated.
    pub fn from_rows(ncols: usize, mut rows: Vec<Vec<usize>>) -> Self {
        let mut row_ptr = Vec::with_capacity(rows.len() + 1);
        let mut col_idx = Vec::new();
        row_ptr.push(0);
        for cols in rows.iter_mut() {
            cols.sort_unstable();
            cols.dedup();
            debug_assert!(cols.last().map_or(true, |&c| c < ncols));
            col_idx.extend_from_slice(cols);
            row_ptr.push(col_idx.len());
        }
        CsrPattern {
            nrows: rows.len(),
            ncols,
            row_ptr,
            col_idx,
        }
    }

    pub fn nnz(&self) -> usize {
        self.col_idx.len()
    }

    /// Position of `(row, col)` in the value array.
    #[inline]
    pub fn find(&self, row: usize, col: usize) -> Option<usize> {
        let start = self.row_ptr[row];
        let end = self.row_ptr[row + 1];
        self.col_idx[start..end]
            .binary_search(&col)
            .ok()
            .map(|k| start + k)
    }
}

#[derive(Debug, Clone)]
pub struct CsrMatrix {
    pattern: Arc<CsrPattern>,
    values: Vec<f64>,
}

impl CsrMatrix {
    pub fn zeros(pattern: Arc<CsrPattern>) -> Self {
        let nnz = pattern.nnz();
        CsrMatrix {
            pattern,
            values: vec![0.0; nnz],
        }
    }

    /// Sums duplicate entries.
    pub fn from_triplets(nrows: usize, ncols: usize, triplets: &[(usize, usize, f64)]) -> Self {
        let mut rows = vec![Vec::new(); nrows];
        for &(i, j, _) in triplets {
            rows[i].push(j);
        }
        let mut m = CsrMatrix::zeros(Arc::new(CsrPattern::from_rows(ncols, rows)));
        for &(i, j, v) in triplets {
            m.add(i, j, v);
        }
        m
    }

    pub fn identity(n: usize) -> Self {
        let trip: Vec<_> = (0..n).map(|i| (i, i, 1.0)).collect();
        CsrMatrix::from_triplets(n, n, &trip)
    }

    pub fn from_dense(a: &DMatrix<f64>) -> Self {
        let mut trip = Vec::new();
        for i in 0..a.nrows() {
            for j in 0..a.ncols() {
                if a[(i, j)] != 0.0 {
                    trip.push((i, j, a[(i, j)]));
                }
            }
        }
        CsrMatrix::from_triplets(a.nrows(), a.ncols(), &trip)
    }

    pub fn pattern(&self) -> &Arc<CsrPattern> {
        &self.pattern
    }

    pub fn nrows(&self) -> usize {
        self.pattern.nrows
    }

    pub fn ncols(&self) -> usize {
        self.pattern.ncols
    }

    pub fn nnz(&self) -> usize {
        self.values.len()
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn values_mut(&mut self) -> &mut [f64] {
        &mut self.values
    }

    /// Adds `v` to entry `(i, j)`.
    ///
    /// # Panics
    ///
    /// Panics if `(i, j)` is not part of the sparsity pattern.
    #[inline]
    pub fn add(&mut self, i: usize, j: usize, v: f64) {
        match self.pattern.find(i, j) {
            Some(k) => self.values[k] += v,
            None => panic!("entry ({i}, {j}) outside sparsity pattern"),
        }
    }

    pub fn get(&self, i: usize, j: usize) -> f64 {
        self.pattern.find(i, j).map_or(0.0, |k| self.values[k])
    }

    pub fn row(&self, i: usize) -> impl Iterator<Item = (usize, f64)> + '_ {
        let r = self.pattern.row_ptr[i]..self.pattern.row_ptr[i + 1];
        self.pattern.col_idx[r.clone()]
            .iter()
            .copied()
            .zip(self.values[r].iter().copied())
    }

    pub fn set_row(&mut self, i: usize, f: impl Fn(usize) -> f64) {
        let r = self.pattern.row_ptr[i]..self.pattern.row_ptr[i + 1];
        for k in r {
            self.values[k] = f(self.pattern.col_idx[k]);
        }
    }

    pub fn scale(&mut self, alpha: f64) {
        self.values.iter_mut().for_each(|v| *v *= alpha);
    }

    /// `self += alpha * other`; both must share the same pattern.
    pub fn axpy(&mut self, alpha: f64, other: &CsrMatrix) {
        assert!(
            Arc::ptr_eq(&self.pattern, &other.pattern) || *self.pattern == *other.pattern,
            "axpy on matrices with different sparsity patterns"
        );
        self.values
            .iter_mut()
            .zip(&other.values)
            .for_each(|(a, b)| *a += alpha * b);
    }

    pub fn diagonal(&self) -> Vec<f64> {
        (0..self.nrows()).map(|i| self.get(i, i)).collect()
    }

    /// `y = A x`
    pub fn mul_vec_into(&self, x: &[f64], y: &mut [f64]) {
        assert_eq!(x.len(), self.ncols());
        assert_eq!(y.len(), self.nrows());
        let p = &*self.pattern;
        let row = |i: usize| -> f64 {
            let mut s = 0.0;
            for k in p.row_ptr[i]..p.row_ptr[i + 1] {
                s += self.values[k] * x[p.col_idx[k]];
            }
            s
        };
        if self.nrows() >= PAR_ROWS {
            y.par_iter_mut().enumerate().for_each(|(i, yi)| *yi = row(i));
        } else {
            y.iter_mut().enumerate().for_each(|(i, yi)| *yi = row(i));
        }
    }

    pub fn mul_vec(&self, x: &[f64]) -> Vec<f64> {
        let mut y = vec![0.0; self.nrows()];
        self.mul_vec_into(x, &mut y);
        y
    }

    /// `y = Aᵀ x`
    pub fn tr_mul_vec(&self, x: &[f64]) -> Vec<f64> {
        assert_eq!(x.len(), self.nrows());
        let p = &*self.pattern;
        let mut y = vec![0.0; self.ncols()];
        for i in 0..self.nrows() {
            let xi = x[i];
            if xi == 0.0 {
                continue;
            }
            for k in p.row_ptr[i]..p.row_ptr[i + 1] {
                y[p.col_idx[k]] += self.values[k] * xi;
            }
        }
        y
    }

    pub fn transpose(&self) -> CsrMatrix {
        let mut trip = Vec::with_capacity(self.nnz());
        for i in 0..self.nrows() {
            for (j, v) in self.row(i) {
                trip.push((j, i, v));
            }
        }
        CsrMatrix::from_triplets(self.ncols(), self.nrows(), &trip)
    }

    /// Largest `|A_ij - A_ji|` over stored entries.
    pub fn max_asymmetry(&self) -> f64 {
        let mut worst: f64 = 0.0;
        for i in 0..self.nrows() {
            for (j, v) in self.row(i) {
                worst = worst.max((v - self.get(j, i)).abs());
            }
        }
        worst
    }

    pub fn max_abs(&self) -> f64 {
        self.values.iter().fold(0.0, |m, v| m.max(v.abs()))
    }

    pub fn to_dense(&self) -> DMatrix<f64> {
        let mut d = DMatrix::zeros(self.nrows(), self.ncols());
        for i in 0..self.nrows() {
            for (j, v) in self.row(i) {
                d[(i, j)] += v;
            }
        }
        d
    }
}

/// Anything that can apply `y = A x`.
pub trait LinearOperator {
    fn dim(&self) -> usize;
    fn apply(&self, x: &[f64], y: &mut [f64]);
}

impl LinearOperator for CsrMatrix {
    fn dim(&self) -> usize {
        self.nrows()
    }

    fn apply(&self, x: &[f64], y: &mut [f64]) {
        self.mul_vec_into(x, y)
    }
}

pub trait Preconditioner {
    /// `z = P⁻¹ r`
    fn apply(&self, r: &[f64], z: &mut [f64]);
}

pub struct IdentityPreconditioner;

impl Preconditioner for IdentityPreconditioner {
    fn apply(&self, r: &[f64], z: &mut [f64]) {
        z.copy_from_slice(r);
    }
}

#[derive(Debug, Clone)]
pub struct JacobiPreconditioner {
    inv_diag: Vec<f64>,
}

impl JacobiPreconditioner {
    pub fn new(a: &CsrMatrix) -> Result<Self, LinalgError> {
        Self::from_diagonal(&a.diagonal())
    }

    pub fn from_diagonal(diag: &[f64]) -> Result<Self, LinalgError> {
        let inv_diag = diag
            .iter()
            .enumerate()
            .map(|(i, &d)| {
                if d > 0.0 && d.is_finite() {
                    Ok(1.0 / d)
                } else {
                    Err(LinalgError::InvalidArgument(format!(
                        "diagonal entry {i} is {d}, Jacobi needs positive diagonal"
                    )))
                }
            })
            .collect::<Result<_, _>>()?;
        Ok(JacobiPreconditioner { inv_diag })
    }
}

impl Preconditioner for JacobiPreconditioner {
    fn apply(&self, r: &[f64], z: &mut [f64]) {
        for ((zi, ri), di) in z.iter_mut().zip(r).zip(&self.inv_diag) {
            *zi = ri * di;
        }
    }
}

pub fn jacobi_preconditioner(a: &CsrMatrix) -> Result<JacobiPreconditioner, LinalgError> {
    JacobiPreconditioner::new(a)
}

#[inline]
pub fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

#[inline]
pub fn norm2(a: &[f64]) -> f64 {
    dot(a, a).sqrt()
}

/// Preconditioned conjugate gradients. `x` holds the initial guess on entry.
///
/// Stops when `‖b - A x‖ ≤ tol ‖b‖`.
pub fn pcg<A: LinearOperator + ?Sized, P: Preconditioner + ?Sized>(
    a: &A,
    b: &[f64],
    x: &mut [f64],
    precond: &P,
    tol: f64,
    max_iters: usize,
) -> Result<SolverReport, LinalgError> {
    pcg_monitored(a, b, x, precond, tol, max_iters, |_, _| {})
}

/// [`pcg`] with a callback invoked after every iteration with `(iteration, x)`.
pub fn pcg_monitored<A, P, F>(
    a: &A,
    b: &[f64],
    x: &mut [f64],
    precond: &P,
    tol: f64,
    max_iters: usize,
    mut monitor: F,
) -> Result<SolverReport, LinalgError>
where
    A: LinearOperator + ?Sized,
    P: Preconditioner + ?Sized,
    F: FnMut(usize, &[f64]),
{
    let n = a.dim();
    check_dims(n, b, x, tol)?;
    let start = Instant::now();
    let bnorm = norm2(b);
    if bnorm == 0.0 {
        x.iter_mut().for_each(|v| *v = 0.0);
        return Ok(SolverReport {
            iterations: 0,
            final_residual: 0.0,
            converged: true,
            wall_time: start.elapsed().as_secs_f64(),
        });
    }
    let mut r = vec![0.0; n];
    a.apply(x, &mut r);
    for (ri, bi) in r.iter_mut().zip(b) {
        *ri = bi - *ri;
    }
    let mut rel = norm2(&r) / bnorm;
    if rel <= tol {
        return Ok(SolverReport {
            iterations: 0,
            final_residual: rel,
            converged: true,
            wall_time: start.elapsed().as_secs_f64(),
        });
    }
    let mut z = vec![0.0; n];
    precond.apply(&r, &mut z);
    let mut p = z.clone();
    let mut ap = vec![0.0; n];
    let mut rz = dot(&r, &z);
    for it in 1..=max_iters {
        a.apply(&p, &mut ap);
        let pap = dot(&p, &ap);
        if !(pap > 0.0) {
            return Err(LinalgError::Breakdown(format!(
                "pᵀAp = {pap:.3e} at iteration {it}; operator not SPD"
            )));
        }
        let alpha = rz / pap;
        for i in 0..n {
            x[i] += alpha * p[i];
            r[i] -= alpha * ap[i];
        }
        monitor(it, x);
        rel = norm2(&r) / bnorm;
        if !rel.is_finite() {
            return Err(LinalgError::Breakdown(format!("non-finite residual at iteration {it}")));
        }
        if rel <= tol {
            return Ok(SolverReport {
                iterations: it,
                final_residual: rel,
                converged: true,
                wall_time: start.elapsed().as_secs_f64(),
            });
        }
        precond.apply(&r, &mut z);
        let rz_new = dot(&r, &z);
        let beta = rz_new / rz;
        rz = rz_new;
        for i in 0..n {
            p[i] = z[i] + beta * p[i];
        }
    }
    Err(LinalgError::NonConvergence(SolverReport {
        iterations: max_iters,
        final_residual: rel,
        converged: false,
        wall_time: start.elapsed().as_secs_f64(),
    }))
}

/// Right-preconditioned BiCGStab for nonsymmetric systems. Same stopping rule as [`pcg`].
pub fn bicgstab<A: LinearOperator + ?Sized, P: Preconditioner + ?Sized>(
    a: &A,
    b: &[f64],
    x: &mut [f64],
    precond: &P,
    tol: f64,
    max_iters: usize,
) -> Result<SolverReport, LinalgError> {
    let n = a.dim();
    check_dims(n, b, x, tol)?;
    let start = Instant::now();
    let report = |iterations, final_residual, converged| SolverReport {
        iterations,
        final_residual,
        converged,
        wall_time: start.elapsed().as_secs_f64(),
    };
    let bnorm = norm2(b);
    if bnorm == 0.0 {
        x.iter_mut().for_each(|v| *v = 0.0);
        return Ok(report(0, 0.0, true));
    }
    let mut r = vec![0.0; n];
    a.apply(x, &mut r);
    for (ri, bi) in r.iter_mut().zip(b) {
        *ri = bi - *ri;
    }
    let mut rel = norm2(&r) / bnorm;
    if rel <= tol {
        return Ok(report(0, rel, true));
    }
    let r_hat = r.clone();
    let (mut rho, mut alpha, mut omega) = (1.0, 1.0, 1.0);
    let mut v = vec![0.0; n];
    let mut p = vec![0.0; n];
    let mut p_hat = vec![0.0; n];
    let mut s = vec![0.0; n];
    let mut s_hat = vec![0.0; n];
    let mut t = vec![0.0; n];
    for it in 1..=max_iters {
        let rho_new = dot(&r_hat, &r);
        if rho_new == 0.0 || omega == 0.0 {
            return Err(LinalgError::Breakdown(format!("rho or omega vanished at iteration {it}")));
        }
        let beta = (rho_new / rho) * (alpha / omega);
        rho = rho_new;
        for i in 0..n {
            p[i] = r[i] + beta * (p[i] - omega * v[i]);
        }
        precond.apply(&p, &mut p_hat);
        a.apply(&p_hat, &mut v);
        let rv = dot(&r_hat, &v);
        if rv == 0.0 {
            return Err(LinalgError::Breakdown(format!("r̂ᵀv vanished at iteration {it}")));
        }
        alpha = rho / rv;
        for i in 0..n {
            s[i] = r[i] - alpha * v[i];
        }
        let snorm = norm2(&s) / bnorm;
        if snorm <= tol {
            for i in 0..n {
                x[i] += alpha * p_hat[i];
            }
            return Ok(report(it, snorm, true));
        }
        precond.apply(&s, &mut s_hat);
        a.apply(&s_hat, &mut t);
        let tt = dot(&t, &t);
        omega = if tt > 0.0 { dot(&t, &s) / tt } else { 0.0 };
        for i in 0..n {
            x[i] += alpha * p_hat[i] + omega * s_hat[i];
            r[i] = s[i] - omega * t[i];
        }
        rel = norm2(&r) / bnorm;
        if !rel.is_finite() {
            return Err(LinalgError::Breakdown(format!("non-finite residual at iteration {it}")));
        }
        if rel <= tol {
            return Ok(report(it, rel, true));
        }
    }
    Err(LinalgError::NonConvergence(report(max_iters, rel, false)))
}

/// Picks CG for symmetric matrices and BiCGStab otherwise.
pub fn solve_auto(
    a: &CsrMatrix,
    b: &[f64],
    x: &mut [f64],
    tol: f64,
    max_iters: usize,
) -> Result<SolverReport, LinalgError> {
    let pre = JacobiPreconditioner::new(a)?;
    if a.max_asymmetry() <= 1e-12 * a.max_abs().max(1.0) {
        pcg(a, b, x, &pre, tol, max_iters)
    } else {
        bicgstab(a, b, x, &pre, tol, max_iters)
    }
}

fn check_dims(n: usize, b: &[f64], x: &[f64], tol: f64) -> Result<(), LinalgError> {
    if b.len() != n || x.len() != n {
        return Err(LinalgError::InvalidArgument(format!(
            "dimension mismatch: operator {n}, rhs {}, x {}",
            b.len(),
            x.len()
        )));
    }
    if !(tol > 0.0) {
        return Err(LinalgError::InvalidArgument(format!("tolerance must be positive, got {tol}")));
    }
    Ok(())
}

/// Reverse Cuthill-McKee ordering of a structurally symmetric matrix.
/// Returns `perm` with `perm[new] = old`.
pub fn reverse_cuthill_mckee(a: &CsrMatrix) -> Vec<usize> {
    let n = a.nrows();
    let degree: Vec<usize> = (0..n).map(|i| a.row(i).count()).collect();
    let mut visited = vec![false; n];
    let mut order = Vec::with_capacity(n);
    let mut queue = VecDeque::new();
    while order.len() < n {
        // start each component from an unvisited node of minimum degree
        let seed = (0..n)
            .filter(|&i| !visited[i])
            .min_by_key(|&i| (degree[i], i))
            .unwrap();
        visited[seed] = true;
        queue.push_back(seed);
        while let Some(i) = queue.pop_front() {
            order.push(i);
            let mut nbrs: Vec<usize> = a.row(i).map(|(j, _)| j).filter(|&j| !visited[j]).collect();
            nbrs.sort_by_key(|&j| (degree[j], j));
            for j in nbrs {
                visited[j] = true;
                queue.push_back(j);
            }
        }
    }
    order.reverse();
    order
}

/// Banded Cholesky factorization `P A Pᵀ = L Lᵀ` under an RCM permutation.
#[derive(Debug, Clone)]
pub struct BandCholesky {
    n: usize,
    bw: usize,
    /// row-major band of L: row i stores columns i-bw ..= i
    band: Vec<f64>,
    perm: Vec<usize>,
}

impl BandCholesky {
    pub fn new(a: &CsrMatrix) -> Result<Self, LinalgError> {
        if a.nrows() != a.ncols() {
            return Err(LinalgError::InvalidArgument("band Cholesky needs a square matrix".into()));
        }
        let n = a.nrows();
        let perm = reverse_cuthill_mckee(a);
        let mut inv = vec![0; n];
        for (new, &old) in perm.iter().enumerate() {
            inv[old] = new;
        }
        let mut bw = 0;
        for i in 0..n {
            for (j, _) in a.row(i) {
                bw = bw.max(inv[i].abs_diff(inv[j]));
            }
        }
        let w = bw + 1;
        let mut band = vec![0.0; n * w];
        for i in 0..n {
            let pi = inv[i];
            for (j, v) in a.row(i) {
                let pj = inv[j];
                if pj <= pi {
                    band[pi * w + (pj + bw - pi)] += v;
                }
            }
        }
        for i in 0..n {
            let lo_i = i.saturating_sub(bw);
            for j in lo_i..=i {
                let lo = lo_i.max(j.saturating_sub(bw));
                let mut sum = band[i * w + (j + bw - i)];
                let ri = &band[i * w + (lo + bw - i)..i * w + (j + bw - i)];
                let rj = &band[j * w + (lo + bw - j)..j * w + bw];
                sum -= dot(ri, rj);
                if i == j {
                    if !(sum > 0.0) {
                        return Err(LinalgError::NotPositiveDefinite { pivot: i, value: sum });
                    }
                    band[i * w + bw] = sum.sqrt();
                } else {
                    band[i * w + (j + bw - i)] = sum / band[j * w + bw];
                }
            }
        }
        Ok(BandCholesky { n, bw, band, perm })
    }

    pub fn dim(&self) -> usize {
        self.n
    }

    pub fn bandwidth(&self) -> usize {
        self.bw
    }

    pub fn solve_in_place(&self, x: &mut [f64]) {
        let (n, bw, w) = (self.n, self.bw, self.bw + 1);
        let mut y: Vec<f64> = self.perm.iter().map(|&old| x[old]).collect();
        for i in 0..n {
            let lo = i.saturating_sub(bw);
            let row = &self.band[i * w + (lo + bw - i)..i * w + bw];
            let s = y[i] - dot(row, &y[lo..i]);
            y[i] = s / self.band[i * w + bw];
        }
        for i in (0..n).rev() {
            y[i] /= self.band[i * w + bw];
            let yi = y[i];
            let lo = i.saturating_sub(bw);
            for j in lo..i {
                y[j] -= self.band[i * w + (j + bw - i)] * yi;
            }
        }
        for (new, &old) in self.perm.iter().enumerate() {
            x[old] = y[new];
        }
    }
}

impl Preconditioner for BandCholesky {
    fn apply(&self, r: &[f64], z: &mut [f64]) {
        z.copy_from_slice(r);
        self.solve_in_place(z);
    }
}

/// Dense LU solve, used as a test oracle.
pub fn dense_solve(a: &DMatrix<f64>, b: &DVector<f64>) -> Result<DVector<f64>, LinalgError> {
    if a.nrows() > DENSE_LIMIT {
        return Err(LinalgError::InvalidArgument(format!(
            "dense fallback limited to {DENSE_LIMIT} unknowns, got {}",
            a.nrows()
        )));
    }
    a.clone()
        .lu()
        .solve(b)
        .ok_or_else(|| LinalgError::Breakdown("singular matrix in dense LU".into()))
}

/// Solver for the projection sub-step
///
/// ```text
/// M (u - u*) / dt + Bᵀ p = 0,   B u = 0
/// ```
///
/// on the free velocity dofs, with one pressure dof pinned to zero. The
/// Schur complement `S = B M⁻¹ Bᵀ` is solved by CG preconditioned with
/// a banded factorization of `B diag(M)⁻¹ Bᵀ`; inner mass solves are direct.
#[derive(Debug, Clone)]
pub struct DegenerateStokes {
    /// free index per velocity component for every node (None when that dof is constrained)
    free_of_dof: [Vec<Option<usize>>; 2],
    mass_free: [BandCholesky; 2],
    b: CsrMatrix,
    precond: BandCholesky,
    pinned: usize,
}

impl DegenerateStokes {
    /// `mass` is the scalar nodal mass matrix; velocity dofs are interleaved `2*node + c`
    /// and `constrained_dofs` flags each of them.
    pub fn new(
        mass: &CsrMatrix,
        b: &CsrMatrix,
        constrained_dofs: &[bool],
        pinned: usize,
    ) -> Result<Self, LinalgError> {
        let nn = mass.nrows();
        if constrained_dofs.len() != 2 * nn || b.ncols() != 2 * nn || pinned >= b.nrows() {
            return Err(LinalgError::InvalidArgument(
                "degenerate Stokes: inconsistent operator sizes".into(),
            ));
        }
        let mut lumped = vec![0.0; nn];
        for (i, l) in lumped.iter_mut().enumerate() {
            *l = mass.row(i).map(|(_, v)| v).sum();
        }
        let mut free_of_dof = [vec![None; nn], vec![None; nn]];
        let mut factors = Vec::with_capacity(2);
        for c in 0..2 {
            let mut nfree = 0;
            for i in 0..nn {
                if !constrained_dofs[2 * i + c] {
                    free_of_dof[c][i] = Some(nfree);
                    nfree += 1;
                }
            }
            let f = &free_of_dof[c];
            let mut trip = Vec::new();
            for i in 0..nn {
                for (j, v) in mass.row(i) {
                    if let (Some(fi), Some(fj)) = (f[i], f[j]) {
                        trip.push((fi, fj, v));
                    }
                }
            }
            factors.push(BandCholesky::new(&CsrMatrix::from_triplets(nfree, nfree, &trip))?);
        }
        let mass_free: [BandCholesky; 2] = factors.try_into().expect("two components");

        // B diag(M_L)^-1 Bᵀ restricted to free columns, pinned dof replaced by identity
        let np = b.nrows();
        let bt = b.transpose();
        let mut strip = Vec::new();
        for dof in 0..2 * nn {
            if constrained_dofs[dof] {
                continue;
            }
            let inv_m = 1.0 / lumped[dof / 2];
            let col: Vec<(usize, f64)> = bt.row(dof).filter(|&(q, _)| q != pinned).collect();
            for &(q1, v1) in &col {
                for &(q2, v2) in &col {
                    strip.push((q1, q2, v1 * v2 * inv_m));
                }
            }
        }
        strip.push((pinned, pinned, 1.0));
        let precond = BandCholesky::new(&CsrMatrix::from_triplets(np, np, &strip))?;
        Ok(DegenerateStokes {
            free_of_dof,
            mass_free,
            b: b.clone(),
            precond,
            pinned,
        })
    }

    fn mass_solve_free(&self, rhs: &[f64]) -> Vec<f64> {
        // rhs is a full velocity vector; constrained entries are ignored and zero in output
        let mut out = vec![0.0; rhs.len()];
        for c in 0..2 {
            let mut w = vec![0.0; self.mass_free[c].dim()];
            for (node, f) in self.free_of_dof[c].iter().enumerate() {
                if let Some(fi) = f {
                    w[*fi] = rhs[2 * node + c];
                }
            }
            self.mass_free[c].solve_in_place(&mut w);
            for (node, f) in self.free_of_dof[c].iter().enumerate() {
                if let Some(fi) = f {
                    out[2 * node + c] = w[*fi];
                }
            }
        }
        out
    }

    /// Projects `u_star`, returning `(u, report)`; `p` holds the initial pressure guess on
    /// entry and the solution on exit.
    ///
    /// Convergence: `‖B u‖ ≤ tol · scale`, where `scale` is typically `‖u*‖_M`.
    pub fn solve(
        &self,
        u_star: &[f64],
        dt: f64,
        tol: f64,
        scale: f64,
        p: &mut [f64],
        max_iters: usize,
    ) -> Result<(Vec<f64>, SolverReport), LinalgError> {
        let np = self.b.nrows();
        if p.len() != np || u_star.len() != self.b.ncols() {
            return Err(LinalgError::InvalidArgument("degenerate Stokes: size mismatch".into()));
        }
        let mut rhs = self.b.mul_vec(u_star);
        rhs.iter_mut().for_each(|v| *v /= dt);
        rhs[self.pinned] = 0.0;
        p[self.pinned] = 0.0;
        let schur = SchurOperator { s: self };
        let bnorm = norm2(&rhs);
        let report = if bnorm == 0.0 || scale == 0.0 {
            p.iter_mut().for_each(|v| *v = 0.0);
            SolverReport {
                converged: true,
                ..Default::default()
            }
        } else {
            // ‖B u‖ = dt ‖r‖ ≤ tol·scale
            let rel_tol = tol * scale / (dt * bnorm);
            let mut rep = pcg(&schur, &rhs, p, &self.precond, rel_tol, max_iters)?;
            rep.final_residual *= dt * bnorm / scale;
            rep
        };
        let bt_p = self.b.tr_mul_vec(p);
        let corr = self.mass_solve_free(&bt_p);
        let u = u_star
            .iter()
            .zip(&corr)
            .map(|(us, c)| us - dt * c)
            .collect();
        Ok((u, report))
    }
}

struct SchurOperator<'a> {
    s: &'a DegenerateStokes,
}

impl LinearOperator for SchurOperator<'_> {
    fn dim(&self) -> usize {
        self.s.b.nrows()
    }

    fn apply(&self, x: &[f64], y: &mut [f64]) {
        let mut xp = x.to_vec();
        xp[self.s.pinned] = 0.0;
        let bt = self.s.b.tr_mul_vec(&xp);
        let w = self.s.mass_solve_free(&bt);
        self.s.b.mul_vec_into(&w, y);
        y[self.s.pinned] = x[self.s.pinned];
    }
}

/// One-shot wrapper around [`DegenerateStokes`] returning `(u, p, report)`.
pub fn solve_degenerate_stokes(
    mass: &CsrMatrix,
    b: &CsrMatrix,
    constrained_dofs: &[bool],
    u_star: &[f64],
    dt: f64,
    tol: f64,
) -> Result<(Vec<f64>, Vec<f64>, SolverReport), LinalgError> {
    let solver = DegenerateStokes::new(mass, b, constrained_dofs, 0)?;
    let scale = mass_norm(mass, u_star);
    let mut p = vec![0.0; b.nrows()];
    let (u, rep) = solver.solve(u_star, dt, tol, scale, &mut p, 10_000)?;
    Ok((u, p, rep))
}

/// `sqrt(uᵀ M u)` for an interleaved velocity vector and scalar nodal mass.
pub fn mass_norm(mass: &CsrMatrix, u: &[f64]) -> f64 {
    let n = mass.nrows();
    let mut s = 0.0;
    for c in 0..2 {
        let comp: Vec<f64> = (0..n).map(|i| u[2 * i + c]).collect();
        s += dot(&comp, &mass.mul_vec(&comp));
    }
    s.max(0.0).sqrt()
}

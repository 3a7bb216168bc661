//! Small dense linear algebra: row-major matrices, Cholesky with a jitter
//! schedule, triangular solves and a cyclic Jacobi symmetric eigensolver.
//!
//! Sizes here are at most a few thousand (kernel matrices over the action
//! space, or `p x p` design matrices in diagnostic mode), so everything is
//! straightforward `O(n^3)` code without blocking.

use std::ops::{Index, IndexMut};

use rand::Rng;
use thiserror::Error;

use crate::scalar::{dot, Scalar};

#[derive(Debug, Error, Clone, PartialEq)]
pub enum LinalgError {
    #[error("dimension mismatch: expected {expected}, got {actual}")]
    DimensionMismatch { expected: usize, actual: usize },

    #[error("matrix is not square ({rows}x{cols})")]
    NotSquare { rows: usize, cols: usize },

    #[error("matrix is not positive definite (pivot {pivot} at row {row})")]
    NotPositiveDefinite { row: usize, pivot: f64 },

    #[error("matrix not factorizable after jitter schedule (last jitter {last_jitter:e})")]
    NotFactorizable { last_jitter: f64 },
}

#[derive(Debug, Clone, PartialEq)]
pub struct Matrix<F> {
    rows: usize,
    cols: usize,
    data: Vec<F>,
}

impl<F: Scalar> Matrix<F> {
    pub fn zeros(rows: usize, cols: usize) -> Self {
        Self { rows, cols, data: vec![F::zero(); rows * cols] }
    }

    pub fn identity(n: usize) -> Self {
        let mut m = Self::zeros(n, n);
        for i in 0..n {
            m[(i, i)] = F::one();
        }
        m
    }

    pub fn from_diag(diag: &[F]) -> Self {
        let mut m = Self::zeros(diag.len(), diag.len());
        for (i, &v) in diag.iter().enumerate() {
            m[(i, i)] = v;
        }
        m
    }

    pub fn from_vec(rows: usize, cols: usize, data: Vec<F>) -> Result<Self, LinalgError> {
        if data.len() != rows * cols {
            return Err(LinalgError::DimensionMismatch { expected: rows * cols, actual: data.len() });
        }
        Ok(Self { rows, cols, data })
    }

    /// Builds from nested rows; all rows must have equal length.
    pub fn from_rows(rows: &[Vec<F>]) -> Result<Self, LinalgError> {
        let cols = rows.first().map_or(0, Vec::len);
        let mut data = Vec::with_capacity(rows.len() * cols);
        for r in rows {
            if r.len() != cols {
                return Err(LinalgError::DimensionMismatch { expected: cols, actual: r.len() });
            }
            data.extend_from_slice(r);
        }
        Ok(Self { rows: rows.len(), cols, data })
    }

    pub fn random_normal<R: Rng + ?Sized>(rows: usize, cols: usize, rng: &mut R) -> Self {
        let data = (0..rows * cols).map(|_| F::standard_normal(rng)).collect();
        Self { rows, cols, data }
    }

    #[inline]
    pub fn rows(&self) -> usize {
        self.rows
    }

    #[inline]
    pub fn cols(&self) -> usize {
        self.cols
    }

    #[inline]
    pub fn is_square(&self) -> bool {
        self.rows == self.cols
    }

    #[inline]
    pub fn as_slice(&self) -> &[F] {
        &self.data
    }

    #[inline]
    pub fn as_mut_slice(&mut self) -> &mut [F] {
        &mut self.data
    }

    #[inline]
    pub fn row(&self, i: usize) -> &[F] {
        &self.data[i * self.cols..(i + 1) * self.cols]
    }

    #[inline]
    pub fn row_mut(&mut self, i: usize) -> &mut [F] {
        &mut self.data[i * self.cols..(i + 1) * self.cols]
    }

    pub fn to_rows(&self) -> Vec<Vec<F>> {
        (0..self.rows).map(|i| self.row(i).to_vec()).collect()
    }

    pub fn transpose(&self) -> Self {
        let mut t = Self::zeros(self.cols, self.rows);
        for i in 0..self.rows {
            for j in 0..self.cols {
                t[(j, i)] = self[(i, j)];
            }
        }
        t
    }

    pub fn matmul(&self, other: &Self) -> Result<Self, LinalgError> {
        if self.cols != other.rows {
            return Err(LinalgError::DimensionMismatch { expected: self.cols, actual: other.rows });
        }
        let mut out = Self::zeros(self.rows, other.cols);
        for i in 0..self.rows {
            for k in 0..self.cols {
                let a = self[(i, k)];
                if a == F::zero() {
                    continue;
                }
                let orow = other.row(k);
                for (o, &b) in out.row_mut(i).iter_mut().zip(orow) {
                    *o += a * b;
                }
            }
        }
        Ok(out)
    }

    pub fn matvec(&self, v: &[F]) -> Result<Vec<F>, LinalgError> {
        if v.len() != self.cols {
            return Err(LinalgError::DimensionMismatch { expected: self.cols, actual: v.len() });
        }
        Ok((0..self.rows).map(|i| dot(self.row(i), v)).collect())
    }

    pub fn trace(&self) -> F {
        (0..self.rows.min(self.cols)).map(|i| self[(i, i)]).sum()
    }

    pub fn diagonal(&self) -> Vec<F> {
        (0..self.rows.min(self.cols)).map(|i| self[(i, i)]).collect()
    }

    pub fn frobenius_norm(&self) -> F {
        self.data.iter().map(|&x| x * x).sum::<F>().sqrt()
    }

    pub fn max_abs(&self) -> F {
        self.data.iter().fold(F::zero(), |m, &x| m.max(x.abs()))
    }

    /// Largest `|a_ij - a_ji|`.
    pub fn max_asymmetry(&self) -> F {
        let mut worst = F::zero();
        for i in 0..self.rows {
            for j in (i + 1)..self.cols.min(self.rows) {
                worst = worst.max((self[(i, j)] - self[(j, i)]).abs());
            }
        }
        worst
    }

    /// Replaces the matrix with `(A + A^T) / 2`.
    pub fn symmetrize(&mut self) {
        let half = F::of(0.5);
        for i in 0..self.rows {
            for j in (i + 1)..self.cols {
                let v = (self[(i, j)] + self[(j, i)]) * half;
                self[(i, j)] = v;
                self[(j, i)] = v;
            }
        }
    }

    pub fn add_diag(&mut self, v: F) {
        for i in 0..self.rows.min(self.cols) {
            self[(i, i)] += v;
        }
    }

    pub fn scale(&mut self, s: F) {
        for x in &mut self.data {
            *x *= s;
        }
    }

    pub fn sub(&self, other: &Self) -> Result<Self, LinalgError> {
        if self.rows != other.rows || self.cols != other.cols {
            return Err(LinalgError::DimensionMismatch {
                expected: self.rows * self.cols,
                actual: other.rows * other.cols,
            });
        }
        let data = self.data.iter().zip(&other.data).map(|(&a, &b)| a - b).collect();
        Ok(Self { rows: self.rows, cols: self.cols, data })
    }

    /// Adds `alpha * v v^T`.
    pub fn add_outer(&mut self, alpha: F, v: &[F]) {
        for i in 0..self.rows {
            let s = alpha * v[i];
            if s == F::zero() {
                continue;
            }
            for (x, &vj) in self.row_mut(i).iter_mut().zip(v) {
                *x += s * vj;
            }
        }
    }
}

impl<F> Index<(usize, usize)> for Matrix<F> {
    type Output = F;

    #[inline]
    fn index(&self, (i, j): (usize, usize)) -> &F {
        &self.data[i * self.cols + j]
    }
}

impl<F> IndexMut<(usize, usize)> for Matrix<F> {
    #[inline]
    fn index_mut(&mut self, (i, j): (usize, usize)) -> &mut F {
        &mut self.data[i * self.cols + j]
    }
}

fn require_square<F: Scalar>(a: &Matrix<F>) -> Result<usize, LinalgError> {
    if !a.is_square() {
        return Err(LinalgError::NotSquare { rows: a.rows(), cols: a.cols() });
    }
    Ok(a.rows())
}

// ── Cholesky ────────────────────────────────────────────────────────────

/// Plain Cholesky `A = L L^T` of a symmetric positive definite matrix.
/// Only the lower triangle of `a` is read.
pub fn cholesky<F: Scalar>(a: &Matrix<F>) -> Result<Matrix<F>, LinalgError> {
    let n = require_square(a)?;
    let mut l = Matrix::zeros(n, n);
    for j in 0..n {
        let mut d = a[(j, j)];
        for k in 0..j {
            d -= l[(j, k)] * l[(j, k)];
        }
        if !(d > F::zero()) || !d.is_finite() {
            return Err(LinalgError::NotPositiveDefinite { row: j, pivot: d.as_f64() });
        }
        let djj = d.sqrt();
        l[(j, j)] = djj;
        for i in (j + 1)..n {
            let mut s = a[(i, j)];
            for k in 0..j {
                s -= l[(i, k)] * l[(j, k)];
            }
            l[(i, j)] = s / djj;
        }
    }
    Ok(l)
}

/// Lower-triangular factor of `K + jitter * I`.
#[derive(Debug, Clone, PartialEq)]
pub struct CholFactor<F> {
    pub lower: Matrix<F>,
    pub jitter: F,
}

impl<F: Scalar> CholFactor<F> {
    pub fn dim(&self) -> usize {
        self.lower.rows()
    }

    /// `L L^T`, i.e. the jittered matrix this factor represents.
    pub fn reconstruct(&self) -> Matrix<F> {
        self.lower.matmul(&self.lower.transpose()).expect("square factor")
    }

    /// Solves `(L L^T) x = b`.
    pub fn solve(&self, b: &[F]) -> Result<Vec<F>, LinalgError> {
        let y = solve_lower(&self.lower, b)?;
        solve_lower_transpose(&self.lower, &y)
    }

    pub fn log_det(&self) -> F {
        let two = F::of(2.0);
        (0..self.dim()).map(|i| two * self.lower[(i, i)].ln()).sum()
    }
}

/// Cholesky with an escalating diagonal jitter.
///
/// Tries jitter 0 first, then `1e-10 * trace/n` multiplied by ten per
/// attempt up to `1e-4 * trace/n`. An identically zero matrix factors to the
/// zero matrix with jitter 0.
pub fn chol<F: Scalar>(k: &Matrix<F>) -> Result<CholFactor<F>, LinalgError> {
    let n = require_square(k)?;
    if k.max_abs() == F::zero() {
        return Ok(CholFactor { lower: Matrix::zeros(n, n), jitter: F::zero() });
    }
    if let Ok(lower) = cholesky(k) {
        return Ok(CholFactor { lower, jitter: F::zero() });
    }
    let scale = (k.trace() / F::of_usize(n.max(1))).abs();
    let mut last = 0.0;
    for exp in -10..=-4 {
        let jitter = scale * F::of(10f64.powi(exp));
        last = jitter.as_f64();
        if jitter == F::zero() {
            continue;
        }
        let mut kj = k.clone();
        kj.add_diag(jitter);
        if let Ok(lower) = cholesky(&kj) {
            return Ok(CholFactor { lower, jitter });
        }
    }
    Err(LinalgError::NotFactorizable { last_jitter: last })
}

pub fn solve_lower<F: Scalar>(l: &Matrix<F>, b: &[F]) -> Result<Vec<F>, LinalgError> {
    let n = require_square(l)?;
    if b.len() != n {
        return Err(LinalgError::DimensionMismatch { expected: n, actual: b.len() });
    }
    let mut x = vec![F::zero(); n];
    for i in 0..n {
        let mut s = b[i];
        for k in 0..i {
            s -= l[(i, k)] * x[k];
        }
        x[i] = s / l[(i, i)];
    }
    Ok(x)
}

/// Solves `L^T x = b` for lower-triangular `L`.
pub fn solve_lower_transpose<F: Scalar>(l: &Matrix<F>, b: &[F]) -> Result<Vec<F>, LinalgError> {
    let n = require_square(l)?;
    if b.len() != n {
        return Err(LinalgError::DimensionMismatch { expected: n, actual: b.len() });
    }
    let mut x = vec![F::zero(); n];
    for i in (0..n).rev() {
        let mut s = b[i];
        for k in (i + 1)..n {
            s -= l[(k, i)] * x[k];
        }
        x[i] = s / l[(i, i)];
    }
    Ok(x)
}

/// Inverse of a symmetric positive definite matrix through its Cholesky factor.
pub fn spd_inverse<F: Scalar>(a: &Matrix<F>) -> Result<Matrix<F>, LinalgError> {
    let n = require_square(a)?;
    let factor = CholFactor { lower: cholesky(a)?, jitter: F::zero() };
    let mut inv = Matrix::zeros(n, n);
    let mut e = vec![F::zero(); n];
    for j in 0..n {
        e.iter_mut().for_each(|x| *x = F::zero());
        e[j] = F::one();
        let col = factor.solve(&e)?;
        for i in 0..n {
            inv[(i, j)] = col[i];
        }
    }
    inv.symmetrize();
    Ok(inv)
}

/// `log det A` for symmetric positive definite `A`.
pub fn spd_log_det<F: Scalar>(a: &Matrix<F>) -> Result<F, LinalgError> {
    let lower = cholesky(a)?;
    Ok(CholFactor { lower, jitter: F::zero() }.log_det())
}

// ── Symmetric eigendecomposition ────────────────────────────────────────

#[derive(Debug, Clone)]
pub struct SymmetricEigen<F> {
    /// Ascending.
    pub values: Vec<F>,
    /// Column `k` is the eigenvector for `values[k]`.
    pub vectors: Matrix<F>,
}

/// Cyclic Jacobi rotations until the off-diagonal mass is negligible.
pub fn symmetric_eigen<F: Scalar>(a: &Matrix<F>) -> Result<SymmetricEigen<F>, LinalgError> {
    let n = require_square(a)?;
    let mut m = a.clone();
    m.symmetrize();
    let mut v = Matrix::identity(n);
    let scale = m.frobenius_norm();
    let tol = F::epsilon() * F::epsilon() * scale * scale;

    for _sweep in 0..100 {
        let mut off = F::zero();
        for i in 0..n {
            for j in (i + 1)..n {
                off += m[(i, j)] * m[(i, j)];
            }
        }
        if off <= tol || off == F::zero() {
            break;
        }
        for p in 0..n {
            for q in (p + 1)..n {
                let apq = m[(p, q)];
                if apq == F::zero() {
                    continue;
                }
                let app = m[(p, p)];
                let aqq = m[(q, q)];
                let theta = (aqq - app) / (F::of(2.0) * apq);
                let t = theta.signum() / (theta.abs() + (theta * theta + F::one()).sqrt());
                let c = F::one() / (t * t + F::one()).sqrt();
                let s = t * c;
                for k in 0..n {
                    let mkp = m[(k, p)];
                    let mkq = m[(k, q)];
                    m[(k, p)] = c * mkp - s * mkq;
                    m[(k, q)] = s * mkp + c * mkq;
                }
                for k in 0..n {
                    let mpk = m[(p, k)];
                    let mqk = m[(q, k)];
                    m[(p, k)] = c * mpk - s * mqk;
                    m[(q, k)] = s * mpk + c * mqk;
                }
                m[(p, q)] = F::zero();
                m[(q, p)] = F::zero();
                for k in 0..n {
                    let vkp = v[(k, p)];
                    let vkq = v[(k, q)];
                    v[(k, p)] = c * vkp - s * vkq;
                    v[(k, q)] = s * vkp + c * vkq;
                }
            }
        }
    }

    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by(|&i, &j| m[(i, i)].partial_cmp(&m[(j, j)]).unwrap_or(std::cmp::Ordering::Equal));
    let values = order.iter().map(|&i| m[(i, i)]).collect();
    let mut vectors = Matrix::zeros(n, n);
    for (new_col, &old_col) in order.iter().enumerate() {
        for k in 0..n {
            vectors[(k, new_col)] = v[(k, old_col)];
        }
    }
    Ok(SymmetricEigen { values, vectors })
}

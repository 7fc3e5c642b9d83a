//! Small dense linear algebra over `Vec<f64>`: matrix/vector products, a
//! one-sided Jacobi SVD and a symmetric Jacobi eigendecomposition.
//!
//! Matrices here are at most a few hundred on a side, so simple O(n^3)
//! routines with tight convergence tolerances are the right tool.

use alloc::string::ToString;
use alloc::vec;
use alloc::vec::Vec;

use serde::{Deserialize, Serialize};

use crate::math;
use crate::{Error, Result};

/// Dense row-major matrix.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Matrix {
    rows: usize,
    cols: usize,
    data: Vec<f64>,
}

impl Matrix {
    pub fn zeros(rows: usize, cols: usize) -> Self {
        Self {
            rows,
            cols,
            data: vec![0.0; rows * cols],
        }
    }

    pub fn identity(n: usize) -> Self {
        let mut m = Self::zeros(n, n);
        for i in 0..n {
            m.data[i * n + i] = 1.0;
        }
        m
    }

    pub fn from_rows(rows: &[Vec<f64>]) -> Self {
        let r = rows.len();
        let c = if r == 0 { 0 } else { rows[0].len() };
        let mut data = Vec::with_capacity(r * c);
        for row in rows {
            assert_eq!(row.len(), c, "ragged rows");
            data.extend_from_slice(row);
        }
        Self { rows: r, cols: c, data }
    }

    pub fn from_vec(rows: usize, cols: usize, data: Vec<f64>) -> Self {
        assert_eq!(data.len(), rows * cols);
        Self { rows, cols, data }
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn cols(&self) -> usize {
        self.cols
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    #[inline]
    pub fn get(&self, i: usize, j: usize) -> f64 {
        self.data[i * self.cols + j]
    }

    #[inline]
    pub fn set(&mut self, i: usize, j: usize, v: f64) {
        self.data[i * self.cols + j] = v;
    }

    pub fn row(&self, i: usize) -> &[f64] {
        &self.data[i * self.cols..(i + 1) * self.cols]
    }

    pub fn row_mut(&mut self, i: usize) -> &mut [f64] {
        &mut self.data[i * self.cols..(i + 1) * self.cols]
    }

    pub fn transpose(&self) -> Matrix {
        let mut out = Matrix::zeros(self.cols, self.rows);
        for i in 0..self.rows {
            for j in 0..self.cols {
                out.data[j * self.rows + i] = self.data[i * self.cols + j];
            }
        }
        out
    }

    /// `self * x`.
    pub fn matvec(&self, x: &[f64]) -> Vec<f64> {
        debug_assert_eq!(x.len(), self.cols);
        let mut out = vec![0.0; self.rows];
        for i in 0..self.rows {
            let row = &self.data[i * self.cols..(i + 1) * self.cols];
            let mut acc = 0.0;
            for (a, b) in row.iter().zip(x) {
                acc += a * b;
            }
            out[i] = acc;
        }
        out
    }

    /// `self^T * x` without materialising the transpose.
    pub fn matvec_t(&self, x: &[f64]) -> Vec<f64> {
        debug_assert_eq!(x.len(), self.rows);
        let mut out = vec![0.0; self.cols];
        for i in 0..self.rows {
            let row = &self.data[i * self.cols..(i + 1) * self.cols];
            let xi = x[i];
            for (o, a) in out.iter_mut().zip(row) {
                *o += a * xi;
            }
        }
        out
    }

    /// `self * other`.
    pub fn matmul(&self, other: &Matrix) -> Matrix {
        assert_eq!(self.cols, other.rows);
        let mut out = Matrix::zeros(self.rows, other.cols);
        for i in 0..self.rows {
            for k in 0..self.cols {
                let a = self.data[i * self.cols + k];
                if a == 0.0 {
                    continue;
                }
                let orow = &other.data[k * other.cols..(k + 1) * other.cols];
                let out_row = &mut out.data[i * other.cols..(i + 1) * other.cols];
                for (o, b) in out_row.iter_mut().zip(orow) {
                    *o += a * b;
                }
            }
        }
        out
    }

    /// Rank-one update `self += scale * u v^T`.
    pub fn add_outer(&mut self, scale: f64, u: &[f64], v: &[f64]) {
        debug_assert_eq!(u.len(), self.rows);
        debug_assert_eq!(v.len(), self.cols);
        for i in 0..self.rows {
            let s = scale * u[i];
            let row = &mut self.data[i * self.cols..(i + 1) * self.cols];
            for (r, b) in row.iter_mut().zip(v) {
                *r += s * b;
            }
        }
    }

    pub fn scale_in_place(&mut self, s: f64) {
        for v in &mut self.data {
            *v *= s;
        }
    }

    pub fn add_in_place(&mut self, other: &Matrix) {
        debug_assert_eq!(self.rows, other.rows);
        debug_assert_eq!(self.cols, other.cols);
        for (a, b) in self.data.iter_mut().zip(&other.data) {
            *a += b;
        }
    }

    pub fn frobenius_norm(&self) -> f64 {
        math::sqrt(self.data.iter().map(|v| v * v).sum())
    }

    pub fn max_abs_diff(&self, other: &Matrix) -> f64 {
        self.data
            .iter()
            .zip(&other.data)
            .map(|(a, b)| math::abs(a - b))
            .fold(0.0, f64::max)
    }
}

/// Thin SVD `A = U diag(sigma) V^T` with singular values sorted descending.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Svd {
    pub u: Matrix,
    pub sigma: Vec<f64>,
    pub v: Matrix,
}

impl Svd {
    /// Reconstruct `U diag(sigma) V^T`.
    pub fn reconstruct(&self) -> Matrix {
        let n = self.sigma.len();
        let mut scaled = self.u.clone();
        for j in 0..n {
            let s = self.sigma[j];
            for i in 0..scaled.rows() {
                let v = scaled.get(i, j) * s;
                scaled.set(i, j, v);
            }
        }
        scaled.matmul(&self.v.transpose())
    }
}

const SVD_MAX_SWEEPS: usize = 60;
const SVD_TOL: f64 = 1e-14;

/// One-sided Jacobi SVD for an `m x n` matrix with `m >= n`.
///
/// Columns of a working copy are rotated pairwise until mutually orthogonal;
/// the accumulated rotations form `V`, the column norms the singular values.
pub fn svd_jacobi(a: &Matrix) -> Result<Svd> {
    let m = a.rows();
    let n = a.cols();
    assert!(m >= n, "svd_jacobi expects rows >= cols");
    let mut b = a.clone();
    let mut v = Matrix::identity(n);

    let mut converged = false;
    let mut sweeps = 0;
    while sweeps < SVD_MAX_SWEEPS {
        sweeps += 1;
        let mut off = 0.0f64;
        for p in 0..n {
            for q in (p + 1)..n {
                let mut app = 0.0;
                let mut aqq = 0.0;
                let mut apq = 0.0;
                for i in 0..m {
                    let bp = b.get(i, p);
                    let bq = b.get(i, q);
                    app += bp * bp;
                    aqq += bq * bq;
                    apq += bp * bq;
                }
                if math::abs(apq) <= SVD_TOL * math::sqrt(app * aqq) {
                    continue;
                }
                off = off.max(math::abs(apq));
                let theta = 0.5 * math::atan2(2.0 * apq, app - aqq);
                let c = math::cos(theta);
                let s = math::sin(theta);
                for i in 0..m {
                    let bp = b.get(i, p);
                    let bq = b.get(i, q);
                    b.set(i, p, c * bp + s * bq);
                    b.set(i, q, -s * bp + c * bq);
                }
                for i in 0..n {
                    let vp = v.get(i, p);
                    let vq = v.get(i, q);
                    v.set(i, p, c * vp + s * vq);
                    v.set(i, q, -s * vp + c * vq);
                }
            }
        }
        if off == 0.0 {
            converged = true;
            break;
        }
    }
    if !converged {
        return Err(Error::Decomposition {
            block: usize::MAX,
            sweeps: SVD_MAX_SWEEPS,
        });
    }

    let mut sigma = vec![0.0; n];
    let mut u = Matrix::zeros(m, n);
    for j in 0..n {
        let mut norm = 0.0;
        for i in 0..m {
            norm += b.get(i, j) * b.get(i, j);
        }
        let norm = math::sqrt(norm);
        sigma[j] = norm;
        if norm > 0.0 {
            for i in 0..m {
                u.set(i, j, b.get(i, j) / norm);
            }
        }
    }

    // Sort singular values descending, permuting U and V columns alongside.
    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by(|&i, &j| sigma[j].partial_cmp(&sigma[i]).unwrap());
    let sigma_sorted: Vec<f64> = order.iter().map(|&j| sigma[j]).collect();
    let mut u_sorted = Matrix::zeros(m, n);
    let mut v_sorted = Matrix::zeros(n, n);
    for (new_j, &old_j) in order.iter().enumerate() {
        for i in 0..m {
            u_sorted.set(i, new_j, u.get(i, old_j));
        }
        for i in 0..n {
            v_sorted.set(i, new_j, v.get(i, old_j));
        }
    }

    Ok(Svd {
        u: u_sorted,
        sigma: sigma_sorted,
        v: v_sorted,
    })
}

const EIG_MAX_SWEEPS: usize = 100;
const EIG_TOL: f64 = 1e-13;

/// Eigendecomposition of a symmetric matrix via cyclic Jacobi rotations.
///
/// Returns `(eigenvalues, eigenvectors)` with `A = Q diag(lambda) Q^T`;
/// eigenvalues are sorted descending.
pub fn eigh_jacobi(a: &Matrix) -> Result<(Vec<f64>, Matrix)> {
    let n = a.rows();
    if a.cols() != n {
        return Err(Error::Matrix("eigh needs a square matrix".to_string()));
    }
    let mut m = a.clone();
    let mut q = Matrix::identity(n);
    let scale = m.data().iter().map(|v| math::abs(*v)).fold(0.0, f64::max).max(1.0);

    for _ in 0..EIG_MAX_SWEEPS {
        let mut off = 0.0f64;
        for p in 0..n {
            for r in (p + 1)..n {
                off = off.max(math::abs(m.get(p, r)));
            }
        }
        if off <= EIG_TOL * scale {
            break;
        }
        for p in 0..n {
            for r in (p + 1)..n {
                let apq = m.get(p, r);
                if math::abs(apq) <= EIG_TOL * scale {
                    continue;
                }
                let app = m.get(p, p);
                let aqq = m.get(r, r);
                let theta = 0.5 * math::atan2(2.0 * apq, aqq - app);
                let c = math::cos(theta);
                let s = math::sin(theta);
                for k in 0..n {
                    let mkp = m.get(k, p);
                    let mkq = m.get(k, r);
                    m.set(k, p, c * mkp - s * mkq);
                    m.set(k, r, s * mkp + c * mkq);
                }
                for k in 0..n {
                    let mpk = m.get(p, k);
                    let mqk = m.get(r, k);
                    m.set(p, k, c * mpk - s * mqk);
                    m.set(r, k, s * mpk + c * mqk);
                }
                for k in 0..n {
                    let qkp = q.get(k, p);
                    let qkq = q.get(k, r);
                    q.set(k, p, c * qkp - s * qkq);
                    q.set(k, r, s * qkp + c * qkq);
                }
            }
        }
    }

    let mut lambda: Vec<f64> = (0..n).map(|i| m.get(i, i)).collect();
    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by(|&i, &j| lambda[j].partial_cmp(&lambda[i]).unwrap());
    let sorted: Vec<f64> = order.iter().map(|&i| lambda[i]).collect();
    let mut q_sorted = Matrix::zeros(n, n);
    for (new_j, &old_j) in order.iter().enumerate() {
        for i in 0..n {
            q_sorted.set(i, new_j, q.get(i, old_j));
        }
    }
    lambda = sorted;
    Ok((lambda, q_sorted))
}

/// Symmetric positive-semidefinite square root `A^(1/2)` via `eigh_jacobi`.
///
/// Eigenvalues below `-neg_tol` are rejected; small negatives are clamped.
pub fn sqrtm_psd(a: &Matrix, neg_tol: f64) -> Result<Matrix> {
    let (lambda, q) = eigh_jacobi(a)?;
    let n = lambda.len();
    let mut scaled = q.clone();
    for j in 0..n {
        let l = lambda[j];
        if l < -neg_tol {
            return Err(Error::Matrix(alloc::format!(
                "matrix is indefinite: eigenvalue {l:.3e} below -{neg_tol:.1e}"
            )));
        }
        let root = math::sqrt(l.max(0.0));
        for i in 0..n {
            let v = scaled.get(i, j) * root;
            scaled.set(i, j, v);
        }
    }
    Ok(scaled.matmul(&q.transpose()))
}

/// Dot product.
pub fn dot(a: &[f64], b: &[f64]) -> f64 {
    debug_assert_eq!(a.len(), b.len());
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

/// Euclidean norm.
pub fn norm2(a: &[f64]) -> f64 {
    math::sqrt(dot(a, a))
}

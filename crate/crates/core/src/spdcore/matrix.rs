//! Small dense square matrices and symmetric positive-definite matrices.
//!
//! Everything here targets dimensions of at most a handful (the mixture
//! models work with one or two scans per voxel), so storage is a flat
//! row-major `Vec<f64>` and eigenproblems are solved with cyclic Jacobi.

use std::fmt;

use crate::error::{Error, Result};

/// Smallest eigenvalue accepted relative to the largest.
pub const SPD_RELATIVE_FLOOR: f64 = 1e-12;
const SYMMETRY_TOL: f64 = 1e-12;

/// General `n x n` real matrix, row-major.
#[derive(Clone, PartialEq)]
pub struct Matrix {
    dim: usize,
    data: Vec<f64>,
}

impl fmt::Debug for Matrix {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let rows: Vec<&[f64]> = self.data.chunks(self.dim).collect();
        f.debug_struct("Matrix").field("rows", &rows).finish()
    }
}

impl Matrix {
    pub fn from_row_major(dim: usize, data: Vec<f64>) -> Result<Self> {
        if dim == 0 || data.len() != dim * dim {
            return Err(Error::arg(format!(
                "expected {} entries for a {dim}x{dim} matrix, got {}",
                dim * dim,
                data.len()
            )));
        }
        Ok(Matrix { dim, data })
    }

    pub fn zeros(dim: usize) -> Self {
        Matrix { dim, data: vec![0.0; dim * dim] }
    }

    pub fn identity(dim: usize) -> Self {
        let mut m = Matrix::zeros(dim);
        for i in 0..dim {
            m.data[i * dim + i] = 1.0;
        }
        m
    }

    pub fn diag(values: &[f64]) -> Self {
        let mut m = Matrix::zeros(values.len());
        for (i, v) in values.iter().enumerate() {
            m.data[i * values.len() + i] = *v;
        }
        m
    }

    #[inline]
    pub fn dim(&self) -> usize {
        self.dim
    }

    #[inline]
    pub fn as_slice(&self) -> &[f64] {
        &self.data
    }

    #[inline]
    pub fn get(&self, i: usize, j: usize) -> f64 {
        self.data[i * self.dim + j]
    }

    #[inline]
    pub fn set(&mut self, i: usize, j: usize, v: f64) {
        self.data[i * self.dim + j] = v;
    }

    pub fn transpose(&self) -> Matrix {
        let n = self.dim;
        let mut out = Matrix::zeros(n);
        for i in 0..n {
            for j in 0..n {
                out.data[j * n + i] = self.data[i * n + j];
            }
        }
        out
    }

    pub fn matmul(&self, other: &Matrix) -> Matrix {
        assert_eq!(self.dim, other.dim, "dimension mismatch in matmul");
        let n = self.dim;
        let mut out = Matrix::zeros(n);
        for i in 0..n {
            for k in 0..n {
                let a = self.data[i * n + k];
                if a == 0.0 {
                    continue;
                }
                for j in 0..n {
                    out.data[i * n + j] += a * other.data[k * n + j];
                }
            }
        }
        out
    }

    pub fn mul_vec(&self, v: &[f64]) -> Vec<f64> {
        let mut out = vec![0.0; self.dim];
        self.mul_vec_into(v, &mut out);
        out
    }

    #[inline]
    pub fn mul_vec_into(&self, v: &[f64], out: &mut [f64]) {
        mat_vec(&self.data, self.dim, v, out);
    }

    pub fn add(&self, other: &Matrix) -> Matrix {
        assert_eq!(self.dim, other.dim);
        Matrix {
            dim: self.dim,
            data: self.data.iter().zip(&other.data).map(|(a, b)| a + b).collect(),
        }
    }

    pub fn sub(&self, other: &Matrix) -> Matrix {
        assert_eq!(self.dim, other.dim);
        Matrix {
            dim: self.dim,
            data: self.data.iter().zip(&other.data).map(|(a, b)| a - b).collect(),
        }
    }

    pub fn scale(&self, s: f64) -> Matrix {
        Matrix { dim: self.dim, data: self.data.iter().map(|a| a * s).collect() }
    }

    pub fn frobenius_norm(&self) -> f64 {
        self.data.iter().map(|a| a * a).sum::<f64>().sqrt()
    }

    /// Largest singular value.
    pub fn spectral_norm(&self) -> f64 {
        spectral_norm(self.dim, self.dim, &self.data)
    }

    /// Determinant by partial-pivot LU.
    pub fn determinant(&self) -> f64 {
        let n = self.dim;
        let mut a = self.data.clone();
        let mut det = 1.0;
        for col in 0..n {
            let pivot = (col..n)
                .max_by(|&r1, &r2| a[r1 * n + col].abs().total_cmp(&a[r2 * n + col].abs()))
                .unwrap();
            if a[pivot * n + col] == 0.0 {
                return 0.0;
            }
            if pivot != col {
                for j in 0..n {
                    a.swap(pivot * n + j, col * n + j);
                }
                det = -det;
            }
            let d = a[col * n + col];
            det *= d;
            for r in col + 1..n {
                let f = a[r * n + col] / d;
                for j in col..n {
                    a[r * n + j] -= f * a[col * n + j];
                }
            }
        }
        det
    }

    /// Inverse by Gauss-Jordan elimination with partial pivoting.
    pub fn inverse(&self) -> Result<Matrix> {
        let n = self.dim;
        let mut a = self.data.clone();
        let mut inv = Matrix::identity(n).data;
        let scale = self.data.iter().fold(0.0f64, |m, v| m.max(v.abs()));
        if scale == 0.0 || !scale.is_finite() {
            return Err(Error::Singular("zero or non-finite matrix".into()));
        }
        for col in 0..n {
            let pivot = (col..n)
                .max_by(|&r1, &r2| a[r1 * n + col].abs().total_cmp(&a[r2 * n + col].abs()))
                .unwrap();
            if a[pivot * n + col].abs() <= 1e-14 * scale {
                return Err(Error::Singular("matrix is not invertible".into()));
            }
            if pivot != col {
                for j in 0..n {
                    a.swap(pivot * n + j, col * n + j);
                    inv.swap(pivot * n + j, col * n + j);
                }
            }
            let d = a[col * n + col];
            for j in 0..n {
                a[col * n + j] /= d;
                inv[col * n + j] /= d;
            }
            for r in 0..n {
                if r == col {
                    continue;
                }
                let f = a[r * n + col];
                if f == 0.0 {
                    continue;
                }
                for j in 0..n {
                    a[r * n + j] -= f * a[col * n + j];
                    inv[r * n + j] -= f * inv[col * n + j];
                }
            }
        }
        Ok(Matrix { dim: n, data: inv })
    }
}

/// `out = m * v` for a row-major `dim x dim` block.
#[inline]
pub fn mat_vec(m: &[f64], dim: usize, v: &[f64], out: &mut [f64]) {
    for (i, o) in out.iter_mut().enumerate().take(dim) {
        let row = &m[i * dim..(i + 1) * dim];
        let mut acc = 0.0;
        for (a, b) in row.iter().zip(v) {
            acc += a * b;
        }
        *o = acc;
    }
}

/// Symmetric positive-definite matrix.
#[derive(Clone, PartialEq)]
pub struct SpdMatrix {
    inner: Matrix,
}

impl fmt::Debug for SpdMatrix {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let rows: Vec<&[f64]> = self.inner.data.chunks(self.inner.dim).collect();
        f.debug_struct("SpdMatrix").field("rows", &rows).finish()
    }
}

/// Eigendecomposition of a symmetric matrix: `M = V diag(values) V^T`,
/// eigenvectors stored as the columns of `vectors`.
#[derive(Debug, Clone)]
pub struct SymmetricEigen {
    pub values: Vec<f64>,
    pub vectors: Matrix,
}

impl SpdMatrix {
    /// Validates symmetry and positive definiteness. The stored entries are
    /// the exact symmetrization `(M + M^T) / 2`.
    pub fn new(dim: usize, data: Vec<f64>) -> Result<Self> {
        let m = Matrix::from_row_major(dim, data)?;
        Self::from_matrix(m)
    }

    pub fn from_matrix(m: Matrix) -> Result<Self> {
        let n = m.dim;
        if m.data.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite("matrix has non-finite entries".into()));
        }
        let scale = m.data.iter().fold(0.0f64, |a, v| a.max(v.abs()));
        let mut sym = m.clone();
        for i in 0..n {
            for j in i + 1..n {
                let (a, b) = (m.get(i, j), m.get(j, i));
                if (a - b).abs() > SYMMETRY_TOL * scale.max(f64::MIN_POSITIVE) {
                    return Err(Error::Singular(format!(
                        "matrix is not symmetric: entries ({i},{j})={a} and ({j},{i})={b}"
                    )));
                }
                let avg = 0.5 * (a + b);
                sym.set(i, j, avg);
                sym.set(j, i, avg);
            }
        }
        let eig = jacobi_eigen(&sym);
        check_spd_spectrum(&eig.values)?;
        Ok(SpdMatrix { inner: sym })
    }

    pub fn identity(dim: usize) -> Self {
        SpdMatrix { inner: Matrix::identity(dim) }
    }

    pub fn diag(values: &[f64]) -> Result<Self> {
        Self::from_matrix(Matrix::diag(values))
    }

    #[inline]
    pub fn dim(&self) -> usize {
        self.inner.dim
    }

    #[inline]
    pub fn as_slice(&self) -> &[f64] {
        &self.inner.data
    }

    #[inline]
    pub fn get(&self, i: usize, j: usize) -> f64 {
        self.inner.get(i, j)
    }

    pub fn as_matrix(&self) -> &Matrix {
        &self.inner
    }

    pub fn into_matrix(self) -> Matrix {
        self.inner
    }

    pub fn eigen(&self) -> SymmetricEigen {
        jacobi_eigen(&self.inner)
    }

    pub fn trace(&self) -> f64 {
        (0..self.dim()).map(|i| self.get(i, i)).sum()
    }

    pub fn log_det(&self) -> f64 {
        self.eigen().values.iter().map(|v| v.ln()).sum()
    }

    /// Principal square root: same eigenvectors, square-rooted eigenvalues.
    pub fn sqrt(&self) -> Result<SpdMatrix> {
        self.spectral_map(f64::sqrt)
    }

    pub fn inv_sqrt(&self) -> Result<SpdMatrix> {
        self.spectral_map(|v| 1.0 / v.sqrt())
    }

    pub fn inverse(&self) -> Result<SpdMatrix> {
        self.spectral_map(|v| 1.0 / v)
    }

    fn spectral_map(&self, f: impl Fn(f64) -> f64) -> Result<SpdMatrix> {
        let eig = self.eigen();
        check_spd_spectrum(&eig.values)?;
        let mapped: Vec<f64> = eig.values.iter().map(|&v| f(v)).collect();
        Ok(SpdMatrix { inner: reconstruct(&eig.vectors, &mapped) })
    }
}

/// Principal square root, see [`SpdMatrix::sqrt`].
pub fn spd_sqrt(m: &SpdMatrix) -> Result<SpdMatrix> {
    m.sqrt()
}

/// Inverse of the principal square root; `R M R = I`.
pub fn spd_inv_sqrt(m: &SpdMatrix) -> Result<SpdMatrix> {
    m.inv_sqrt()
}

fn check_spd_spectrum(values: &[f64]) -> Result<()> {
    let max = values.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let min = values.iter().cloned().fold(f64::INFINITY, f64::min);
    if !(max > 0.0) || min <= SPD_RELATIVE_FLOOR * max {
        return Err(Error::Singular(format!(
            "matrix is not positive definite (eigenvalues in [{min:e}, {max:e}])"
        )));
    }
    Ok(())
}

/// `V diag(d) V^T`, symmetrized exactly.
fn reconstruct(vectors: &Matrix, d: &[f64]) -> Matrix {
    let n = vectors.dim;
    let mut out = Matrix::zeros(n);
    for i in 0..n {
        for j in i..n {
            let mut acc = 0.0;
            for (k, dk) in d.iter().enumerate() {
                acc += vectors.get(i, k) * dk * vectors.get(j, k);
            }
            out.set(i, j, acc);
            out.set(j, i, acc);
        }
    }
    out
}

/// Cyclic Jacobi eigenvalue iteration for a symmetric matrix. Eigenvalues
/// are returned in ascending order.
pub fn jacobi_eigen(m: &Matrix) -> SymmetricEigen {
    let n = m.dim;
    let mut a = m.data.clone();
    let mut v = Matrix::identity(n).data;
    let norm: f64 = a.iter().map(|x| x * x).sum::<f64>().sqrt();
    for _sweep in 0..100 {
        let mut off = 0.0;
        for i in 0..n {
            for j in i + 1..n {
                off += a[i * n + j] * a[i * n + j];
            }
        }
        if off.sqrt() <= 1e-300 || off.sqrt() <= 1e-17 * norm {
            break;
        }
        for p in 0..n {
            for q in p + 1..n {
                let apq = a[p * n + q];
                if apq == 0.0 {
                    continue;
                }
                let app = a[p * n + p];
                let aqq = a[q * n + q];
                let theta = (aqq - app) / (2.0 * apq);
                let t = theta.signum() / (theta.abs() + (theta * theta + 1.0).sqrt());
                let t = if theta == 0.0 { 1.0 } else { t };
                let c = 1.0 / (t * t + 1.0).sqrt();
                let s = t * c;
                for k in 0..n {
                    let akp = a[k * n + p];
                    let akq = a[k * n + q];
                    a[k * n + p] = c * akp - s * akq;
                    a[k * n + q] = s * akp + c * akq;
                }
                for k in 0..n {
                    let apk = a[p * n + k];
                    let aqk = a[q * n + k];
                    a[p * n + k] = c * apk - s * aqk;
                    a[q * n + k] = s * apk + c * aqk;
                }
                for k in 0..n {
                    let vkp = v[k * n + p];
                    let vkq = v[k * n + q];
                    v[k * n + p] = c * vkp - s * vkq;
                    v[k * n + q] = s * vkp + c * vkq;
                }
            }
        }
    }
    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by(|&i, &j| a[i * n + i].total_cmp(&a[j * n + j]));
    let values = order.iter().map(|&i| a[i * n + i]).collect();
    let mut vectors = Matrix::zeros(n);
    for (new_col, &old_col) in order.iter().enumerate() {
        for r in 0..n {
            vectors.set(r, new_col, v[r * n + old_col]);
        }
    }
    SymmetricEigen { values, vectors }
}

/// Largest singular value of a row-major `rows x cols` matrix, computed from
/// the eigenvalues of the smaller Gram matrix.
pub fn spectral_norm(rows: usize, cols: usize, data: &[f64]) -> f64 {
    assert_eq!(data.len(), rows * cols);
    if rows == 0 || cols == 0 {
        return 0.0;
    }
    let gram = if cols <= rows {
        let mut g = Matrix::zeros(cols);
        for r in 0..rows {
            let row = &data[r * cols..(r + 1) * cols];
            for i in 0..cols {
                for j in 0..cols {
                    g.data[i * cols + j] += row[i] * row[j];
                }
            }
        }
        g
    } else {
        let mut g = Matrix::zeros(rows);
        for i in 0..rows {
            for j in 0..rows {
                let mut acc = 0.0;
                for c in 0..cols {
                    acc += data[i * cols + c] * data[j * cols + c];
                }
                g.data[i * rows + j] = acc;
            }
        }
        g
    };
    let top = jacobi_eigen(&gram).values.into_iter().fold(0.0, f64::max);
    top.max(0.0).sqrt()
}

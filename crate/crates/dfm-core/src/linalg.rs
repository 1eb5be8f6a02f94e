//! Dense real linear algebra: symmetric eigendecomposition, QR
//! orthonormalization, norms, and SPD solves.
//!
//! All routines operate on the row-major [`Mat`] type and are pure functions;
//! nothing here holds shared mutable state. Intended scale is dense matrices
//! up to a few thousand rows, which covers every consumer in this workspace.

use serde::{Deserialize, Serialize};

use crate::error::{DfmError, Result};

/// Convergence threshold of the Jacobi sweep, relative to the Frobenius norm
/// of the input.
const JACOBI_TOL: f64 = 1e-12;
const JACOBI_MAX_SWEEPS: usize = 100;

/// Dense row-major matrix of `f64`.
#[derive(Clone, PartialEq, Serialize, Deserialize)]
pub struct Mat {
    rows: usize,
    cols: usize,
    data: Vec<f64>,
}

impl std::fmt::Debug for Mat {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        writeln!(f, "Mat {}x{} [", self.rows, self.cols)?;
        for i in 0..self.rows.min(8) {
            write!(f, "  ")?;
            for j in 0..self.cols.min(8) {
                write!(f, "{:>12.5e} ", self[(i, j)])?;
            }
            writeln!(f, "{}", if self.cols > 8 { "..." } else { "" })?;
        }
        if self.rows > 8 {
            writeln!(f, "  ...")?;
        }
        write!(f, "]")
    }
}

impl Mat {
    pub fn zeros(rows: usize, cols: usize) -> Self {
        Mat {
            rows,
            cols,
            data: vec![0.0; rows * cols],
        }
    }

    pub fn identity(n: usize) -> Self {
        let mut m = Mat::zeros(n, n);
        for i in 0..n {
            m[(i, i)] = 1.0;
        }
        m
    }

    pub fn diag(entries: &[f64]) -> Self {
        let mut m = Mat::zeros(entries.len(), entries.len());
        for (i, &v) in entries.iter().enumerate() {
            m[(i, i)] = v;
        }
        m
    }

    /// Build from a flat row-major buffer. Fails on shape mismatch or
    /// non-finite entries.
    pub fn from_vec(rows: usize, cols: usize, data: Vec<f64>) -> Result<Self> {
        if data.len() != rows * cols {
            return Err(DfmError::InvalidInput(format!(
                "matrix buffer has {} entries, expected {}x{}={}",
                data.len(),
                rows,
                cols,
                rows * cols
            )));
        }
        if data.iter().any(|v| !v.is_finite()) {
            return Err(DfmError::InvalidInput(
                "matrix entries must be finite".into(),
            ));
        }
        Ok(Mat { rows, cols, data })
    }

    pub fn from_rows(rows: &[Vec<f64>]) -> Result<Self> {
        let r = rows.len();
        let c = rows.first().map_or(0, |row| row.len());
        if rows.iter().any(|row| row.len() != c) {
            return Err(DfmError::InvalidInput("ragged rows".into()));
        }
        Mat::from_vec(r, c, rows.concat())
    }

    pub fn from_fn(rows: usize, cols: usize, mut f: impl FnMut(usize, usize) -> f64) -> Self {
        let mut m = Mat::zeros(rows, cols);
        for i in 0..rows {
            for j in 0..cols {
                m[(i, j)] = f(i, j);
            }
        }
        m
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

    /// Borrow row `i` as a contiguous slice.
    pub fn row(&self, i: usize) -> &[f64] {
        &self.data[i * self.cols..(i + 1) * self.cols]
    }

    pub fn row_mut(&mut self, i: usize) -> &mut [f64] {
        &mut self.data[i * self.cols..(i + 1) * self.cols]
    }

    pub fn col(&self, j: usize) -> Vec<f64> {
        (0..self.rows).map(|i| self[(i, j)]).collect()
    }

    pub fn set_col(&mut self, j: usize, v: &[f64]) {
        for i in 0..self.rows {
            self[(i, j)] = v[i];
        }
    }

    pub fn transpose(&self) -> Mat {
        Mat::from_fn(self.cols, self.rows, |i, j| self[(j, i)])
    }

    pub fn matmul(&self, other: &Mat) -> Mat {
        assert_eq!(self.cols, other.rows, "matmul shape mismatch");
        let mut out = Mat::zeros(self.rows, other.cols);
        for i in 0..self.rows {
            for k in 0..self.cols {
                let a = self[(i, k)];
                if a == 0.0 {
                    continue;
                }
                let orow = other.row(k);
                let out_row = out.row_mut(i);
                for (o, &b) in out_row.iter_mut().zip(orow) {
                    *o += a * b;
                }
            }
        }
        out
    }

    pub fn matvec(&self, x: &[f64]) -> Vec<f64> {
        assert_eq!(self.cols, x.len(), "matvec shape mismatch");
        (0..self.rows)
            .map(|i| dot(self.row(i), x))
            .collect()
    }

    /// `self^T * x` without forming the transpose.
    pub fn tr_matvec(&self, x: &[f64]) -> Vec<f64> {
        assert_eq!(self.rows, x.len(), "tr_matvec shape mismatch");
        let mut out = vec![0.0; self.cols];
        for i in 0..self.rows {
            let xi = x[i];
            if xi == 0.0 {
                continue;
            }
            for (o, &a) in out.iter_mut().zip(self.row(i)) {
                *o += a * xi;
            }
        }
        out
    }

    pub fn scale(&self, s: f64) -> Mat {
        Mat {
            rows: self.rows,
            cols: self.cols,
            data: self.data.iter().map(|v| v * s).collect(),
        }
    }

    pub fn add(&self, other: &Mat) -> Mat {
        assert_eq!((self.rows, self.cols), (other.rows, other.cols));
        Mat {
            rows: self.rows,
            cols: self.cols,
            data: self
                .data
                .iter()
                .zip(&other.data)
                .map(|(a, b)| a + b)
                .collect(),
        }
    }

    pub fn sub(&self, other: &Mat) -> Mat {
        assert_eq!((self.rows, self.cols), (other.rows, other.cols));
        Mat {
            rows: self.rows,
            cols: self.cols,
            data: self
                .data
                .iter()
                .zip(&other.data)
                .map(|(a, b)| a - b)
                .collect(),
        }
    }

    pub fn trace(&self) -> f64 {
        (0..self.rows.min(self.cols)).map(|i| self[(i, i)]).sum()
    }

    pub fn is_square(&self) -> bool {
        self.rows == self.cols
    }

    /// Max absolute asymmetry relative to the largest entry magnitude.
    pub fn is_symmetric_within(&self, rel_tol: f64) -> bool {
        if !self.is_square() {
            return false;
        }
        let scale = self
            .data
            .iter()
            .fold(0.0f64, |m, v| m.max(v.abs()))
            .max(1e-300);
        for i in 0..self.rows {
            for j in (i + 1)..self.cols {
                if (self[(i, j)] - self[(j, i)]).abs() > rel_tol * scale {
                    return false;
                }
            }
        }
        true
    }
}

impl std::ops::Index<(usize, usize)> for Mat {
    type Output = f64;
    fn index(&self, (i, j): (usize, usize)) -> &f64 {
        &self.data[i * self.cols + j]
    }
}

impl std::ops::IndexMut<(usize, usize)> for Mat {
    fn index_mut(&mut self, (i, j): (usize, usize)) -> &mut f64 {
        &mut self.data[i * self.cols + j]
    }
}

pub fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

pub fn norm2(v: &[f64]) -> f64 {
    dot(v, v).sqrt()
}

/// Eigendecomposition of a symmetric matrix: eigenvalues sorted descending
/// with orthonormal eigenvector columns in matching order.
#[derive(Clone, Debug)]
pub struct EigenPair {
    pub values: Vec<f64>,
    pub vectors: Mat,
}

impl EigenPair {
    /// The leading `k` eigenvalue/eigenvector pairs.
    pub fn top_k(&self, k: usize) -> (Vec<f64>, Mat) {
        let vals = self.values[..k].to_vec();
        let mut basis = Mat::zeros(self.vectors.rows(), k);
        for j in 0..k {
            basis.set_col(j, &self.vectors.col(j));
        }
        (vals, basis)
    }
}

/// Full spectrum of a symmetric matrix via cyclic Jacobi rotations.
///
/// Sweeps stop when the off-diagonal Frobenius norm drops below
/// `1e-12 * |A|_F` (at most 100 sweeps). Eigenvalues come back descending;
/// each eigenvector is sign-fixed so its largest-magnitude entry is positive,
/// which makes small examples and golden files deterministic. For repeated
/// eigenvalues only the spanned subspace is meaningful.
pub fn sym_eigen(a: &Mat) -> Result<EigenPair> {
    if !a.is_square() {
        return Err(DfmError::InvalidInput(format!(
            "sym_eigen requires a square matrix, got {}x{}",
            a.rows(),
            a.cols()
        )));
    }
    if !a.is_symmetric_within(1e-12) {
        return Err(DfmError::InvalidInput(
            "sym_eigen requires a symmetric matrix (within 1e-12 relative)".into(),
        ));
    }
    let n = a.rows();
    let mut m = a.clone();
    let mut v = Mat::identity(n);
    let fro = fro_norm(a).max(1e-300);
    let tol = JACOBI_TOL * fro;

    for _sweep in 0..JACOBI_MAX_SWEEPS {
        let mut off = 0.0;
        for i in 0..n {
            for j in (i + 1)..n {
                off += 2.0 * m[(i, j)] * m[(i, j)];
            }
        }
        if off.sqrt() <= tol {
            break;
        }
        for p in 0..n {
            for q in (p + 1)..n {
                let apq = m[(p, q)];
                if apq.abs() <= f64::MIN_POSITIVE {
                    continue;
                }
                let app = m[(p, p)];
                let aqq = m[(q, q)];
                let tau = (aqq - app) / (2.0 * apq);
                let t = if tau >= 0.0 {
                    1.0 / (tau + (1.0 + tau * tau).sqrt())
                } else {
                    -1.0 / (-tau + (1.0 + tau * tau).sqrt())
                };
                let c = 1.0 / (1.0 + t * t).sqrt();
                let s = t * c;

                // Rotate rows/columns p and q of the working matrix.
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
                // Accumulate the rotation into the eigenvector matrix.
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
    order.sort_by(|&i, &j| m[(j, j)].partial_cmp(&m[(i, i)]).unwrap());
    let values: Vec<f64> = order.iter().map(|&i| m[(i, i)]).collect();
    let mut vectors = Mat::zeros(n, n);
    for (dst, &src) in order.iter().enumerate() {
        let mut col = v.col(src);
        // Sign convention: largest-magnitude entry positive (first on ties).
        let mut imax = 0;
        for (i, x) in col.iter().enumerate() {
            if x.abs() > col[imax].abs() {
                imax = i;
            }
        }
        if col[imax] < 0.0 {
            for x in col.iter_mut() {
                *x = -*x;
            }
        }
        vectors.set_col(dst, &col);
    }
    Ok(EigenPair { values, vectors })
}

/// Orthonormal basis of the column space via modified Gram-Schmidt with one
/// re-orthogonalization pass. Requires `rows >= cols` and full column rank.
pub fn qr_orthonormalize(a: &Mat) -> Result<Mat> {
    let (n, k) = (a.rows(), a.cols());
    if n < k {
        return Err(DfmError::InvalidInput(format!(
            "qr_orthonormalize requires rows >= cols, got {}x{}",
            n, k
        )));
    }
    let mut q = Mat::zeros(n, k);
    for j in 0..k {
        let mut v = a.col(j);
        let orig_norm = norm2(&v);
        // Two MGS passes give orthogonality near machine precision.
        for _pass in 0..2 {
            for i in 0..j {
                let qi = q.col(i);
                let proj = dot(&qi, &v);
                for (vk, qk) in v.iter_mut().zip(&qi) {
                    *vk -= proj * qk;
                }
            }
        }
        let nrm = norm2(&v);
        if nrm <= 1e-10 * orig_norm.max(1e-30) || nrm == 0.0 {
            return Err(DfmError::DegenerateInput(format!(
                "column {} is linearly dependent (residual norm {:.3e})",
                j, nrm
            )));
        }
        for x in v.iter_mut() {
            *x /= nrm;
        }
        q.set_col(j, &v);
    }
    Ok(q)
}

pub fn fro_norm(a: &Mat) -> f64 {
    a.data().iter().map(|v| v * v).sum::<f64>().sqrt()
}

/// Operator (spectral) norm of a symmetric matrix: max |eigenvalue|.
pub fn op_norm(a: &Mat) -> Result<f64> {
    let eig = sym_eigen(a)?;
    Ok(eig
        .values
        .iter()
        .fold(0.0f64, |m, v| m.max(v.abs())))
}

/// Cholesky factor `L` (lower-triangular) of an SPD matrix.
fn cholesky(a: &Mat) -> Result<Mat> {
    if !a.is_square() || !a.is_symmetric_within(1e-10) {
        return Err(DfmError::SingularMatrix(
            "solve_spd requires a symmetric matrix".into(),
        ));
    }
    let n = a.rows();
    let mut l = Mat::zeros(n, n);
    for i in 0..n {
        for j in 0..=i {
            let mut sum = a[(i, j)];
            for k in 0..j {
                sum -= l[(i, k)] * l[(j, k)];
            }
            if i == j {
                if sum <= 0.0 || !sum.is_finite() {
                    return Err(DfmError::SingularMatrix(format!(
                        "matrix is not positive definite (pivot {} = {:.3e})",
                        i, sum
                    )));
                }
                l[(i, j)] = sum.sqrt();
            } else {
                l[(i, j)] = sum / l[(j, j)];
            }
        }
    }
    Ok(l)
}

/// Solve `a * x = b` for SPD `a` with one or more right-hand-side columns.
pub fn solve_spd(a: &Mat, b: &Mat) -> Result<Mat> {
    if a.rows() != b.rows() {
        return Err(DfmError::InvalidInput(format!(
            "solve_spd shape mismatch: a is {}x{}, b has {} rows",
            a.rows(),
            a.cols(),
            b.rows()
        )));
    }
    let l = cholesky(a)?;
    let n = a.rows();
    let mut x = b.clone();
    for col in 0..b.cols() {
        // Forward substitution: L y = b.
        for i in 0..n {
            let mut sum = x[(i, col)];
            for k in 0..i {
                sum -= l[(i, k)] * x[(k, col)];
            }
            x[(i, col)] = sum / l[(i, i)];
        }
        // Back substitution: L^T x = y.
        for i in (0..n).rev() {
            let mut sum = x[(i, col)];
            for k in (i + 1)..n {
                sum -= l[(k, i)] * x[(k, col)];
            }
            x[(i, col)] = sum / l[(i, i)];
        }
    }
    Ok(x)
}

/// Convenience single-RHS SPD solve.
pub fn solve_spd_vec(a: &Mat, b: &[f64]) -> Result<Vec<f64>> {
    let bm = Mat::from_vec(b.len(), 1, b.to_vec())?;
    Ok(solve_spd(a, &bm)?.col(0))
}

/// Inverse of an SPD matrix (small matrices only; used for k x k factors).
pub fn inv_spd(a: &Mat) -> Result<Mat> {
    solve_spd(a, &Mat::identity(a.rows()))
}

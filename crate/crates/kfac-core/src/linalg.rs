//! Dense linear-algebra kernels.
//!
//! Row-major `Matrix` is the universal carrier for activations, gradients,
//! covariance factors, and eigenvectors. On top of it this module provides
//! symmetric eigendecomposition (cyclic Jacobi), Kronecker products, explicit
//! inversion with partial pivoting, and the row-major `vec`/`unvec` pair used
//! to cross-check the matrix-form preconditioning shortcut against the dense
//! Kronecker route.
//!
//! Everything here is a pure function on immutable inputs and is safe to call
//! from any number of threads. All math is `f64`.

use crate::error::{Error, Result};

/// Maximum Jacobi sweeps before the eigensolver gives up.
const JACOBI_MAX_SWEEPS: usize = 100;

/// Convergence threshold: off-diagonal Frobenius norm relative to the input's
/// Frobenius norm.
const JACOBI_TOL: f64 = 1e-12;

/// Allowed asymmetry (relative to the largest entry) in `sym_eig` inputs.
const SYMMETRY_TOL: f64 = 1e-9;

/// Dense real matrix, row-major storage: `data[i * cols + j]` is entry (i, j).
#[derive(Clone, PartialEq)]
pub struct Matrix {
    rows: usize,
    cols: usize,
    data: Vec<f64>,
}

impl std::fmt::Debug for Matrix {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "Matrix({}x{})", self.rows, self.cols)?;
        if self.rows * self.cols <= 36 {
            for i in 0..self.rows {
                write!(f, "\n  {:?}", &self.data[i * self.cols..(i + 1) * self.cols])?;
            }
        }
        Ok(())
    }
}

impl Matrix {
    /// Build a matrix from row-major data. Rejects empty dimensions, length
    /// mismatches, and non-finite entries.
    pub fn new(rows: usize, cols: usize, data: Vec<f64>) -> Result<Self> {
        if rows == 0 || cols == 0 {
            return Err(Error::Dimension(format!(
                "matrix dimensions must be positive, got {rows}x{cols}"
            )));
        }
        let expect = rows
            .checked_mul(cols)
            .ok_or_else(|| Error::Dimension(format!("matrix size {rows}x{cols} overflows")))?;
        if data.len() != expect {
            return Err(Error::Dimension(format!(
                "data length {} does not match {rows}x{cols}",
                data.len()
            )));
        }
        if let Some(pos) = data.iter().position(|v| !v.is_finite()) {
            return Err(Error::Value(format!(
                "non-finite entry {} at flat index {pos}",
                data[pos]
            )));
        }
        Ok(Matrix { rows, cols, data })
    }

    /// All-zero matrix.
    pub fn zeros(rows: usize, cols: usize) -> Self {
        assert!(rows > 0 && cols > 0, "matrix dimensions must be positive");
        Matrix { rows, cols, data: vec![0.0; rows * cols] }
    }

    /// Identity matrix of order `n`.
    pub fn identity(n: usize) -> Self {
        let mut m = Matrix::zeros(n, n);
        for i in 0..n {
            m.data[i * n + i] = 1.0;
        }
        m
    }

    /// Build from a slice of equal-length rows.
    pub fn from_rows(rows: &[&[f64]]) -> Result<Self> {
        if rows.is_empty() {
            return Err(Error::Dimension("matrix needs at least one row".into()));
        }
        let cols = rows[0].len();
        let mut data = Vec::with_capacity(rows.len() * cols);
        for (i, r) in rows.iter().enumerate() {
            if r.len() != cols {
                return Err(Error::Dimension(format!(
                    "row {i} has {} entries, expected {cols}",
                    r.len()
                )));
            }
            data.extend_from_slice(r);
        }
        Matrix::new(rows.len(), cols, data)
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn cols(&self) -> usize {
        self.cols
    }

    pub fn is_square(&self) -> bool {
        self.rows == self.cols
    }

    /// Flat row-major view of the entries.
    pub fn as_slice(&self) -> &[f64] {
        &self.data
    }

    pub fn as_mut_slice(&mut self) -> &mut [f64] {
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

    /// Matrix product `self * other`.
    pub fn matmul(&self, other: &Matrix) -> Result<Matrix> {
        if self.cols != other.rows {
            return Err(Error::Dimension(format!(
                "cannot multiply {}x{} by {}x{}",
                self.rows, self.cols, other.rows, other.cols
            )));
        }
        let mut out = Matrix::zeros(self.rows, other.cols);
        for i in 0..self.rows {
            for k in 0..self.cols {
                let aik = self.data[i * self.cols + k];
                if aik == 0.0 {
                    continue;
                }
                let brow = &other.data[k * other.cols..(k + 1) * other.cols];
                let orow = &mut out.data[i * other.cols..(i + 1) * other.cols];
                for (o, &b) in orow.iter_mut().zip(brow) {
                    *o += aik * b;
                }
            }
        }
        Ok(out)
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

    /// Gram matrix `selfᵀ * self`; symmetric by construction.
    pub fn gram(&self) -> Matrix {
        let n = self.cols;
        let mut out = Matrix::zeros(n, n);
        for r in 0..self.rows {
            let row = &self.data[r * n..(r + 1) * n];
            for i in 0..n {
                let ri = row[i];
                if ri == 0.0 {
                    continue;
                }
                for j in i..n {
                    out.data[i * n + j] += ri * row[j];
                }
            }
        }
        for i in 0..n {
            for j in 0..i {
                out.data[i * n + j] = out.data[j * n + i];
            }
        }
        out
    }

    /// Entrywise sum with `other`.
    pub fn add(&self, other: &Matrix) -> Result<Matrix> {
        self.zip_with(other, |a, b| a + b)
    }

    pub fn sub(&self, other: &Matrix) -> Result<Matrix> {
        self.zip_with(other, |a, b| a - b)
    }

    fn zip_with(&self, other: &Matrix, f: impl Fn(f64, f64) -> f64) -> Result<Matrix> {
        if self.rows != other.rows || self.cols != other.cols {
            return Err(Error::Dimension(format!(
                "shape mismatch: {}x{} vs {}x{}",
                self.rows, self.cols, other.rows, other.cols
            )));
        }
        let data = self
            .data
            .iter()
            .zip(&other.data)
            .map(|(&a, &b)| f(a, b))
            .collect();
        Ok(Matrix { rows: self.rows, cols: self.cols, data })
    }

    /// Scale every entry by `s`.
    pub fn scale(&self, s: f64) -> Matrix {
        Matrix {
            rows: self.rows,
            cols: self.cols,
            data: self.data.iter().map(|&v| v * s).collect(),
        }
    }

    pub fn scale_in_place(&mut self, s: f64) {
        for v in &mut self.data {
            *v *= s;
        }
    }

    /// Largest absolute entry (max norm).
    pub fn max_abs(&self) -> f64 {
        self.data.iter().fold(0.0, |m, v| m.max(v.abs()))
    }

    /// Frobenius norm.
    pub fn frob_norm(&self) -> f64 {
        self.data.iter().map(|v| v * v).sum::<f64>().sqrt()
    }

    /// Sum of the entrywise product with `other` (the Frobenius inner
    /// product, i.e. `trace(selfᵀ other)`).
    pub fn dot(&self, other: &Matrix) -> Result<f64> {
        if self.rows != other.rows || self.cols != other.cols {
            return Err(Error::Dimension(format!(
                "shape mismatch: {}x{} vs {}x{}",
                self.rows, self.cols, other.rows, other.cols
            )));
        }
        Ok(self.data.iter().zip(&other.data).map(|(a, b)| a * b).sum())
    }

    /// `self + g * I`; requires a square receiver.
    pub fn add_scaled_identity(&self, g: f64) -> Result<Matrix> {
        if !self.is_square() {
            return Err(Error::Dimension(format!(
                "cannot add identity to {}x{}",
                self.rows, self.cols
            )));
        }
        let mut out = self.clone();
        for i in 0..self.rows {
            out.data[i * self.cols + i] += g;
        }
        Ok(out)
    }

    /// Symmetric part `(M + Mᵀ) / 2`; requires a square receiver.
    pub fn symmetrized(&self) -> Result<Matrix> {
        if !self.is_square() {
            return Err(Error::Dimension(format!(
                "cannot symmetrize {}x{}",
                self.rows, self.cols
            )));
        }
        let n = self.rows;
        let mut out = self.clone();
        for i in 0..n {
            for j in (i + 1)..n {
                let v = 0.5 * (self.data[i * n + j] + self.data[j * n + i]);
                out.data[i * n + j] = v;
                out.data[j * n + i] = v;
            }
        }
        Ok(out)
    }

    /// Largest absolute deviation from symmetry, `max |M - Mᵀ|`.
    pub fn asymmetry(&self) -> f64 {
        let n = self.rows.min(self.cols);
        let mut worst: f64 = 0.0;
        for i in 0..n {
            for j in (i + 1)..n {
                worst = worst.max((self.get(i, j) - self.get(j, i)).abs());
            }
        }
        worst
    }

    pub fn all_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }
}

impl std::ops::Index<(usize, usize)> for Matrix {
    type Output = f64;
    fn index(&self, (i, j): (usize, usize)) -> &f64 {
        &self.data[i * self.cols + j]
    }
}

impl std::ops::IndexMut<(usize, usize)> for Matrix {
    fn index_mut(&mut self, (i, j): (usize, usize)) -> &mut f64 {
        &mut self.data[i * self.cols + j]
    }
}

/// Eigendecomposition of a symmetric matrix: columns of `q` are eigenvectors,
/// `lambda` holds the matching eigenvalues in descending order.
#[derive(Clone, Debug)]
pub struct SymEig {
    pub q: Matrix,
    pub lambda: Vec<f64>,
}

impl SymEig {
    pub fn dim(&self) -> usize {
        self.q.rows()
    }

    /// Rebuild `Q diag(lambda) Qᵀ`.
    pub fn reconstruct(&self) -> Matrix {
        let n = self.dim();
        let mut scaled = self.q.clone();
        for i in 0..n {
            for j in 0..n {
                scaled[(i, j)] *= self.lambda[j];
            }
        }
        scaled.matmul(&self.q.transpose()).expect("square product")
    }

    /// Clamp eigenvalues below zero to zero. Covariance factors are PSD in
    /// exact arithmetic; negative eigenvalues are numerical noise and must not
    /// reach a denominator.
    pub fn clamp_psd(&mut self) {
        for v in &mut self.lambda {
            if *v < 0.0 {
                *v = 0.0;
            }
        }
    }
}

/// Symmetric eigendecomposition by cyclic Jacobi.
///
/// The input is symmetrized as `(M + Mᵀ)/2` first; asymmetry beyond
/// `1e-9 * max(1, |M|_max)` is rejected. Rotations run in a fixed sweep order,
/// so identical input bits give identical output bits. Eigenvalues are
/// returned in descending order.
pub fn sym_eig(m: &Matrix) -> Result<SymEig> {
    if !m.is_square() {
        return Err(Error::Dimension(format!(
            "eigendecomposition needs a square matrix, got {}x{}",
            m.rows(),
            m.cols()
        )));
    }
    if !m.all_finite() {
        return Err(Error::Value("eigendecomposition input has non-finite entries".into()));
    }
    let scale = m.max_abs().max(1.0);
    if m.asymmetry() > SYMMETRY_TOL * scale {
        return Err(Error::Value(format!(
            "matrix is not symmetric within tolerance (asymmetry {:.3e})",
            m.asymmetry()
        )));
    }

    let n = m.rows();
    let mut a = m.symmetrized()?;
    let mut q = Matrix::identity(n);
    let frob = a.frob_norm();
    let threshold = JACOBI_TOL * frob;

    let mut converged = off_diag_norm(&a) <= threshold;
    for _ in 0..JACOBI_MAX_SWEEPS {
        if converged {
            break;
        }
        for p in 0..n {
            for qi in (p + 1)..n {
                rotate(&mut a, &mut q, p, qi);
            }
        }
        converged = off_diag_norm(&a) <= threshold;
    }
    if !converged {
        return Err(Error::Value(format!(
            "Jacobi eigendecomposition did not converge in {JACOBI_MAX_SWEEPS} sweeps"
        )));
    }

    // Sort eigenpairs by descending eigenvalue; ties keep diagonal order so
    // the result stays deterministic.
    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by(|&i, &j| {
        a.get(j, j)
            .partial_cmp(&a.get(i, i))
            .expect("finite eigenvalues")
            .then(i.cmp(&j))
    });

    let lambda: Vec<f64> = order.iter().map(|&i| a.get(i, i)).collect();
    let mut vectors = Matrix::zeros(n, n);
    for (dst, &src) in order.iter().enumerate() {
        for r in 0..n {
            vectors[(r, dst)] = q.get(r, src);
        }
    }
    Ok(SymEig { q: vectors, lambda })
}

/// Frobenius norm of the strictly off-diagonal part.
fn off_diag_norm(a: &Matrix) -> f64 {
    let n = a.rows();
    let mut s = 0.0;
    for i in 0..n {
        for j in (i + 1)..n {
            let v = a.get(i, j);
            s += 2.0 * v * v;
        }
    }
    s.sqrt()
}

/// One Jacobi rotation zeroing `a[p][q]`, accumulated into `vecs`.
fn rotate(a: &mut Matrix, vecs: &mut Matrix, p: usize, q: usize) {
    let apq = a.get(p, q);
    if apq == 0.0 {
        return;
    }
    let tau = (a.get(q, q) - a.get(p, p)) / (2.0 * apq);
    let t = if tau >= 0.0 {
        1.0 / (tau + (1.0 + tau * tau).sqrt())
    } else {
        -1.0 / (-tau + (1.0 + tau * tau).sqrt())
    };
    let c = 1.0 / (1.0 + t * t).sqrt();
    let s = t * c;

    let n = a.rows();
    // A <- Jᵀ A J with J the (p,q) plane rotation.
    for k in 0..n {
        let akp = a.get(k, p);
        let akq = a.get(k, q);
        a.set(k, p, c * akp - s * akq);
        a.set(k, q, s * akp + c * akq);
    }
    for k in 0..n {
        let apk = a.get(p, k);
        let aqk = a.get(q, k);
        a.set(p, k, c * apk - s * aqk);
        a.set(q, k, s * apk + c * aqk);
    }
    // The rotation is exact on the (p,q) pair; pin it to kill drift.
    a.set(p, q, 0.0);
    a.set(q, p, 0.0);

    for k in 0..n {
        let vkp = vecs.get(k, p);
        let vkq = vecs.get(k, q);
        vecs.set(k, p, c * vkp - s * vkq);
        vecs.set(k, q, s * vkp + c * vkq);
    }
}

/// Kronecker product `a ⊗ b`: block (i, j) of the result is `a[i][j] * b`.
pub fn kron(a: &Matrix, b: &Matrix) -> Result<Matrix> {
    let rows = a
        .rows()
        .checked_mul(b.rows())
        .ok_or_else(|| Error::Dimension("Kronecker row count overflows".into()))?;
    let cols = a
        .cols()
        .checked_mul(b.cols())
        .ok_or_else(|| Error::Dimension("Kronecker column count overflows".into()))?;
    rows.checked_mul(cols)
        .ok_or_else(|| Error::Dimension("Kronecker product size overflows".into()))?;

    let mut out = Matrix::zeros(rows, cols);
    for ia in 0..a.rows() {
        for ja in 0..a.cols() {
            let f = a.get(ia, ja);
            if f == 0.0 {
                continue;
            }
            for ib in 0..b.rows() {
                for jb in 0..b.cols() {
                    out.set(ia * b.rows() + ib, ja * b.cols() + jb, f * b.get(ib, jb));
                }
            }
        }
    }
    Ok(out)
}

/// Explicit inverse by Gauss-Jordan elimination with partial pivoting.
pub fn inverse(m: &Matrix) -> Result<Matrix> {
    if !m.is_square() {
        return Err(Error::Dimension(format!(
            "inverse needs a square matrix, got {}x{}",
            m.rows(),
            m.cols()
        )));
    }
    let n = m.rows();
    let tol = (n as f64) * f64::EPSILON * m.max_abs();

    let mut a = m.clone();
    let mut inv = Matrix::identity(n);
    for col in 0..n {
        let pivot_row = (col..n)
            .max_by(|&r1, &r2| {
                a.get(r1, col)
                    .abs()
                    .partial_cmp(&a.get(r2, col).abs())
                    .expect("finite pivots")
            })
            .expect("non-empty pivot range");
        let pivot = a.get(pivot_row, col);
        if pivot.abs() <= tol {
            return Err(Error::Singular { pivot: col });
        }
        if pivot_row != col {
            swap_rows(&mut a, pivot_row, col);
            swap_rows(&mut inv, pivot_row, col);
        }
        let inv_pivot = 1.0 / pivot;
        for j in 0..n {
            a[(col, j)] *= inv_pivot;
            inv[(col, j)] *= inv_pivot;
        }
        for r in 0..n {
            if r == col {
                continue;
            }
            let f = a.get(r, col);
            if f == 0.0 {
                continue;
            }
            for j in 0..n {
                let av = a.get(col, j);
                let iv = inv.get(col, j);
                a[(r, j)] -= f * av;
                inv[(r, j)] -= f * iv;
            }
        }
    }
    Ok(inv)
}

fn swap_rows(m: &mut Matrix, r1: usize, r2: usize) {
    if r1 == r2 {
        return;
    }
    let cols = m.cols();
    for j in 0..cols {
        let a = m.get(r1, j);
        let b = m.get(r2, j);
        m.set(r1, j, b);
        m.set(r2, j, a);
    }
}

/// Row-major vectorization: stacks the rows of `m` into a single column, so
/// `[[1,2],[3,4]]` becomes `[1,2,3,4]ᵀ`.
pub fn vec_rows(m: &Matrix) -> Matrix {
    Matrix {
        rows: m.rows() * m.cols(),
        cols: 1,
        data: m.as_slice().to_vec(),
    }
}

/// Inverse of [`vec_rows`]: reshape a column back into `rows x cols`.
pub fn unvec_rows(v: &Matrix, rows: usize, cols: usize) -> Result<Matrix> {
    if v.cols() != 1 {
        return Err(Error::Dimension(format!(
            "unvec expects a column vector, got {}x{}",
            v.rows(),
            v.cols()
        )));
    }
    if v.rows() != rows * cols {
        return Err(Error::Dimension(format!(
            "cannot reshape length {} into {rows}x{cols}",
            v.rows()
        )));
    }
    Matrix::new(rows, cols, v.as_slice().to_vec())
}

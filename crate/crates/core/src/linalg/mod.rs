//! Dense real matrices and symmetric eigensolvers.
//!
//! [`Matrix`] is a plain row-major buffer. [`SymMatrix`] is a square matrix
//! symmetrised on construction; every kernel and compressed Laplacian lives
//! in one. Two eigensolvers are provided: a dense Householder + implicit QL
//! solver ([`eigh_descending`]) and block subspace iteration with
//! Rayleigh-Ritz projection ([`eigh_topk`]) for the top of large spectra.

mod chol;
mod dense;
mod matrix;
mod subspace;

pub use chol::{cholesky, cholesky_solve, Cholesky};
pub use dense::{eigh_descending, eigvalsh_descending};
pub use matrix::{dot, norm, Matrix};
pub use subspace::{eigh_topk, eigh_topk_operator, TopkOptions};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::scalar::Real;

/// Square matrix with `m[i][j] == m[j][i]`.
#[derive(Clone, Debug, PartialEq)]
pub struct SymMatrix<T> {
    inner: Matrix<T>,
}

impl<T: Real> SymMatrix<T> {
    /// Symmetrises `m` as `(m + mᵀ) / 2`.
    pub fn new(m: Matrix<T>) -> Result<Self> {
        if m.rows() != m.cols() {
            return Err(Error::Shape(format!(
                "symmetric matrix must be square, got {}x{}",
                m.rows(),
                m.cols()
            )));
        }
        let n = m.rows();
        let mut inner = m;
        let half = T::lit(0.5);
        for i in 0..n {
            for j in (i + 1)..n {
                let v = (inner[(i, j)] + inner[(j, i)]) * half;
                inner[(i, j)] = v;
                inner[(j, i)] = v;
            }
        }
        Ok(Self { inner })
    }

    /// Builds from a function evaluated on the upper triangle.
    pub fn from_upper_fn(dim: usize, mut f: impl FnMut(usize, usize) -> T) -> Self {
        let mut inner = Matrix::zeros(dim, dim);
        for i in 0..dim {
            for j in i..dim {
                let v = f(i, j);
                inner[(i, j)] = v;
                inner[(j, i)] = v;
            }
        }
        Self { inner }
    }

    pub fn zeros(dim: usize) -> Self {
        Self {
            inner: Matrix::zeros(dim, dim),
        }
    }

    pub fn dim(&self) -> usize {
        self.inner.rows()
    }

    pub fn as_matrix(&self) -> &Matrix<T> {
        &self.inner
    }

    pub fn into_matrix(self) -> Matrix<T> {
        self.inner
    }

    pub fn get(&self, i: usize, j: usize) -> T {
        self.inner[(i, j)]
    }

    pub fn trace(&self) -> T {
        (0..self.dim()).map(|i| self.inner[(i, i)]).sum()
    }

    pub fn is_finite(&self) -> bool {
        self.inner.is_finite()
    }

    /// `max |m_ij - m_ji|` relative to `max |m_ij|` of an unsymmetrised matrix.
    pub fn relative_asymmetry(m: &Matrix<T>) -> T {
        let scale = m.max_abs();
        if scale == T::zero() {
            return T::zero();
        }
        let mut worst = T::zero();
        for i in 0..m.rows() {
            for j in (i + 1)..m.cols() {
                worst = worst.max((m[(i, j)] - m[(j, i)]).abs());
            }
        }
        worst / scale
    }

    /// Applies `f(i, j, value)` to every entry and re-symmetrises.
    pub fn map_entries(&self, mut f: impl FnMut(usize, usize, T) -> T) -> Self {
        Self::from_upper_fn(self.dim(), |i, j| f(i, j, self.inner[(i, j)]))
    }

    pub fn add(&self, other: &Self) -> Result<Self> {
        Ok(Self {
            inner: self.inner.add(&other.inner)?,
        })
    }

    /// Double centring `H M H` with `H = I - 11ᵀ/n`.
    pub fn double_centered(&self) -> Self {
        let n = self.dim();
        if n == 0 {
            return self.clone();
        }
        let nf = T::from_count(n);
        let row_means: Vec<T> = (0..n)
            .map(|i| self.inner.row(i).iter().copied().sum::<T>() / nf)
            .collect();
        let grand = row_means.iter().copied().sum::<T>() / nf;
        Self::from_upper_fn(n, |i, j| {
            self.inner[(i, j)] - row_means[i] - row_means[j] + grand
        })
    }

    /// Dense matrix-vector product.
    pub fn matvec(&self, x: &[T]) -> Vec<T> {
        self.inner.matvec(x)
    }
}

/// Which solver produced a [`Spectrum`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SolverTag {
    Dense,
    Iterative,
}

/// Leading eigenpairs, eigenvalues sorted non-increasing.
///
/// `eigenvectors` is `dim x k` with orthonormal columns. Each eigenvector is
/// signed so that its largest-magnitude entry is positive (lowest index on
/// ties).
#[derive(Clone, Debug)]
pub struct Spectrum<T> {
    pub eigenvalues: Vec<T>,
    pub eigenvectors: Matrix<T>,
    pub solver: SolverTag,
}

impl<T: Real> Spectrum<T> {
    pub fn k(&self) -> usize {
        self.eigenvalues.len()
    }

    pub fn dim(&self) -> usize {
        self.eigenvectors.rows()
    }

    pub fn vector(&self, i: usize) -> Vec<T> {
        self.eigenvectors.column(i)
    }

    /// Columns `range` of the eigenvector matrix.
    pub fn columns(&self, range: std::ops::Range<usize>) -> Matrix<T> {
        self.eigenvectors.select_columns(range)
    }

    /// `max_i ‖M v_i − λ_i v_i‖₂`.
    pub fn max_residual(&self, m: &SymMatrix<T>) -> T {
        let mut worst = T::zero();
        for i in 0..self.k() {
            let v = self.vector(i);
            let mv = m.matvec(&v);
            let r: T = mv
                .iter()
                .zip(&v)
                .map(|(&a, &b)| {
                    let d = a - self.eigenvalues[i] * b;
                    d * d
                })
                .sum::<T>()
                .sqrt();
            worst = worst.max(r);
        }
        worst
    }

    /// `max |VᵀV − I|`.
    pub fn orthonormality_error(&self) -> T {
        orthonormality_error(&self.eigenvectors)
    }
}

/// Flips the sign of every column so its largest-magnitude entry is positive.
pub(crate) fn canonicalize_signs<T: Real>(vectors: &mut Matrix<T>) {
    for j in 0..vectors.cols() {
        let mut best = 0usize;
        let mut best_abs = T::neg_infinity();
        for i in 0..vectors.rows() {
            let a = vectors[(i, j)].abs();
            if a > best_abs {
                best_abs = a;
                best = i;
            }
        }
        if vectors.rows() > 0 && vectors[(best, j)] < T::zero() {
            for i in 0..vectors.rows() {
                vectors[(i, j)] = -vectors[(i, j)];
            }
        }
    }
}

/// `max |QᵀQ − I|` for a matrix with (intended) orthonormal columns.
pub fn orthonormality_error<T: Real>(q: &Matrix<T>) -> T {
    let g = q.tr_matmul(q).expect("same matrix");
    let mut worst = T::zero();
    for i in 0..g.rows() {
        for j in 0..g.cols() {
            let target = if i == j { T::one() } else { T::zero() };
            worst = worst.max((g[(i, j)] - target).abs());
        }
    }
    worst
}

/// Orthonormalises the columns of `m` with two passes of modified
/// Gram-Schmidt. Columns that become numerically dependent are dropped.
pub fn orthonormalize_columns<T: Real>(m: &Matrix<T>) -> Matrix<T> {
    let rows = m.transpose();
    let kept = orthonormalize_rows(&rows, None);
    kept.transpose()
}

/// Orthonormalises rows in place order. Dependent rows are replaced by
/// vectors drawn from `refill` when provided, otherwise dropped.
pub(crate) fn orthonormalize_rows<T: Real>(
    block: &Matrix<T>,
    mut refill: Option<&mut dyn FnMut(usize) -> Vec<T>>,
) -> Matrix<T> {
    let dim = block.cols();
    let mut out: Vec<Vec<T>> = Vec::with_capacity(block.rows());
    for r in 0..block.rows() {
        let mut v = block.row(r).to_vec();
        let mut attempts = 0;
        loop {
            let original = norm(&v);
            for _pass in 0..2 {
                for q in &out {
                    let c = dot(q, &v);
                    for (vi, &qi) in v.iter_mut().zip(q) {
                        *vi -= c * qi;
                    }
                }
            }
            let n = norm(&v);
            let tiny = T::epsilon() * T::lit(1e3) * original.max(T::min_positive_value());
            if n > tiny && n > T::zero() {
                for vi in &mut v {
                    *vi /= n;
                }
                out.push(v);
                break;
            }
            match refill.as_mut() {
                Some(f) if attempts < 8 => {
                    attempts += 1;
                    v = f(dim);
                }
                _ => break,
            }
        }
    }
    let k = out.len();
    let mut data = Vec::with_capacity(k * dim);
    for v in out {
        data.extend(v);
    }
    Matrix::from_vec(k, dim, data).expect("consistent shape")
}

/// Cosines of the principal angles between `span(a)` and `span(b)`, both
/// with orthonormal columns. Sorted non-increasing.
pub fn principal_cosines<T: Real>(a: &Matrix<T>, b: &Matrix<T>) -> Result<Vec<T>> {
    let c = a.tr_matmul(b)?;
    let small = if c.rows() <= c.cols() {
        c.matmul_nt(&c)?
    } else {
        c.tr_matmul(&c)?
    };
    let vals = eigvalsh_descending(&SymMatrix::new(small)?)?;
    Ok(vals
        .into_iter()
        .map(|v| v.max(T::zero()).sqrt().min(T::one()))
        .collect())
}

/// Operator view of a symmetric matrix for the iterative eigensolver.
pub trait SymOperator<T: Real>: Sync {
    fn dim(&self) -> usize;

    /// Applies the operator to every row of `block` (rows are vectors).
    fn apply_rows(&self, block: &Matrix<T>) -> Matrix<T>;
}

impl<T: Real> SymOperator<T> for SymMatrix<T> {
    fn dim(&self) -> usize {
        SymMatrix::dim(self)
    }

    fn apply_rows(&self, block: &Matrix<T>) -> Matrix<T> {
        // (M x)ᵀ = xᵀ M for symmetric M.
        block.matmul(&self.inner).expect("operator dimension")
    }
}

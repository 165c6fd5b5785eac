use super::{dot, Matrix, SymMatrix};
use crate::error::{Error, Result};
use crate::scalar::Real;

/// Lower-triangular Cholesky factor `L` with `A = L Lᵀ`.
#[derive(Clone, Debug)]
pub struct Cholesky<T> {
    l: Matrix<T>,
}

/// Factorises a symmetric positive-definite matrix.
///
/// A pivot below `n · ε · max(diag A)` is treated as singular; the error
/// carries a ridge large enough to make the system comfortably solvable.
pub fn cholesky<T: Real>(a: &SymMatrix<T>) -> Result<Cholesky<T>> {
    if !a.is_finite() {
        return Err(Error::NonFiniteInput);
    }
    let n = a.dim();
    let max_diag = (0..n).fold(T::zero(), |m, i| m.max(a.get(i, i).abs()));
    let threshold = T::from_count(n.max(1)) * T::epsilon() * max_diag;
    let mut l = Matrix::zeros(n, n);
    for j in 0..n {
        let lj = l.row(j)[..j].to_vec();
        let pivot = a.get(j, j) - dot(&lj, &lj);
        if !(pivot > threshold) {
            let trace = a.trace().to_f64_lossy();
            return Err(Error::SingularKernel {
                suggested_ridge: 1e-8 * trace / n as f64,
            });
        }
        let d = pivot.sqrt();
        l[(j, j)] = d;
        for i in (j + 1)..n {
            let s = a.get(i, j) - dot(&l.row(i)[..j], &lj);
            l[(i, j)] = s / d;
        }
    }
    Ok(Cholesky { l })
}

impl<T: Real> Cholesky<T> {
    pub fn factor(&self) -> &Matrix<T> {
        &self.l
    }

    /// Solves `A X = B` for every column of `B`.
    pub fn solve(&self, b: &Matrix<T>) -> Result<Matrix<T>> {
        let n = self.l.rows();
        if b.rows() != n {
            return Err(Error::Shape(format!(
                "rhs has {} rows, system has {n}",
                b.rows()
            )));
        }
        let mut x = b.transpose();
        for r in 0..x.rows() {
            let col = x.row_mut(r);
            // L y = b
            for i in 0..n {
                let s = col[i] - dot(&self.l.row(i)[..i], &col[..i]);
                col[i] = s / self.l[(i, i)];
            }
            // Lᵀ x = y
            for i in (0..n).rev() {
                let mut s = col[i];
                for k in (i + 1)..n {
                    s -= self.l[(k, i)] * col[k];
                }
                col[i] = s / self.l[(i, i)];
            }
        }
        Ok(x.transpose())
    }
}

/// Convenience: factor and solve in one call.
pub fn cholesky_solve<T: Real>(a: &SymMatrix<T>, b: &Matrix<T>) -> Result<Matrix<T>> {
    cholesky(a)?.solve(b)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn solves_spd_system() {
        let a =
            SymMatrix::new(Matrix::from_rows(&[vec![4.0, 1.0], vec![1.0, 3.0]]).unwrap()).unwrap();
        let b = Matrix::from_rows(&[vec![1.0], vec![2.0]]).unwrap();
        let x = cholesky_solve(&a, &b).unwrap();
        let back = a.as_matrix().matmul(&x).unwrap();
        assert!(back.sub(&b).unwrap().max_abs() < 1e-14);
    }

    #[test]
    fn singular_matrix_reports_ridge() {
        let a = SymMatrix::from_upper_fn(3, |_, _| 1.0);
        match cholesky(&a) {
            Err(Error::SingularKernel { suggested_ridge }) => assert!(suggested_ridge > 0.0),
            other => panic!("unexpected {other:?}"),
        }
    }
}

//! Householder tridiagonalisation followed by implicit QL iteration.
//!
//! The working matrix is stored transposed relative to the textbook
//! column-oriented formulation so that every inner loop walks contiguous
//! memory, and on exit row `j` of the work buffer is eigenvector `j`.

use super::{canonicalize_signs, Matrix, SolverTag, Spectrum, SymMatrix};
use crate::error::{Error, Result};
use crate::scalar::Real;

/// Full eigendecomposition, eigenvalues non-increasing.
pub fn eigh_descending<T: Real>(m: &SymMatrix<T>) -> Result<Spectrum<T>> {
    if !m.is_finite() {
        return Err(Error::NonFiniteInput);
    }
    let n = m.dim();
    if n == 0 {
        return Ok(Spectrum {
            eigenvalues: Vec::new(),
            eigenvectors: Matrix::zeros(0, 0),
            solver: SolverTag::Dense,
        });
    }
    let mut w = m.as_matrix().as_slice().to_vec();
    let mut d = vec![T::zero(); n];
    let mut e = vec![T::zero(); n];
    tred2(n, &mut w, &mut d, &mut e, true);
    tql2(n, &mut d, &mut e, Some(&mut w))?;

    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by(|&i, &j| d[j].partial_cmp(&d[i]).expect("finite eigenvalues"));
    let eigenvalues = order.iter().map(|&i| d[i]).collect();
    let mut vectors = Matrix::zeros(n, n);
    for (col, &src) in order.iter().enumerate() {
        let row = &w[src * n..(src + 1) * n];
        for (i, &v) in row.iter().enumerate() {
            vectors[(i, col)] = v;
        }
    }
    canonicalize_signs(&mut vectors);
    Ok(Spectrum {
        eigenvalues,
        eigenvectors: vectors,
        solver: SolverTag::Dense,
    })
}

/// Eigenvalues only, non-increasing. Skips the O(n³) back-transformation.
pub fn eigvalsh_descending<T: Real>(m: &SymMatrix<T>) -> Result<Vec<T>> {
    if !m.is_finite() {
        return Err(Error::NonFiniteInput);
    }
    let n = m.dim();
    if n == 0 {
        return Ok(Vec::new());
    }
    let mut w = m.as_matrix().as_slice().to_vec();
    let mut d = vec![T::zero(); n];
    let mut e = vec![T::zero(); n];
    tred2(n, &mut w, &mut d, &mut e, false);
    tql2(n, &mut d, &mut e, None)?;
    d.sort_by(|a, b| b.partial_cmp(a).expect("finite eigenvalues"));
    Ok(d)
}

/// Householder reduction to tridiagonal form. `w[j*n + k]` holds the
/// textbook `V[k][j]`.
fn tred2<T: Real>(n: usize, w: &mut [T], d: &mut [T], e: &mut [T], accumulate: bool) {
    macro_rules! v {
        ($k:expr, $j:expr) => {
            w[($j) * n + ($k)]
        };
    }
    for j in 0..n {
        d[j] = v!(n - 1, j);
    }

    for i in (1..n).rev() {
        let mut scale = T::zero();
        let mut h = T::zero();
        for k in 0..i {
            scale += d[k].abs();
        }
        if scale == T::zero() {
            e[i] = d[i - 1];
            for j in 0..i {
                d[j] = v!(i - 1, j);
                v!(i, j) = T::zero();
                v!(j, i) = T::zero();
            }
        } else {
            for k in 0..i {
                d[k] /= scale;
                h += d[k] * d[k];
            }
            let mut f = d[i - 1];
            let mut g = h.sqrt();
            if f > T::zero() {
                g = -g;
            }
            e[i] = scale * g;
            h -= f * g;
            d[i - 1] = f - g;
            for ej in e.iter_mut().take(i) {
                *ej = T::zero();
            }

            for j in 0..i {
                f = d[j];
                v!(j, i) = f;
                g = e[j] + v!(j, j) * f;
                let col = &w[j * n..j * n + i];
                for k in (j + 1)..i {
                    g += col[k] * d[k];
                    e[k] += col[k] * f;
                }
                e[j] = g;
            }
            f = T::zero();
            for j in 0..i {
                e[j] /= h;
                f += e[j] * d[j];
            }
            let hh = f / (h + h);
            for j in 0..i {
                e[j] -= hh * d[j];
            }
            for j in 0..i {
                f = d[j];
                g = e[j];
                let col = &mut w[j * n..j * n + i];
                for k in j..i {
                    col[k] -= f * e[k] + g * d[k];
                }
                d[j] = v!(i - 1, j);
                v!(i, j) = T::zero();
            }
        }
        d[i] = h;
    }

    if !accumulate {
        for j in 0..n {
            d[j] = v!(j, j);
        }
        e[0] = T::zero();
        return;
    }

    for i in 0..n - 1 {
        v!(n - 1, i) = v!(i, i);
        v!(i, i) = T::one();
        let h = d[i + 1];
        if h != T::zero() {
            for k in 0..=i {
                d[k] = v!(k, i + 1) / h;
            }
            for j in 0..=i {
                let mut g = T::zero();
                for k in 0..=i {
                    g += v!(k, i + 1) * v!(k, j);
                }
                for k in 0..=i {
                    v!(k, j) -= g * d[k];
                }
            }
        }
        for k in 0..=i {
            v!(k, i + 1) = T::zero();
        }
    }
    for j in 0..n {
        d[j] = v!(n - 1, j);
        v!(n - 1, j) = T::zero();
    }
    v!(n - 1, n - 1) = T::one();
    e[0] = T::zero();
}

/// Implicit QL on the tridiagonal `(d, e)`; rotations are accumulated into
/// rows of `w` when present.
fn tql2<T: Real>(n: usize, d: &mut [T], e: &mut [T], mut w: Option<&mut [T]>) -> Result<()> {
    for i in 1..n {
        e[i - 1] = e[i];
    }
    e[n - 1] = T::zero();

    let mut f = T::zero();
    let mut tst1 = T::zero();
    let eps = T::epsilon();
    let max_iter = 60 * n.max(1);

    for l in 0..n {
        tst1 = tst1.max(d[l].abs() + e[l].abs());
        let mut m = l;
        while m < n {
            if e[m].abs() <= eps * tst1 {
                break;
            }
            m += 1;
        }
        let m = m.min(n - 1);

        if m > l {
            let mut iter = 0;
            loop {
                iter += 1;
                if iter > max_iter {
                    return Err(Error::ConvergenceFailure {
                        iterations: iter,
                        residual: e[l].abs().to_f64_lossy(),
                    });
                }
                let mut g = d[l];
                let mut p = (d[l + 1] - g) / (T::lit(2.0) * e[l]);
                let mut r = p.hypot(T::one());
                if p < T::zero() {
                    r = -r;
                }
                d[l] = e[l] / (p + r);
                d[l + 1] = e[l] * (p + r);
                let dl1 = d[l + 1];
                let mut h = g - d[l];
                for di in d.iter_mut().take(n).skip(l + 2) {
                    *di -= h;
                }
                f += h;

                p = d[m];
                let mut c = T::one();
                let mut c2 = c;
                let mut c3 = c;
                let el1 = e[l + 1];
                let mut s = T::zero();
                let mut s2 = T::zero();
                for i in (l..m).rev() {
                    c3 = c2;
                    c2 = c;
                    s2 = s;
                    g = c * e[i];
                    h = c * p;
                    r = p.hypot(e[i]);
                    e[i + 1] = s * r;
                    s = e[i] / r;
                    c = p / r;
                    p = c * d[i] - s * g;
                    d[i + 1] = h + s * (c * g + s * d[i]);

                    if let Some(w) = w.as_deref_mut() {
                        let (lo, hi) = w.split_at_mut((i + 1) * n);
                        let vi = &mut lo[i * n..];
                        let vi1 = &mut hi[..n];
                        for k in 0..n {
                            let hk = vi1[k];
                            vi1[k] = s * vi[k] + c * hk;
                            vi[k] = c * vi[k] - s * hk;
                        }
                    }
                }
                p = -s * s2 * c3 * el1 * e[l] / dl1;
                e[l] = s * p;
                d[l] = c * p;

                if e[l].abs() <= eps * tst1 {
                    break;
                }
            }
        }
        d[l] += f;
        e[l] = T::zero();
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random_sym(n: usize, seed: u64) -> SymMatrix<f64> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let m = Matrix::from_fn(n, n, |_, _| rng.gen_range(-1.0..1.0));
        SymMatrix::new(m).unwrap()
    }

    /// Cyclic Jacobi rotations: an independent reference solver.
    fn jacobi_eigenvalues(m: &SymMatrix<f64>) -> Vec<f64> {
        let n = m.dim();
        let mut a = m.as_matrix().clone();
        for _sweep in 0..100 {
            let off: f64 = (0..n)
                .flat_map(|i| (0..n).map(move |j| (i, j)))
                .filter(|(i, j)| i != j)
                .map(|(i, j)| a[(i, j)] * a[(i, j)])
                .sum();
            if off < 1e-30 {
                break;
            }
            for p in 0..n {
                for q in (p + 1)..n {
                    if a[(p, q)].abs() < 1e-300 {
                        continue;
                    }
                    let theta = (a[(q, q)] - a[(p, p)]) / (2.0 * a[(p, q)]);
                    let t = theta.signum() / (theta.abs() + (theta * theta + 1.0).sqrt());
                    let t = if theta == 0.0 { 1.0 } else { t };
                    let c = 1.0 / (t * t + 1.0).sqrt();
                    let s = t * c;
                    for k in 0..n {
                        let akp = a[(k, p)];
                        let akq = a[(k, q)];
                        a[(k, p)] = c * akp - s * akq;
                        a[(k, q)] = s * akp + c * akq;
                    }
                    for k in 0..n {
                        let apk = a[(p, k)];
                        let aqk = a[(q, k)];
                        a[(p, k)] = c * apk - s * aqk;
                        a[(q, k)] = s * apk + c * aqk;
                    }
                }
            }
        }
        let mut vals: Vec<f64> = (0..n).map(|i| a[(i, i)]).collect();
        vals.sort_by(|a, b| b.partial_cmp(a).unwrap());
        vals
    }

    #[test]
    fn diagonal_matrix() {
        let m = SymMatrix::from_upper_fn(2, |i, j| if i == j { [3.0, 1.0][i] } else { 0.0 });
        let s = eigh_descending(&m).unwrap();
        assert_eq!(s.eigenvalues, vec![3.0, 1.0]);
        assert_eq!(s.eigenvectors, Matrix::identity(2));
    }

    #[test]
    fn rank_one_ones() {
        let m = SymMatrix::from_upper_fn(2, |_, _| 1.0f64);
        let s = eigh_descending(&m).unwrap();
        assert!((s.eigenvalues[0] - 2.0).abs() < 1e-14);
        assert!(s.eigenvalues[1].abs() < 1e-14);
    }

    #[test]
    fn matches_jacobi_reference() {
        for seed in 0..5 {
            let m = random_sym(6, seed);
            let s = eigh_descending(&m).unwrap();
            let reference = jacobi_eigenvalues(&m);
            for (a, b) in s.eigenvalues.iter().zip(&reference) {
                assert!((a - b).abs() < 1e-8, "{a} vs {b}");
            }
            assert!(s.max_residual(&m) < 1e-10);
            assert!(s.orthonormality_error() < 1e-12);
            let vals = eigvalsh_descending(&m).unwrap();
            for (a, b) in vals.iter().zip(&s.eigenvalues) {
                assert!((a - b).abs() < 1e-10);
            }
        }
    }

    #[test]
    fn sign_convention() {
        let s = eigh_descending(&random_sym(9, 3)).unwrap();
        for j in 0..9 {
            let col = s.vector(j);
            let best = col
                .iter()
                .cloned()
                .fold(0.0f64, |a, b| if b.abs() > a.abs() { b } else { a });
            assert!(best > 0.0);
        }
    }

    #[test]
    fn non_finite_rejected() {
        let m = SymMatrix::from_upper_fn(2, |i, j| if i == j { f64::NAN } else { 0.0 });
        assert!(matches!(eigh_descending(&m), Err(Error::NonFiniteInput)));
        assert!(matches!(
            eigvalsh_descending(&m),
            Err(Error::NonFiniteInput)
        ));
    }

    #[test]
    fn one_by_one_and_f32() {
        let m = SymMatrix::from_upper_fn(1, |_, _| -4.0f32);
        let s = eigh_descending(&m).unwrap();
        assert_eq!(s.eigenvalues, vec![-4.0]);
        assert_eq!(s.vector(0), vec![1.0]);
    }

    #[test]
    fn reconstruction_and_trace() {
        let m = random_sym(40, 11);
        let s = eigh_descending(&m).unwrap();
        let tr: f64 = s.eigenvalues.iter().sum();
        assert!((tr - m.trace()).abs() <= 1e-8 * m.trace().abs().max(1.0));
        let v = &s.eigenvectors;
        let vl = Matrix::from_fn(40, 40, |i, j| v[(i, j)] * s.eigenvalues[j]);
        let rec = vl.matmul_nt(v).unwrap();
        let diff = rec.sub(m.as_matrix()).unwrap().max_abs();
        assert!(diff <= 1e-10 * m.as_matrix().max_abs());
    }
}

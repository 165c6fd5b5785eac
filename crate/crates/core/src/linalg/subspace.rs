//! Block subspace iteration with Rayleigh-Ritz projection.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

use super::{
    canonicalize_signs, eigh_descending, norm, orthonormalize_rows, Matrix, SolverTag, Spectrum,
    SymMatrix, SymOperator,
};
use crate::error::{Error, Result};
use crate::scalar::Real;

/// Tuning knobs for [`eigh_topk_operator`].
#[derive(Clone, Debug)]
pub struct TopkOptions {
    pub max_iter: usize,
    /// Converged when every wanted residual is below `tol · max(1, |λ₁|)`.
    pub tol: f64,
    /// Extra block columns beyond `k`; `None` picks `max(10, k/4)`.
    pub oversample: Option<usize>,
    pub seed: u64,
}

impl Default for TopkOptions {
    fn default() -> Self {
        Self {
            max_iter: 500,
            tol: 1e-8,
            oversample: None,
            seed: 0x5eed,
        }
    }
}

/// Top-`k` eigenpairs of a dense symmetric matrix.
pub fn eigh_topk<T: Real>(
    m: &SymMatrix<T>,
    k: usize,
    max_iter: usize,
    tol: f64,
) -> Result<Spectrum<T>> {
    if !m.is_finite() {
        return Err(Error::NonFiniteInput);
    }
    eigh_topk_operator(
        m,
        k,
        &TopkOptions {
            max_iter,
            tol,
            ..TopkOptions::default()
        },
    )
}

/// Top-`k` eigenpairs (by algebraic value) of a symmetric operator.
///
/// Each iteration costs one block application of the operator. The block
/// carries `k + oversample` vectors; only the leading `k` must converge.
pub fn eigh_topk_operator<T: Real, O: SymOperator<T> + ?Sized>(
    op: &O,
    k: usize,
    opts: &TopkOptions,
) -> Result<Spectrum<T>> {
    let dim = op.dim();
    if k == 0 || k > dim {
        return Err(Error::InvalidArgument(format!(
            "k = {k} must lie in 1..={dim}"
        )));
    }
    let extra = opts.oversample.unwrap_or_else(|| (k / 4).max(10));
    let b = (k + extra).min(dim);

    let mut rng = ChaCha8Rng::seed_from_u64(opts.seed);
    let mut draw = |d: usize| -> Vec<T> {
        (0..d)
            .map(|_| T::lit(StandardNormal.sample(&mut rng)))
            .collect()
    };
    let start = Matrix::from_vec(b, dim, (0..b).flat_map(|_| draw(dim)).collect())?;
    let mut q = orthonormalize_rows(&start, Some(&mut draw));
    let mut aq = op.apply_rows(&q);

    let tol = T::lit(opts.tol);
    let mut last_residual = f64::INFINITY;
    for iter in 1..=opts.max_iter.max(1) {
        // Rayleigh-Ritz on the current block.
        let h = SymMatrix::new(q.matmul_nt(&aq)?)?;
        let small = eigh_descending(&h)?;
        let st = small.eigenvectors.transpose();
        let x = st.matmul(&q)?;
        let ax = st.matmul(&aq)?;

        let theta = &small.eigenvalues;
        let scale = T::one().max(theta[0].abs());
        let mut worst = T::zero();
        for i in 0..k {
            let r: Vec<T> = ax
                .row(i)
                .iter()
                .zip(x.row(i))
                .map(|(&a, &v)| a - theta[i] * v)
                .collect();
            worst = worst.max(norm(&r));
        }
        last_residual = (worst / scale).to_f64_lossy();
        if worst <= tol * scale {
            return Ok(finish(&x, &theta[..k], k));
        }
        if iter == opts.max_iter.max(1) {
            break;
        }
        q = orthonormalize_rows(&ax, Some(&mut draw));
        aq = op.apply_rows(&q);
    }
    Err(Error::ConvergenceFailure {
        iterations: opts.max_iter,
        residual: last_residual,
    })
}

fn finish<T: Real>(x: &Matrix<T>, theta: &[T], k: usize) -> Spectrum<T> {
    let dim = x.cols();
    let mut vectors = Matrix::zeros(dim, k);
    for j in 0..k {
        for (i, &v) in x.row(j).iter().enumerate() {
            vectors[(i, j)] = v;
        }
    }
    canonicalize_signs(&mut vectors);
    Spectrum {
        eigenvalues: theta.to_vec(),
        eigenvectors: vectors,
        solver: SolverTag::Iterative,
    }
}

//! Per-axis smoothness rotations on the `p × p` input torus.
//!
//! A cliff eigenspace of the modular-addition kernel is a mixture of Fourier
//! families. Compressing a torus graph Laplacian into the eigenspace and
//! diagonalising it orders directions by how smoothly they vary along one
//! lattice direction; doing this twice, on the smoother half, separates the
//! families.

use std::ops::Range;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::data::{Dataset, FourierFamily};
use crate::entk::{assemble_kernel, kernel_spectrum, KernelSpec};
use crate::error::{Error, Result};
use crate::linalg::{
    eigh_descending, orthonormality_error, orthonormalize_columns, Matrix, SymMatrix,
};
use crate::models::checkpoint::Checkpoint;
use crate::scalar::Real;
use crate::spectral::{
    detect_cliffs, family_heatmap, AlignmentHeatmap, FeatureGroup, DEFAULT_CLIFF_FLOOR,
};

/// Circulant second difference: 2 on the diagonal, −1 on the cyclic
/// neighbours. Built by accumulating edges `i ↔ i+1 (mod p)`, so `p = 2`
/// gives off-diagonal −2 and `p = 1` the zero matrix.
pub fn cycle_laplacian_1d<T: Real>(p: usize) -> SymMatrix<T> {
    let mut m = Matrix::zeros(p, p);
    for i in 0..p {
        add_edge(&mut m, i, (i + 1) % p);
    }
    SymMatrix::new(m).expect("square")
}

fn add_edge<T: Real>(m: &mut Matrix<T>, i: usize, j: usize) {
    m[(i, i)] += T::one();
    m[(j, j)] += T::one();
    m[(i, j)] -= T::one();
    m[(j, i)] -= T::one();
}

fn kron<T: Real>(a: &Matrix<T>, b: &Matrix<T>) -> Matrix<T> {
    let (ar, ac) = a.shape();
    let (br, bc) = b.shape();
    Matrix::from_fn(ar * br, ac * bc, |r, c| {
        a[(r / br, c / bc)] * b[(r % br, c % bc)]
    })
}

/// Unnormalised graph Laplacian on the torus lattice (index `a·p + b`).
#[derive(Clone, Debug)]
pub struct TorusLaplacian<T> {
    pub p: usize,
    pub axis: FourierFamily,
    pub matrix: SymMatrix<T>,
}

impl<T: Real> TorusLaplacian<T> {
    /// `Σ_{(u,v) ∈ edges} (x_u − x_v)²` evaluated directly.
    pub fn quadratic_form(&self, x: &[T]) -> T {
        self.matrix
            .matvec(x)
            .iter()
            .zip(x)
            .map(|(&lx, &xi)| lx * xi)
            .sum()
    }
}

/// `a`: `L₁ ⊗ I`, `b`: `I ⊗ L₁`; `sum`/`diff`: graphs with edges
/// `(a,b) ↔ (a+1,b+1)` and `(a,b) ↔ (a+1,b−1)`.
///
/// A function is flat under `a` when it depends on `b` only, and flat under
/// `sum` when it depends on `a − b` only.
pub fn axis_laplacian<T: Real>(p: usize, axis: FourierFamily) -> TorusLaplacian<T> {
    let matrix = match axis {
        FourierFamily::A => kron(cycle_laplacian_1d::<T>(p).as_matrix(), &Matrix::identity(p)),
        FourierFamily::B => kron(&Matrix::identity(p), cycle_laplacian_1d::<T>(p).as_matrix()),
        FourierFamily::Sum | FourierFamily::Diff => {
            let mut m = Matrix::zeros(p * p, p * p);
            for a in 0..p {
                for b in 0..p {
                    let nb = if axis == FourierFamily::Sum {
                        (b + 1) % p
                    } else {
                        (b + p - 1) % p
                    };
                    add_edge(&mut m, a * p + b, ((a + 1) % p) * p + nb);
                }
            }
            m
        }
    };
    TorusLaplacian {
        p,
        axis,
        matrix: SymMatrix::new(matrix).expect("square"),
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Stage {
    First,
    Second,
}

/// Orthonormal columns with their Laplacian energies (Rayleigh quotients).
#[derive(Clone, Debug)]
pub struct RotatedBasis<T> {
    pub columns: Matrix<T>,
    pub energies: Vec<T>,
    pub stages: Vec<Stage>,
}

impl<T: Real> RotatedBasis<T> {
    pub fn k(&self) -> usize {
        self.columns.cols()
    }

    /// `column,stage,energy`.
    pub fn energies_csv(&self) -> Result<Vec<u8>> {
        let mut w = csv::Writer::from_writer(Vec::new());
        w.write_record(["column", "stage", "energy"])?;
        for (i, (e, s)) in self.energies.iter().zip(&self.stages).enumerate() {
            let stage = match s {
                Stage::First => "first",
                Stage::Second => "second",
            };
            w.write_record([
                i.to_string(),
                stage.to_string(),
                e.to_f64_lossy().to_string(),
            ])?;
        }
        w.into_inner().map_err(|e| Error::Io(e.into_error()))
    }
}

/// Eigendecomposes `A = cᵀ L c` and returns `c U` ordered smoothest first.
pub fn compress_and_rotate<T: Real>(
    cliff_basis: &Matrix<T>,
    laplacian: &TorusLaplacian<T>,
) -> Result<RotatedBasis<T>> {
    let k = cliff_basis.cols();
    if k == 0 {
        return Err(Error::EmptyBasis);
    }
    if cliff_basis.rows() != laplacian.matrix.dim() {
        return Err(Error::Shape(format!(
            "basis has {} rows, Laplacian is {}x{}",
            cliff_basis.rows(),
            laplacian.matrix.dim(),
            laplacian.matrix.dim()
        )));
    }
    let c = if orthonormality_error(cliff_basis) > T::lit(1e-8) {
        let q = orthonormalize_columns(cliff_basis);
        if q.cols() < k {
            return Err(Error::InvalidArgument(format!(
                "basis has rank {} < {k}",
                q.cols()
            )));
        }
        q
    } else {
        cliff_basis.clone()
    };
    let lc = laplacian.matrix.as_matrix().matmul(&c)?;
    let compressed = SymMatrix::new(c.tr_matmul(&lc)?)?;
    let eig = eigh_descending(&compressed)?;
    let order: Vec<usize> = (0..k).rev().collect();
    let u = eig.eigenvectors.select_column_indices(&order);
    let columns = c.matmul(&u)?;
    let energies = order.iter().map(|&i| eig.eigenvalues[i]).collect();
    Ok(RotatedBasis {
        columns,
        energies,
        stages: vec![Stage::First; k],
    })
}

/// How many stage-1 columns are passed to the second rotation.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Keep {
    /// `⌊k/2⌋`.
    #[default]
    Half,
    Count(usize),
}

/// Stage 1 rotates by `L_first` and keeps the smoothest `keep + offset`
/// columns; stage 2 rotates those by `L_second`. The output lists the stage-2
/// columns (by stage-2 energy) followed by the stage-1 remainder (by stage-1
/// energy).
pub fn two_stage_rotation<T: Real>(
    cliff_basis: &Matrix<T>,
    l_first: &TorusLaplacian<T>,
    l_second: &TorusLaplacian<T>,
    keep: Keep,
    offset: usize,
) -> Result<RotatedBasis<T>> {
    let k = cliff_basis.cols();
    if k == 0 {
        return Err(Error::EmptyBasis);
    }
    let kept = match keep {
        Keep::Half => k / 2,
        Keep::Count(n) => n,
    } + offset;
    if kept >= k || kept == 0 {
        return Err(Error::InvalidSplit {
            keep: kept,
            available: k,
        });
    }
    let first = compress_and_rotate(cliff_basis, l_first)?;
    let second = compress_and_rotate(&first.columns.select_columns(0..kept), l_second)?;
    let columns = second
        .columns
        .hstack(&first.columns.select_columns(kept..k))?;
    let mut energies = second.energies;
    energies.extend_from_slice(&first.energies[kept..]);
    let mut stages = vec![Stage::Second; kept];
    stages.extend(std::iter::repeat_n(Stage::First, k - kept));
    Ok(RotatedBasis {
        columns,
        energies,
        stages,
    })
}

/// Which eigenvectors form the cliff to rotate.
#[derive(Clone, Debug, PartialEq)]
pub enum CliffSelector {
    /// The `index`-th detected cliff (0-based): the eigenvectors between the
    /// previous boundary (or the top) and boundary `index`.
    Detected { index: usize, threshold: f64 },
    /// A fixed 0-based eigenvector range.
    Fixed(Range<usize>),
}

impl CliffSelector {
    pub fn range<T: Real>(&self, eigenvalues: &[T]) -> Result<Range<usize>> {
        match self {
            CliffSelector::Fixed(r) if r.end <= eigenvalues.len() && !r.is_empty() => Ok(r.clone()),
            CliffSelector::Fixed(r) => Err(Error::InvalidArgument(format!(
                "cliff range {r:?} invalid for {} eigenvalues",
                eigenvalues.len()
            ))),
            CliffSelector::Detected { index, threshold } => {
                let report = detect_cliffs(eigenvalues, *threshold, DEFAULT_CLIFF_FLOOR)?;
                let b = &report.boundaries;
                if *index >= b.len() {
                    return Err(Error::CliffNotFound {
                        requested: *index,
                        found: b.len(),
                    });
                }
                let start = if *index == 0 { 0 } else { b[index - 1] };
                Ok(start..b[*index])
            }
        }
    }
}

/// Per-checkpoint result of cliff selection, rotation and family scoring.
#[derive(Clone, Debug)]
pub struct EpochDisentanglement {
    pub epoch: usize,
    pub cliff: Range<usize>,
    pub energies: Vec<f64>,
    pub heatmap: AlignmentHeatmap,
}

/// Rotation settings shared by every checkpoint.
#[derive(Clone, Debug)]
pub struct RotationPlan<'a, T> {
    pub selector: CliffSelector,
    pub l_first: &'a TorusLaplacian<T>,
    pub l_second: &'a TorusLaplacian<T>,
    pub keep: Keep,
    pub offset: usize,
}

/// Cliff detection, two-stage rotation and `family_heatmap` at each
/// checkpoint. Checkpoints are processed in parallel.
pub fn disentangle_over_time<T: Real>(
    checkpoints: &[Checkpoint<T>],
    ds: &Dataset<T>,
    spec: &KernelSpec,
    plan: &RotationPlan<'_, T>,
    families: &[FeatureGroup<T>],
) -> Result<Vec<EpochDisentanglement>> {
    checkpoints
        .par_iter()
        .map(|ck| {
            let kernel = assemble_kernel(&ck.params, ds, spec)?;
            let spectrum = kernel_spectrum(&kernel, None)?;
            let cliff = plan.selector.range(&spectrum.eigenvalues)?;
            let basis = spectrum.columns(cliff.clone());
            let rotated =
                two_stage_rotation(&basis, plan.l_first, plan.l_second, plan.keep, plan.offset)?;
            Ok(EpochDisentanglement {
                epoch: ck.epoch,
                cliff,
                energies: rotated.energies.iter().map(|e| e.to_f64_lossy()).collect(),
                heatmap: family_heatmap(&rotated.columns, families)?,
            })
        })
        .collect()
}

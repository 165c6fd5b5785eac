//! Cliff detection, eigenvector–feature alignment and spectra over training.

use std::io::Write as _;
use std::ops::Range;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::data::{fourier_feature_matrix, Dataset, FeatureMatrix, FourierFamily};
use crate::entk::{assemble_kernel, kernel_spectrum, KernelSpec};
use crate::error::{Error, Result};
use crate::linalg::{dot, eigvalsh_descending, norm, orthonormalize_columns, Matrix, Spectrum};
use crate::models::checkpoint::Checkpoint;
use crate::scalar::Real;

pub const DEFAULT_CLIFF_RATIO: f64 = 5.0;
pub const DEFAULT_CLIFF_FLOOR: f64 = 1e-12;

/// Positions of large drops in a descending spectrum.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CliffReport {
    /// 1-based: a boundary at `k` is a drop between `λ_k` and `λ_{k+1}`.
    pub boundaries: Vec<usize>,
    /// `λ_k / λ_{k+1}` at each boundary.
    pub ratios: Vec<f64>,
    pub threshold: f64,
    pub floor: f64,
}

impl CliffReport {
    pub fn contains(&self, k: usize) -> bool {
        self.boundaries.contains(&k)
    }

    pub fn ratio_at(&self, k: usize) -> Option<f64> {
        self.boundaries
            .iter()
            .position(|&b| b == k)
            .map(|i| self.ratios[i])
    }
}

/// Reports every `k` with `λ_k / λ_{k+1} ≥ threshold`.
///
/// `λ_{k+1}` is clamped from below at `floor · λ_1`, and drops starting at an
/// eigenvalue already below that level are ignored, so the numerical null
/// space contributes at most one boundary (at the rank).
pub fn detect_cliffs<T: Real>(
    eigenvalues: &[T],
    threshold: f64,
    floor: f64,
) -> Result<CliffReport> {
    if eigenvalues.len() < 2 {
        return Err(Error::EmptySpectrum);
    }
    if !(threshold > 1.0) || !(floor > 0.0) {
        return Err(Error::InvalidArgument(format!(
            "need threshold > 1 and floor > 0 (got {threshold}, {floor})"
        )));
    }
    let vals: Vec<f64> = eigenvalues.iter().map(|v| v.to_f64_lossy()).collect();
    if vals.iter().any(|v| !v.is_finite()) {
        return Err(Error::NonFiniteInput);
    }
    let mut report = CliffReport {
        boundaries: Vec::new(),
        ratios: Vec::new(),
        threshold,
        floor,
    };
    let top = vals[0];
    if top <= 0.0 {
        return Ok(report);
    }
    let clamp = floor * top;
    for k in 1..vals.len() {
        let (hi, lo) = (vals[k - 1], vals[k].max(clamp));
        if hi < clamp {
            break;
        }
        let ratio = hi / lo;
        if ratio >= threshold {
            report.boundaries.push(k);
            report.ratios.push(ratio);
        }
    }
    Ok(report)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum HeatmapNormalization {
    /// `|cos∠(v, f)|`.
    AbsCosine,
    /// Squared norm of the projection onto a feature subspace.
    SubspaceProjection,
}

#[derive(Clone, Debug, PartialEq)]
pub struct AlignmentHeatmap {
    /// Eigenvector (or basis column) indices, 0-based.
    pub rows: Vec<usize>,
    pub cols: Vec<String>,
    /// `rows.len() × cols.len()`, entries in `[0, 1]`.
    pub values: Matrix<f64>,
    pub normalization: HeatmapNormalization,
}

impl AlignmentHeatmap {
    pub fn to_csv(&self) -> Result<Vec<u8>> {
        let mut w = csv::Writer::from_writer(Vec::new());
        let mut header = vec!["vector".to_string()];
        header.extend(self.cols.iter().cloned());
        w.write_record(&header)?;
        for (r, idx) in self.rows.iter().enumerate() {
            let mut rec = vec![idx.to_string()];
            rec.extend(self.values.row(r).iter().map(|v| v.to_string()));
            w.write_record(&rec)?;
        }
        w.into_inner().map_err(|e| Error::Io(e.into_error()))
    }

    /// 8-bit binary PGM, one pixel per cell, scaled so the largest value is
    /// white.
    pub fn to_pgm(&self) -> Vec<u8> {
        let (h, wd) = self.values.shape();
        let max = self.values.max_abs();
        let mut out = Vec::with_capacity(h * wd + 20);
        write!(out, "P5\n{wd} {h}\n255\n").expect("in-memory write");
        out.extend(self.values.as_slice().iter().map(|&v| {
            if max > 0.0 {
                (v / max * 255.0).round().clamp(0.0, 255.0) as u8
            } else {
                0
            }
        }));
        out
    }
}

fn check_rows<T: Real>(dim: usize, features: &Matrix<T>) -> Result<()> {
    if features.rows() != dim {
        return Err(Error::Shape(format!(
            "vectors have length {dim}, features have {} rows",
            features.rows()
        )));
    }
    Ok(())
}

/// `|⟨v_i, f_j⟩| / (‖v_i‖‖f_j‖)` for eigenvectors `i ∈ row_range`; zero
/// vectors score 0.
pub fn alignment_heatmap<T: Real>(
    spectrum: &Spectrum<T>,
    features: &FeatureMatrix<T>,
    row_range: Range<usize>,
) -> Result<AlignmentHeatmap> {
    if row_range.end > spectrum.k() {
        return Err(Error::InvalidArgument(format!(
            "rows {row_range:?} exceed {} eigenvectors",
            spectrum.k()
        )));
    }
    check_rows(spectrum.dim(), &features.vectors)?;
    let fcols: Vec<Vec<T>> = (0..features.len()).map(|j| features.column(j)).collect();
    let fnorms: Vec<T> = fcols.iter().map(|c| norm(c)).collect();
    let rows: Vec<usize> = row_range.collect();
    let values = Matrix::from_fn(rows.len(), fcols.len(), |r, j| {
        let v = spectrum.vector(rows[r]);
        let denom = norm(&v) * fnorms[j];
        if denom > T::zero() {
            (dot(&v, &fcols[j]).abs() / denom).to_f64_lossy().min(1.0)
        } else {
            0.0
        }
    });
    Ok(AlignmentHeatmap {
        rows,
        cols: features.names.clone(),
        values,
        normalization: HeatmapNormalization::AbsCosine,
    })
}

/// A named feature subspace, e.g. one `(cos k, sin k)` pair.
#[derive(Clone, Debug, PartialEq)]
pub struct FeatureGroup<T> {
    pub name: String,
    pub vectors: Matrix<T>,
}

/// Groups the `(cos k, sin k)` columns of a Fourier family into one subspace
/// per frequency, named e.g. `"a k=3"`.
pub fn fourier_groups<T: Real>(
    p: usize,
    family: FourierFamily,
    eval_points: &Dataset<T>,
) -> Result<Vec<FeatureGroup<T>>> {
    let fm = fourier_feature_matrix(p, family, eval_points)?;
    Ok((0..fm.len() / 2)
        .map(|k| FeatureGroup {
            name: format!("{} k={}", family.name(), k + 1),
            vectors: fm.vectors.select_column_indices(&[2 * k, 2 * k + 1]),
        })
        .collect())
}

/// Squared norm of each basis column's projection onto each group's span,
/// i.e. the phase-maximised correlation for a `(cos, sin)` pair. Zero
/// columns within a group are ignored.
pub fn family_heatmap<T: Real>(
    basis: &Matrix<T>,
    families: &[FeatureGroup<T>],
) -> Result<AlignmentHeatmap> {
    let mut projected = Vec::with_capacity(families.len());
    for g in families {
        check_rows(basis.rows(), &g.vectors)?;
        let q = orthonormalize_columns(&g.vectors);
        // k × r coefficients of every basis column on the group's frame.
        projected.push(basis.tr_matmul(&q)?);
    }
    let values = Matrix::from_fn(basis.cols(), families.len(), |i, f| {
        let c = &projected[f];
        let s: T = c.row(i).iter().map(|&x| x * x).sum();
        s.to_f64_lossy().clamp(0.0, 1.0)
    });
    Ok(AlignmentHeatmap {
        rows: (0..basis.cols()).collect(),
        cols: families.iter().map(|g| g.name.clone()).collect(),
        values,
        normalization: HeatmapNormalization::SubspaceProjection,
    })
}

/// `(N·C) × C` matrix with entry `x_{α,c}` at row `c·N + α`, column `c`, and
/// zero elsewhere; non-zero columns are unit-normalised.
pub fn expanded_data_matrix<T: Real>(ds: &Dataset<T>) -> Result<FeatureMatrix<T>> {
    let c = ds.expect_tms()?;
    let n = ds.len();
    let mut vectors = Matrix::zeros(n * c, c);
    for a in 0..n {
        for (cls, &x) in ds.inputs.row(a).iter().enumerate() {
            vectors[(cls * n + a, cls)] = x;
        }
    }
    vectors.normalize_columns();
    Ok(FeatureMatrix {
        names: (0..c).map(|i| format!("x{i}")).collect(),
        vectors,
        raw: false,
    })
}

/// Greedy one-to-one assignment of features (columns) to vectors (rows).
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FeatureMatch {
    /// `assignment[j]` is the heatmap row index matched to feature `j`.
    pub assignment: Vec<Option<usize>>,
    /// Matched score per feature (0 when unmatched).
    pub scores: Vec<f64>,
    pub mean_score: f64,
    pub min_score: f64,
}

/// Sorts all cells descending and accepts a cell when neither its row nor
/// its column is taken yet.
pub fn match_features(heatmap: &AlignmentHeatmap) -> FeatureMatch {
    let (nr, nc) = heatmap.values.shape();
    let mut cells: Vec<(usize, usize)> =
        (0..nr).flat_map(|r| (0..nc).map(move |c| (r, c))).collect();
    // Stable sort: ties resolve to the lowest (row, col).
    cells.sort_by(|&(r1, c1), &(r2, c2)| {
        heatmap.values[(r2, c2)].total_cmp(&heatmap.values[(r1, c1)])
    });
    let mut row_used = vec![false; nr];
    let mut assignment = vec![None; nc];
    let mut scores = vec![0.0; nc];
    let mut left = nr.min(nc);
    for (r, c) in cells {
        if left == 0 {
            break;
        }
        if !row_used[r] && assignment[c].is_none() {
            row_used[r] = true;
            assignment[c] = Some(heatmap.rows[r]);
            scores[c] = heatmap.values[(r, c)];
            left -= 1;
        }
    }
    let mean_score = if nc > 0 {
        scores.iter().sum::<f64>() / nc as f64
    } else {
        0.0
    };
    let min_score = scores.iter().copied().fold(f64::INFINITY, f64::min);
    FeatureMatch {
        assignment,
        scores,
        mean_score,
        min_score: if nc > 0 { min_score } else { 0.0 },
    }
}

/// Leading eigenvalues at each checkpoint.
#[derive(Clone, Debug, PartialEq)]
pub struct SpectrumSeries {
    pub epochs: Vec<usize>,
    pub eigenvalues: Vec<Vec<f64>>,
}

impl SpectrumSeries {
    pub fn cliffs(&self, threshold: f64, floor: f64) -> Result<Vec<CliffReport>> {
        self.eigenvalues
            .iter()
            .map(|e| detect_cliffs(e, threshold, floor))
            .collect()
    }

    /// One row per epoch: `epoch, λ_1, λ_2, …`.
    pub fn to_csv(&self) -> Result<Vec<u8>> {
        let width = self.eigenvalues.iter().map(Vec::len).max().unwrap_or(0);
        let mut w = csv::Writer::from_writer(Vec::new());
        let mut header = vec!["epoch".to_string()];
        header.extend((1..=width).map(|i| format!("lambda_{i}")));
        w.write_record(&header)?;
        for (e, vals) in self.epochs.iter().zip(&self.eigenvalues) {
            let mut rec = vec![e.to_string()];
            rec.extend((0..width).map(|i| vals.get(i).map(|v| v.to_string()).unwrap_or_default()));
            w.write_record(&rec)?;
        }
        w.into_inner().map_err(|e| Error::Io(e.into_error()))
    }
}

/// Assembles `spec` at every checkpoint and keeps the top `k` eigenvalues
/// (all of them when `k` is `None`). Checkpoints are processed in parallel.
pub fn spectrum_over_time<T: Real>(
    checkpoints: &[Checkpoint<T>],
    ds: &Dataset<T>,
    spec: &KernelSpec,
    k: Option<usize>,
) -> Result<SpectrumSeries> {
    let eigenvalues = checkpoints
        .par_iter()
        .map(|ck| {
            let kernel = assemble_kernel(&ck.params, ds, spec)?;
            let values = match k {
                Some(k) if k < kernel.dim() => kernel_spectrum(&kernel, Some(k))?.eigenvalues,
                _ => eigvalsh_descending(&kernel.matrix)?,
            };
            let keep = k.unwrap_or(values.len()).min(values.len());
            Ok(values[..keep].iter().map(|v| v.to_f64_lossy()).collect())
        })
        .collect::<Result<Vec<Vec<f64>>>>()?;
    Ok(SpectrumSeries {
        epochs: checkpoints.iter().map(|c| c.epoch).collect(),
        eigenvalues,
    })
}

/// `index,eigenvalue` with 1-based indices.
pub fn spectrum_csv<T: Real>(eigenvalues: &[T]) -> Result<Vec<u8>> {
    let mut w = csv::Writer::from_writer(Vec::new());
    w.write_record(["index", "eigenvalue"])?;
    for (i, v) in eigenvalues.iter().enumerate() {
        w.write_record([(i + 1).to_string(), v.to_f64_lossy().to_string()])?;
    }
    w.into_inner().map_err(|e| Error::Io(e.into_error()))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::{gen_modadd_dataset, gen_tms_dataset};
    use crate::linalg::SolverTag;
    use proptest::prelude::*;

    fn spectrum_of(vectors: Matrix<f64>) -> Spectrum<f64> {
        Spectrum {
            eigenvalues: vec![1.0; vectors.cols()],
            eigenvectors: vectors,
            solver: SolverTag::Dense,
        }
    }

    #[test]
    fn cliffs_basic() {
        let r = detect_cliffs(&[10.0, 9.0, 1.0, 0.9, 0.01], 5.0, 1e-12).unwrap();
        assert_eq!(r.boundaries, vec![2, 4]);
        assert!((r.ratios[0] - 9.0).abs() < 1e-12);
        let geometric: Vec<f64> = (1..30).map(|k| 2f64.powi(-k)).collect();
        assert!(detect_cliffs(&geometric, 10.0, 1e-12)
            .unwrap()
            .boundaries
            .is_empty());
        assert!(matches!(
            detect_cliffs(&[1.0], 5.0, 1e-12),
            Err(Error::EmptySpectrum)
        ));
    }

    #[test]
    fn null_space_gives_one_boundary_at_rank() {
        let r = detect_cliffs(&[3.0, 2.0, 0.0, 0.0, -1e-17], 5.0, 1e-12).unwrap();
        assert_eq!(r.boundaries, vec![2]);
    }

    #[test]
    fn identity_and_orthogonal_alignment() {
        let q = Matrix::<f64>::identity(4);
        let spec = spectrum_of(q.clone());
        let feats = FeatureMatrix {
            names: (0..4).map(|i| i.to_string()).collect(),
            vectors: q,
            raw: false,
        };
        let h = alignment_heatmap(&spec, &feats, 0..4).unwrap();
        assert_eq!(h.values, Matrix::identity(4));
        let m = match_features(&h);
        assert_eq!(m.assignment, (0..4).map(Some).collect::<Vec<_>>());
        assert_eq!((m.mean_score, m.min_score), (1.0, 1.0));
    }

    #[test]
    fn permutation_is_recovered() {
        let perm = [2, 0, 3, 1];
        let values = Matrix::from_fn(4, 4, |r, c| if perm[c] == r { 0.9 } else { 0.1 });
        let h = AlignmentHeatmap {
            rows: (0..4).collect(),
            cols: (0..4).map(|i| i.to_string()).collect(),
            values,
            normalization: HeatmapNormalization::AbsCosine,
        };
        let m = match_features(&h);
        assert_eq!(
            m.assignment,
            perm.iter().map(|&r| Some(r)).collect::<Vec<_>>()
        );
    }

    #[test]
    fn family_heatmap_on_fourier_columns() {
        let ds = gen_modadd_dataset::<f64>(7).unwrap();
        let groups = fourier_groups(7, FourierFamily::A, &ds).unwrap();
        let fm = fourier_feature_matrix(7, FourierFamily::A, &ds).unwrap();
        let h = family_heatmap(&fm.vectors, &groups).unwrap();
        for i in 0..6 {
            for f in 0..3 {
                let want = if i / 2 == f { 1.0 } else { 0.0 };
                assert!((h.values[(i, f)] - want).abs() < 1e-12);
            }
        }
        // b-family columns are orthogonal to every a pair.
        let b = fourier_feature_matrix(7, FourierFamily::B, &ds).unwrap();
        let h = family_heatmap(&b.vectors, &groups).unwrap();
        assert!(h.values.max_abs() < 1e-12);
    }

    #[test]
    fn even_p_nyquist_group_is_one_dimensional() {
        let ds = gen_modadd_dataset::<f64>(6).unwrap();
        let groups = fourier_groups(6, FourierFamily::Sum, &ds).unwrap();
        assert_eq!(groups.len(), 3);
        let fm = fourier_feature_matrix(6, FourierFamily::Sum, &ds).unwrap();
        let h = family_heatmap(&fm.vectors.select_column_indices(&[4]), &groups).unwrap();
        assert!((h.values[(0, 2)] - 1.0).abs() < 1e-12);
    }

    #[test]
    fn expanded_matrix_block_support() {
        let ds = gen_tms_dataset::<f64>(3, 4, 0.5, 2).unwrap();
        let e = expanded_data_matrix(&ds).unwrap();
        assert_eq!(e.vectors.shape(), (12, 3));
        for c in 0..3 {
            for r in 0..12 {
                if r / 4 != c {
                    assert_eq!(e.vectors[(r, c)], 0.0);
                }
            }
        }
        let mut one = gen_tms_dataset::<f64>(3, 1, 0.0, 0).unwrap();
        one.inputs = Matrix::from_rows(&[vec![1.0, 0.0, 0.0]]).unwrap();
        let e = expanded_data_matrix(&one).unwrap();
        assert_eq!(
            e.vectors.as_slice().iter().filter(|&&v| v != 0.0).count(),
            1
        );
    }

    #[test]
    fn exports() {
        let h = AlignmentHeatmap {
            rows: vec![0, 1],
            cols: vec!["f".into()],
            values: Matrix::from_rows(&[vec![0.5], vec![0.25]]).unwrap(),
            normalization: HeatmapNormalization::AbsCosine,
        };
        assert_eq!(
            String::from_utf8(h.to_csv().unwrap()).unwrap(),
            "vector,f\n0,0.5\n1,0.25\n"
        );
        assert_eq!(h.to_pgm(), b"P5\n1 2\n255\n\xff\x80".to_vec());
        assert_eq!(
            String::from_utf8(spectrum_csv(&[2.0, 1.5]).unwrap()).unwrap(),
            "index,eigenvalue\n1,2\n2,1.5\n"
        );
    }

    proptest! {
        #[test]
        fn cliffs_are_scale_invariant(
            mut vals in prop::collection::vec(1e-6f64..1e3, 2..30),
            scale in 1e-3f64..1e3,
        ) {
            vals.sort_by(|a, b| b.total_cmp(a));
            let base = detect_cliffs(&vals, 5.0, 1e-12).unwrap();
            let scaled: Vec<f64> = vals.iter().map(|v| v * scale).collect();
            let r = detect_cliffs(&scaled, 5.0, 1e-12).unwrap();
            prop_assert_eq!(&r.boundaries, &base.boundaries);
            for (a, b) in r.ratios.iter().zip(&base.ratios) {
                prop_assert!((a - b).abs() <= 1e-9 * b);
            }
            prop_assert!(r.ratios.iter().all(|&x| x >= 5.0));
        }

        #[test]
        fn heatmaps_ignore_sign_flips(
            entries in prop::collection::vec(-1.0f64..1.0, 24),
            flips in prop::collection::vec(any::<bool>(), 4),
        ) {
            let v = orthonormalize_columns(&Matrix::from_vec(6, 4, entries.clone()).unwrap());
            prop_assume!(v.cols() == 4);
            let mut flipped = v.clone();
            for (c, &f) in flips.iter().enumerate() {
                if f {
                    for r in 0..6 {
                        flipped[(r, c)] = -flipped[(r, c)];
                    }
                }
            }
            let feats = FeatureMatrix {
                names: vec!["a".into(), "b".into()],
                vectors: Matrix::from_fn(6, 2, |r, c| entries[r * 4 + c] + 0.3),
                raw: true,
            };
            let h1 = alignment_heatmap(&spectrum_of(v.clone()), &feats, 0..4).unwrap();
            let h2 = alignment_heatmap(&spectrum_of(flipped.clone()), &feats, 0..4).unwrap();
            let groups = [FeatureGroup { name: "g".into(), vectors: feats.vectors.clone() }];
            let f1 = family_heatmap(&v, &groups).unwrap();
            let f2 = family_heatmap(&flipped, &groups).unwrap();
            for (a, b) in h1.values.as_slice().iter().zip(h2.values.as_slice()) {
                prop_assert!((a - b).abs() < 1e-12);
            }
            for (a, b) in f1.values.as_slice().iter().zip(f2.values.as_slice()) {
                prop_assert!((a - b).abs() < 1e-12);
            }
        }

        #[test]
        fn family_values_ignore_phase_and_sum_to_at_most_one(phase in 0.0f64..6.3, k in 1usize..4) {
            let p = 7;
            let ds = gen_modadd_dataset::<f64>(p).unwrap();
            let groups = fourier_groups(p, FourierFamily::A, &ds).unwrap();
            let g = &groups[k - 1].vectors;
            // Rotate the (cos, sin) pair by `phase`.
            let rotated = Matrix::from_fn(g.rows(), 2, |r, c| {
                let (x, y) = (g[(r, 0)], g[(r, 1)]);
                if c == 0 { x * phase.cos() - y * phase.sin() } else { x * phase.sin() + y * phase.cos() }
            });
            let mut shifted = groups.clone();
            shifted[k - 1].vectors = rotated;
            let basis = orthonormalize_columns(&Matrix::from_fn(p * p, 3, |r, c| ((r * (c + 3)) % 11) as f64 - 5.0));
            let h1 = family_heatmap(&basis, &groups).unwrap();
            let h2 = family_heatmap(&basis, &shifted).unwrap();
            for (a, b) in h1.values.as_slice().iter().zip(h2.values.as_slice()) {
                prop_assert!((a - b).abs() < 1e-10);
            }
            let all: Vec<FeatureGroup<f64>> = FourierFamily::ALL
                .iter()
                .flat_map(|&f| fourier_groups(p, f, &ds).unwrap())
                .collect();
            let h = family_heatmap(&basis, &all).unwrap();
            for i in 0..3 {
                let s: f64 = h.values.row(i).iter().sum();
                prop_assert!(s <= 1.0 + 1e-10);
            }
        }
    }
}

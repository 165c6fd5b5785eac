//! Synthetic datasets and ground-truth feature matrices.
//!
//! Two datasets are supported: sparse uniform vectors for the superposition
//! autoencoder, and the full `p × p` lattice of one-hot encoded pairs for
//! modular addition. The modular lattice is always indexed `a·p + b`; every
//! kernel, Laplacian and feature matrix in the crate follows that order.

use std::f64::consts::PI;
use std::fs;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::io::write_atomic;
use crate::linalg::Matrix;
use crate::scalar::Real;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum DatasetKind {
    Tms { n: usize },
    Modadd { p: usize },
}

impl DatasetKind {
    pub fn name(&self) -> &'static str {
        match self {
            DatasetKind::Tms { .. } => "tms",
            DatasetKind::Modadd { .. } => "modadd",
        }
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Split {
    pub train_idx: Vec<usize>,
    pub test_idx: Vec<usize>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DatasetMeta {
    #[serde(flatten)]
    pub kind: DatasetKind,
    pub seed: Option<u64>,
    pub split: Option<Split>,
}

/// Inputs (`N × d`), labels (`N × C`) and provenance.
#[derive(Clone, Debug, PartialEq)]
pub struct Dataset<T> {
    pub inputs: Matrix<T>,
    pub labels: Matrix<T>,
    pub meta: DatasetMeta,
}

impl<T: Real> Dataset<T> {
    pub fn len(&self) -> usize {
        self.inputs.rows()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn kind(&self) -> DatasetKind {
        self.meta.kind
    }

    pub fn split(&self) -> Option<&Split> {
        self.meta.split.as_ref()
    }

    pub fn n_classes(&self) -> usize {
        self.labels.cols()
    }

    /// Rows `idx` as a new dataset (no split attached).
    pub fn select(&self, idx: &[usize]) -> Self {
        Self {
            inputs: self.inputs.select_rows(idx),
            labels: self.labels.select_rows(idx),
            meta: DatasetMeta {
                split: None,
                ..self.meta.clone()
            },
        }
    }

    pub fn train(&self) -> Option<Self> {
        self.split().map(|s| self.select(&s.train_idx))
    }

    pub fn test(&self) -> Option<Self> {
        self.split().map(|s| self.select(&s.test_idx))
    }

    pub fn expect_tms(&self) -> Result<usize> {
        match self.meta.kind {
            DatasetKind::Tms { n } => Ok(n),
            other => Err(Error::WrongDatasetKind {
                expected: "tms",
                found: other.name(),
            }),
        }
    }

    pub fn expect_modadd(&self) -> Result<usize> {
        match self.meta.kind {
            DatasetKind::Modadd { p } => Ok(p),
            other => Err(Error::WrongDatasetKind {
                expected: "modadd",
                found: other.name(),
            }),
        }
    }

    /// `(a, b)` for every row of a modular-addition dataset, decoded from
    /// the one-hot inputs.
    pub fn lattice_coords(&self) -> Result<Vec<(usize, usize)>> {
        let p = self.expect_modadd()?;
        let argmax = |row: &[T]| {
            row.iter()
                .enumerate()
                .fold((0, T::neg_infinity()), |best, (i, &v)| {
                    if v > best.1 {
                        (i, v)
                    } else {
                        best
                    }
                })
                .0
        };
        Ok((0..self.len())
            .map(|r| {
                let row = self.inputs.row(r);
                (argmax(&row[..p]), argmax(&row[p..]))
            })
            .collect())
    }

    /// Writes `inputs.csv`, `labels.csv` and `meta.json` into `dir`.
    pub fn save(&self, dir: &Path) -> Result<()> {
        fs::create_dir_all(dir)?;
        write_atomic(&dir.join("inputs.csv"), &matrix_to_csv(&self.inputs)?)?;
        write_atomic(&dir.join("labels.csv"), &matrix_to_csv(&self.labels)?)?;
        write_atomic(
            &dir.join("meta.json"),
            &serde_json::to_vec_pretty(&self.meta)?,
        )?;
        Ok(())
    }

    pub fn load(dir: &Path) -> Result<Self> {
        let meta: DatasetMeta = serde_json::from_slice(&fs::read(dir.join("meta.json"))?)?;
        let inputs = matrix_from_csv(&dir.join("inputs.csv"))?;
        let labels = matrix_from_csv(&dir.join("labels.csv"))?;
        if inputs.rows() != labels.rows() {
            return Err(Error::Corrupt {
                path: dir.display().to_string(),
                reason: "inputs and labels have different row counts".into(),
            });
        }
        Ok(Self {
            inputs,
            labels,
            meta,
        })
    }
}

pub(crate) fn matrix_to_csv<T: Real>(m: &Matrix<T>) -> Result<Vec<u8>> {
    let mut w = csv::WriterBuilder::new()
        .has_headers(false)
        .from_writer(Vec::new());
    for i in 0..m.rows() {
        w.write_record(m.row(i).iter().map(|v| v.to_string()))?;
    }
    w.into_inner().map_err(|e| Error::Io(e.into_error()))
}

pub(crate) fn matrix_from_csv<T: Real>(path: &Path) -> Result<Matrix<T>> {
    let mut r = csv::ReaderBuilder::new()
        .has_headers(false)
        .from_path(path)?;
    let mut rows = Vec::new();
    for rec in r.records() {
        let rec = rec?;
        let row = rec
            .iter()
            .map(|s| {
                s.trim()
                    .parse::<f64>()
                    .map(T::lit)
                    .map_err(|e| Error::Corrupt {
                        path: path.display().to_string(),
                        reason: format!("bad number {s:?}: {e}"),
                    })
            })
            .collect::<Result<Vec<T>>>()?;
        rows.push(row);
    }
    Matrix::from_rows(&rows)
}

/// `N` samples of `n` features, each zero with probability `sparsity` and
/// otherwise uniform on `[0, 1)`. Labels equal inputs.
pub fn gen_tms_dataset<T: Real>(
    n: usize,
    samples: usize,
    sparsity: f64,
    seed: u64,
) -> Result<Dataset<T>> {
    if !(0.0..1.0).contains(&sparsity) {
        return Err(Error::InvalidSparsity(sparsity));
    }
    if n == 0 || samples == 0 {
        return Err(Error::InvalidArgument("n and N must be positive".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let inputs = Matrix::from_fn(samples, n, |_, _| {
        let drop: f64 = rng.gen();
        let value: f64 = rng.gen();
        if drop < sparsity {
            T::zero()
        } else {
            T::lit(value)
        }
    });
    Ok(Dataset {
        labels: inputs.clone(),
        inputs,
        meta: DatasetMeta {
            kind: DatasetKind::Tms { n },
            seed: Some(seed),
            split: None,
        },
    })
}

/// All `p²` pairs `(a, b)` in order `a·p + b`; input `onehot(a) ⊕ onehot(b)`,
/// label `onehot((a + b) mod p)`.
pub fn gen_modadd_dataset<T: Real>(p: usize) -> Result<Dataset<T>> {
    if p < 2 {
        return Err(Error::InvalidArgument(format!(
            "modulus must be at least 2, got {p}"
        )));
    }
    let n = p * p;
    let mut inputs = Matrix::zeros(n, 2 * p);
    let mut labels = Matrix::zeros(n, p);
    for a in 0..p {
        for b in 0..p {
            let r = a * p + b;
            inputs[(r, a)] = T::one();
            inputs[(r, p + b)] = T::one();
            labels[(r, (a + b) % p)] = T::one();
        }
    }
    Ok(Dataset {
        inputs,
        labels,
        meta: DatasetMeta {
            kind: DatasetKind::Modadd { p },
            seed: None,
            split: None,
        },
    })
}

/// Random train/test partition: the first `⌊αN⌋` entries of a seeded
/// permutation form the training set. Index lists are stored sorted.
pub fn split_train_test<T: Real>(ds: &Dataset<T>, alpha: f64, seed: u64) -> Result<Dataset<T>> {
    if !(alpha > 0.0 && alpha < 1.0) {
        return Err(Error::InvalidFraction(alpha));
    }
    ds.expect_modadd()?;
    let n = ds.len();
    let mut perm: Vec<usize> = (0..n).collect();
    perm.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    let n_train = (alpha * n as f64).floor() as usize;
    let mut train_idx = perm[..n_train].to_vec();
    let mut test_idx = perm[n_train..].to_vec();
    train_idx.sort_unstable();
    test_idx.sort_unstable();
    let mut out = ds.clone();
    out.meta.split = Some(Split {
        train_idx,
        test_idx,
    });
    out.meta.seed = Some(seed);
    Ok(out)
}

/// Named feature vectors over a set of data points, one per column.
#[derive(Clone, Debug, PartialEq)]
pub struct FeatureMatrix<T> {
    pub names: Vec<String>,
    pub vectors: Matrix<T>,
    /// `false` when columns are unit-normalised.
    pub raw: bool,
}

impl<T: Real> FeatureMatrix<T> {
    pub fn len(&self) -> usize {
        self.names.len()
    }

    pub fn is_empty(&self) -> bool {
        self.names.is_empty()
    }

    pub fn column(&self, j: usize) -> Vec<T> {
        self.vectors.column(j)
    }

    pub fn index_of(&self, name: &str) -> Option<usize> {
        self.names.iter().position(|n| n == name)
    }
}

/// Which coordinate of the input torus a Fourier family varies along.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FourierFamily {
    A,
    B,
    Sum,
    Diff,
}

impl FourierFamily {
    pub const ALL: [FourierFamily; 4] = [Self::A, Self::B, Self::Sum, Self::Diff];

    pub fn name(&self) -> &'static str {
        match self {
            Self::A => "a",
            Self::B => "b",
            Self::Sum => "sum",
            Self::Diff => "diff",
        }
    }

    /// The lattice coordinate `s` the family is a function of.
    pub fn coordinate(&self, a: usize, b: usize, p: usize) -> usize {
        match self {
            Self::A => a,
            Self::B => b,
            Self::Sum => (a + b) % p,
            Self::Diff => (a + p - b) % p,
        }
    }
}

impl std::str::FromStr for FourierFamily {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "a" => Ok(Self::A),
            "b" => Ok(Self::B),
            "sum" => Ok(Self::Sum),
            "diff" => Ok(Self::Diff),
            other => Err(Error::InvalidArgument(format!(
                "unknown Fourier family {other:?}"
            ))),
        }
    }
}

/// Columns `cos k`, `sin k` of `2πk·s/p` for `k = 1..=⌊p/2⌋`, evaluated at
/// each data point and unit-normalised.
///
/// For even `p` the `sin k=p/2` column vanishes identically; it is kept (so
/// the column count is always `2⌊p/2⌋`) but left unnormalised at zero.
pub fn fourier_feature_matrix<T: Real>(
    p: usize,
    family: FourierFamily,
    eval_points: &Dataset<T>,
) -> Result<FeatureMatrix<T>> {
    let found = eval_points.expect_modadd()?;
    if found != p {
        return Err(Error::InvalidArgument(format!(
            "dataset has p = {found}, expected {p}"
        )));
    }
    let coords = eval_points.lattice_coords()?;
    let half = p / 2;
    let mut names = Vec::with_capacity(2 * half);
    for k in 1..=half {
        names.push(format!("{} cos k={k}", family.name()));
        names.push(format!("{} sin k={k}", family.name()));
    }
    let mut vectors = Matrix::from_fn(coords.len(), 2 * half, |r, c| {
        let (a, b) = coords[r];
        let k = (c / 2 + 1) as f64;
        let s = family.coordinate(a, b, p) as f64;
        let phase = 2.0 * PI * k * s / p as f64;
        T::lit(if c % 2 == 0 { phase.cos() } else { phase.sin() })
    });
    // Exact zeros for the Nyquist sine (sin(πs) is ~1e-16, not 0).
    if p % 2 == 0 && half > 0 {
        for r in 0..coords.len() {
            vectors[(r, 2 * half - 1)] = T::zero();
        }
    }
    vectors.normalize_columns();
    Ok(FeatureMatrix {
        names,
        vectors,
        raw: false,
    })
}

/// Column `i` is the activation of feature `i` over the dataset,
/// unit-normalised. All-zero columns are dropped with a warning.
pub fn tms_feature_matrix<T: Real>(ds: &Dataset<T>) -> Result<FeatureMatrix<T>> {
    let n = ds.expect_tms()?;
    let mut vectors = ds.inputs.clone();
    let norms = vectors.normalize_columns();
    let keep: Vec<usize> = (0..n).filter(|&i| norms[i] > T::zero()).collect();
    if keep.len() < n {
        let dropped: Vec<usize> = (0..n).filter(|i| !keep.contains(i)).collect();
        log::warn!("excluding all-zero feature columns {dropped:?}");
    }
    Ok(FeatureMatrix {
        names: keep.iter().map(|i| format!("x{i}")).collect(),
        vectors: vectors.select_column_indices(&keep),
        raw: false,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn tms_sparsity_fraction() {
        let ds = gen_tms_dataset::<f64>(50, 500, 0.9, 1).unwrap();
        let zeros = ds.inputs.as_slice().iter().filter(|&&v| v == 0.0).count();
        let frac = zeros as f64 / 25_000.0;
        assert!((frac - 0.9).abs() < 0.02, "{frac}");
        assert_eq!(ds.inputs, ds.labels);
    }

    #[test]
    fn tms_no_zeros_without_sparsity() {
        let ds = gen_tms_dataset::<f64>(3, 2, 0.0, 7).unwrap();
        assert!(ds.inputs.as_slice().iter().all(|&v| v > 0.0 && v < 1.0));
    }

    #[test]
    fn tms_binomial_concentration() {
        let ds = gen_tms_dataset::<f64>(4, 1000, 0.5, 3).unwrap();
        let zeros = ds.inputs.as_slice().iter().filter(|&&v| v == 0.0).count() as f64;
        let (mean, sd) = (2000.0, (4000.0f64 * 0.25).sqrt());
        assert!((zeros - mean).abs() <= 3.0 * sd);
    }

    #[test]
    fn tms_rejects_bad_sparsity() {
        assert!(matches!(
            gen_tms_dataset::<f64>(2, 2, 1.0, 0),
            Err(Error::InvalidSparsity(_))
        ));
    }

    #[test]
    fn modadd_layout() {
        let ds = gen_modadd_dataset::<f64>(5).unwrap();
        assert_eq!((ds.len(), ds.inputs.cols(), ds.labels.cols()), (25, 10, 5));
        let ds = gen_modadd_dataset::<f64>(3).unwrap();
        let r = 3 + 2;
        let ones: Vec<usize> = (0..6).filter(|&j| ds.inputs[(r, j)] == 1.0).collect();
        assert_eq!(ones, vec![1, 5]);
        assert_eq!(ds.labels[(r, 0)], 1.0);
        assert_eq!(ds.lattice_coords().unwrap()[r], (1, 2));
    }

    #[test]
    fn split_counts_and_determinism() {
        let ds = gen_modadd_dataset::<f64>(29).unwrap();
        let s = split_train_test(&ds, 0.7, 5).unwrap();
        let sp = s.split().unwrap();
        assert_eq!((sp.train_idx.len(), sp.test_idx.len()), (588, 253));
        assert_eq!(s, split_train_test(&ds, 0.7, 5).unwrap());
        assert!(matches!(
            split_train_test(&ds, 1.0, 5),
            Err(Error::InvalidFraction(_))
        ));
        let tms = gen_tms_dataset::<f64>(2, 4, 0.1, 0).unwrap();
        assert!(matches!(
            split_train_test(&tms, 0.5, 0),
            Err(Error::WrongDatasetKind { .. })
        ));
    }

    #[test]
    fn fourier_columns() {
        let ds = gen_modadd_dataset::<f64>(5).unwrap();
        let f = fourier_feature_matrix(5, FourierFamily::A, &ds).unwrap();
        assert_eq!(f.len(), 4);
        assert_eq!(f.names[0], "a cos k=1");
        // (a=2, b=0) is row 10; raw value cos(4π/5), column norm √(25/2).
        let expected = (4.0 * PI / 5.0).cos() / (12.5f64).sqrt();
        assert!((f.vectors[(10, 0)] - expected).abs() < 1e-12);
    }

    #[test]
    fn even_modulus_keeps_zero_sine() {
        let ds = gen_modadd_dataset::<f64>(4).unwrap();
        let f = fourier_feature_matrix(4, FourierFamily::Sum, &ds).unwrap();
        assert_eq!(f.len(), 4);
        assert!(f.column(3).iter().all(|&v| v == 0.0));
    }

    #[test]
    fn tms_features_identity() {
        let inputs = Matrix::from_rows(&[vec![1.0, 0.0], vec![0.0, 1.0]]).unwrap();
        let ds = Dataset {
            labels: inputs.clone(),
            inputs,
            meta: DatasetMeta {
                kind: DatasetKind::Tms { n: 2 },
                seed: None,
                split: None,
            },
        };
        let f = tms_feature_matrix(&ds).unwrap();
        assert_eq!(f.vectors, Matrix::identity(2));
    }

    #[test]
    fn tms_zero_columns_dropped() {
        let inputs = Matrix::from_rows(&[vec![1.0, 0.0, 2.0]]).unwrap();
        let ds = Dataset {
            labels: inputs.clone(),
            inputs,
            meta: DatasetMeta {
                kind: DatasetKind::Tms { n: 3 },
                seed: None,
                split: None,
            },
        };
        let f = tms_feature_matrix(&ds).unwrap();
        assert_eq!(f.names, vec!["x0", "x2"]);
    }

    #[test]
    fn round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let ds = split_train_test(&gen_modadd_dataset::<f64>(4).unwrap(), 0.5, 1).unwrap();
        ds.save(dir.path()).unwrap();
        assert_eq!(Dataset::<f64>::load(dir.path()).unwrap(), ds);
        let tms = gen_tms_dataset::<f64>(3, 5, 0.2, 9).unwrap();
        tms.save(dir.path()).unwrap();
        assert_eq!(Dataset::<f64>::load(dir.path()).unwrap(), tms);
    }
}

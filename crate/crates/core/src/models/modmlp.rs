//! Quadratic two-layer MLP `f(x) = W2 (W1 x)²` for modular addition.

use std::f64::consts::PI;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::linalg::Matrix;
use crate::scalar::Real;

/// `W1` is `n_hid × 2p`, `W2` is `p × n_hid`.
#[derive(Clone, Debug, PartialEq)]
pub struct ModMlpParams<T> {
    pub w1: Matrix<T>,
    pub w2: Matrix<T>,
}

/// Which parameters a Jacobian or kernel sums over.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LayerSelection {
    #[default]
    All,
    Layer1,
    Layer2,
}

impl std::str::FromStr for LayerSelection {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "all" | "both" => Ok(Self::All),
            "layer1" | "1" => Ok(Self::Layer1),
            "layer2" | "2" => Ok(Self::Layer2),
            other => Err(Error::InvalidArgument(format!(
                "unknown layer selection {other:?}"
            ))),
        }
    }
}

impl<T: Real> ModMlpParams<T> {
    pub fn new(w1: Matrix<T>, w2: Matrix<T>) -> Result<Self> {
        if w2.cols() != w1.rows() || w1.cols() != 2 * w2.rows() {
            return Err(Error::Shape(format!(
                "W1 {:?} and W2 {:?} are not n_hid x 2p and p x n_hid",
                w1.shape(),
                w2.shape()
            )));
        }
        Ok(Self { w1, w2 })
    }

    pub fn zeros(p: usize, n_hid: usize) -> Self {
        Self {
            w1: Matrix::zeros(n_hid, 2 * p),
            w2: Matrix::zeros(p, n_hid),
        }
    }

    pub fn p(&self) -> usize {
        self.w2.rows()
    }

    pub fn n_hid(&self) -> usize {
        self.w1.rows()
    }

    pub fn layer1_len(&self) -> usize {
        self.w1.rows() * self.w1.cols()
    }

    pub fn layer2_len(&self) -> usize {
        self.w2.rows() * self.w2.cols()
    }

    pub fn n_params(&self) -> usize {
        self.layer1_len() + self.layer2_len()
    }

    /// `W1` row-major, then `W2` row-major.
    pub fn flatten(&self) -> Vec<T> {
        let mut out = self.w1.as_slice().to_vec();
        out.extend_from_slice(self.w2.as_slice());
        out
    }

    pub fn unflatten(p: usize, n_hid: usize, flat: &[T]) -> Result<Self> {
        let l1 = n_hid * 2 * p;
        if flat.len() != l1 + p * n_hid {
            return Err(Error::Shape(format!(
                "expected {} parameters, got {}",
                l1 + p * n_hid,
                flat.len()
            )));
        }
        Ok(Self {
            w1: Matrix::from_vec(n_hid, 2 * p, flat[..l1].to_vec())?,
            w2: Matrix::from_vec(p, n_hid, flat[l1..].to_vec())?,
        })
    }

    /// Flat index range of a layer's parameters.
    pub fn layer_range(&self, layer: LayerSelection) -> std::ops::Range<usize> {
        match layer {
            LayerSelection::All => 0..self.n_params(),
            LayerSelection::Layer1 => 0..self.layer1_len(),
            LayerSelection::Layer2 => self.layer1_len()..self.n_params(),
        }
    }
}

fn check_input<T: Real>(params: &ModMlpParams<T>, len: usize) -> Result<()> {
    if len != params.w1.cols() {
        return Err(Error::Shape(format!(
            "input has length {len}, model expects {}",
            params.w1.cols()
        )));
    }
    Ok(())
}

pub fn modmlp_forward<T: Real>(params: &ModMlpParams<T>, x: &[T]) -> Result<Vec<T>> {
    check_input(params, x.len())?;
    let h2: Vec<T> = params.w1.matvec(x).into_iter().map(|h| h * h).collect();
    Ok(params.w2.matvec(&h2))
}

/// Hidden pre-activations `H = X W1ᵀ` (`N × n_hid`) and outputs `F` (`N × p`).
pub fn modmlp_forward_batch<T: Real>(
    params: &ModMlpParams<T>,
    x: &Matrix<T>,
) -> Result<(Matrix<T>, Matrix<T>)> {
    check_input(params, x.cols())?;
    // One-hot inputs are mostly zero; `matmul` skips zero multipliers.
    let h = x.matmul(&params.w1.transpose())?;
    let f = h.map(|v| v * v).matmul_nt(&params.w2)?;
    Ok((h, f))
}

/// Mean over rows of `Σ_c (f_c − y_c)²`.
pub fn modmlp_loss<T: Real>(params: &ModMlpParams<T>, x: &Matrix<T>, y: &Matrix<T>) -> Result<T> {
    let (_, f) = modmlp_forward_batch(params, x)?;
    let d = f.sub(y)?;
    let total: T = d.as_slice().iter().map(|&v| v * v).sum();
    Ok(total / T::from_count(x.rows().max(1)))
}

/// Analytic gradient of [`modmlp_loss`].
pub fn modmlp_grad<T: Real>(
    params: &ModMlpParams<T>,
    x: &Matrix<T>,
    y: &Matrix<T>,
) -> Result<ModMlpParams<T>> {
    let (h, f) = modmlp_forward_batch(params, x)?;
    let scale = T::lit(2.0) / T::from_count(x.rows().max(1));
    let g = f.sub(y)?.scale(scale);
    let gw2 = g.tr_matmul(&h.map(|v| v * v))?;
    let gh = g.matmul(&params.w2)?.hadamard(&h.scale(T::lit(2.0)))?;
    let gw1 = x.transpose().matmul(&gh)?.transpose();
    Ok(ModMlpParams { w1: gw1, w2: gw2 })
}

/// Fraction of rows whose output argmax equals the label argmax.
pub fn modmlp_accuracy<T: Real>(
    params: &ModMlpParams<T>,
    x: &Matrix<T>,
    y: &Matrix<T>,
) -> Result<f64> {
    let (_, f) = modmlp_forward_batch(params, x)?;
    Ok(argmax_accuracy(&f, y))
}

pub(crate) fn argmax_accuracy<T: Real>(f: &Matrix<T>, y: &Matrix<T>) -> f64 {
    if f.rows() == 0 {
        return 0.0;
    }
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
    let hits = (0..f.rows())
        .filter(|&r| argmax(f.row(r)) == argmax(y.row(r)))
        .count();
    hits as f64 / f.rows() as f64
}

/// Closed-form `C × P_layer` Jacobian at `x`:
/// `∂f_i/∂W1_{km} = 2 W2_{ik} h_k x_m` and `∂f_i/∂W2_{qj} = δ_iq h_j²`.
pub fn modmlp_jacobian<T: Real>(
    params: &ModMlpParams<T>,
    x: &[T],
    layer: LayerSelection,
) -> Result<Matrix<T>> {
    check_input(params, x.len())?;
    let (p, nh, d) = (params.p(), params.n_hid(), params.w1.cols());
    let h = params.w1.matvec(x);
    let range = params.layer_range(layer);
    let offset = range.start;
    let mut jac = Matrix::zeros(p, range.len());
    let two = T::lit(2.0);
    for i in 0..p {
        let row = jac.row_mut(i);
        if layer != LayerSelection::Layer2 {
            for k in 0..nh {
                let c = two * params.w2[(i, k)] * h[k];
                for (m, &xm) in x.iter().enumerate() {
                    row[k * d + m] = c * xm;
                }
            }
        }
        if layer != LayerSelection::Layer1 {
            let base = params.layer1_len() + i * nh - offset;
            for (j, &hj) in h.iter().enumerate() {
                row[base + j] = hj * hj;
            }
        }
    }
    Ok(jac)
}

/// Hand-constructed solution: each hidden unit `j` gets a frequency `k_j`
/// drawn uniformly from `1..=⌊p/2⌋` and phases with `φ3 = φ1 + φ2`, so the
/// network computes `Σ_j cos(2πk_j(a + b − q)/p)/2` plus phase-dependent
/// terms that average out.
pub fn ground_truth_weights<T: Real>(p: usize, n_hid: usize, seed: u64) -> Result<ModMlpParams<T>> {
    ground_truth_weights_with(p, n_hid, seed, true)
}

/// As [`ground_truth_weights`]; with `phase_locked = false` the output phase
/// is drawn independently, which destroys the modular δ function.
pub fn ground_truth_weights_with<T: Real>(
    p: usize,
    n_hid: usize,
    seed: u64,
    phase_locked: bool,
) -> Result<ModMlpParams<T>> {
    if p < 2 || n_hid == 0 {
        return Err(Error::InvalidArgument(format!(
            "need p >= 2 and n_hid >= 1 (got {p}, {n_hid})"
        )));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut w1 = Matrix::zeros(n_hid, 2 * p);
    let mut w2 = Matrix::zeros(p, n_hid);
    let pf = p as f64;
    for j in 0..n_hid {
        let k = rng.gen_range(1..=p / 2) as f64;
        let phi1 = rng.gen_range(0.0..2.0 * PI);
        let phi2 = rng.gen_range(0.0..2.0 * PI);
        let free = rng.gen_range(0.0..2.0 * PI);
        let phi3 = if phase_locked { phi1 + phi2 } else { free };
        for a in 0..p {
            let t = 2.0 * PI * k * a as f64 / pf;
            w1[(j, a)] = T::lit((t + phi1).cos());
            w1[(j, p + a)] = T::lit((t + phi2).cos());
        }
        for q in 0..p {
            w2[(q, j)] = T::lit((-2.0 * PI * k * q as f64 / pf - phi3).cos());
        }
    }
    Ok(ModMlpParams { w1, w2 })
}

/// Rescales `W2` by the least-squares optimal factor against one-hot labels.
pub fn calibrate_output_scale<T: Real>(
    params: &ModMlpParams<T>,
    x: &Matrix<T>,
    y: &Matrix<T>,
) -> Result<ModMlpParams<T>> {
    let (_, f) = modmlp_forward_batch(params, x)?;
    let ff: T = f.as_slice().iter().map(|&v| v * v).sum();
    if ff == T::zero() {
        return Ok(params.clone());
    }
    let fy: T = f
        .as_slice()
        .iter()
        .zip(y.as_slice())
        .map(|(&a, &b)| a * b)
        .sum();
    Ok(ModMlpParams {
        w1: params.w1.clone(),
        w2: params.w2.scale(fy / ff),
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::gen_modadd_dataset;

    #[test]
    fn zero_first_layer() {
        let mut p = ModMlpParams::<f64>::zeros(3, 4);
        p.w2 = Matrix::from_fn(3, 4, |i, j| (i + j) as f64);
        assert_eq!(
            modmlp_forward(&p, &[1.0, 0.0, 0.0, 0.0, 1.0, 0.0]).unwrap(),
            vec![0.0; 3]
        );
    }

    #[test]
    fn hand_computed_p2() {
        // p = 2, n_hid = 2. x = onehot(1) ⊕ onehot(0) = [0, 1, 1, 0].
        let w1 = Matrix::from_rows(&[vec![1.0, 2.0, 3.0, 4.0], vec![-1.0, 0.5, 0.0, 2.0]]).unwrap();
        let w2 = Matrix::from_rows(&[vec![1.0, -1.0], vec![0.5, 2.0]]).unwrap();
        let p = ModMlpParams::new(w1, w2).unwrap();
        // h = [2 + 3, 0.5 + 0] = [5, 0.5]; h² = [25, 0.25]
        let f = modmlp_forward(&p, &[0.0, 1.0, 1.0, 0.0]).unwrap();
        assert_eq!(f, vec![25.0 - 0.25, 12.5 + 0.5]);
    }

    #[test]
    fn layer2_rows_are_class_one_hot() {
        let p = ground_truth_weights::<f64>(5, 6, 1).unwrap();
        let ds = gen_modadd_dataset::<f64>(5).unwrap();
        let j = modmlp_jacobian(&p, ds.inputs.row(7), LayerSelection::Layer2).unwrap();
        for i in 0..5 {
            for c in 0..5 {
                let block = &j.row(i)[c * 6..(c + 1) * 6];
                assert_eq!(block.iter().any(|&v| v != 0.0), i == c);
            }
        }
        let all = modmlp_jacobian(&p, ds.inputs.row(7), LayerSelection::All).unwrap();
        assert_eq!(all.cols(), 6 * 10 + 5 * 6);
    }

    #[test]
    fn ground_truth_is_a_modular_delta() {
        for (p, seed) in [(5usize, 0u64), (13, 1), (29, 2)] {
            let ds = gen_modadd_dataset::<f64>(p).unwrap();
            let params = ground_truth_weights::<f64>(p, 512, seed).unwrap();
            assert_eq!(
                modmlp_accuracy(&params, &ds.inputs, &ds.labels).unwrap(),
                1.0,
                "p={p}"
            );
        }
    }

    #[test]
    fn broken_phase_constraint_collapses() {
        let ds = gen_modadd_dataset::<f64>(29).unwrap();
        let params = ground_truth_weights_with::<f64>(29, 512, 3, false).unwrap();
        assert!(modmlp_accuracy(&params, &ds.inputs, &ds.labels).unwrap() < 0.2);
    }

    #[test]
    fn p3_single_frequency_table() {
        // One unit with k = 1 and zero phases: f_q(a, b) = (cos θa + cos θb)² cos θq, θ = 2π/3.
        let ds = gen_modadd_dataset::<f64>(3).unwrap();
        let c = |s: usize| (2.0 * PI * s as f64 / 3.0).cos();
        let w1 = Matrix::from_fn(1, 6, |_, m| c(m % 3));
        let w2 = Matrix::from_fn(3, 1, |q, _| c(q));
        let params = ModMlpParams::new(w1, w2).unwrap();
        for a in 0..3 {
            for b in 0..3 {
                let f = modmlp_forward(&params, ds.inputs.row(a * 3 + b)).unwrap();
                for q in 0..3 {
                    let expected = (c(a) + c(b)).powi(2) * c(q);
                    assert!((f[q] - expected).abs() < 1e-12);
                }
            }
        }
    }

    #[test]
    fn calibration_reduces_loss() {
        let ds = gen_modadd_dataset::<f64>(7).unwrap();
        let raw = ground_truth_weights::<f64>(7, 64, 0).unwrap();
        let cal = calibrate_output_scale(&raw, &ds.inputs, &ds.labels).unwrap();
        assert!(
            modmlp_loss(&cal, &ds.inputs, &ds.labels).unwrap()
                < modmlp_loss(&raw, &ds.inputs, &ds.labels).unwrap()
        );
        assert_eq!(modmlp_accuracy(&cal, &ds.inputs, &ds.labels).unwrap(), 1.0);
    }
}

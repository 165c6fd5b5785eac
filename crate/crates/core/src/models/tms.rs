//! Tied-weight ReLU autoencoder `f(x) = ReLU(WᵀW x + b)`.

use serde::{Deserialize, Serialize};

use crate::data::Dataset;
use crate::error::{Error, Result};
use crate::linalg::Matrix;
use crate::scalar::Real;

/// `W` is `m × n` (hidden × features), `b` has length `n`.
#[derive(Clone, Debug, PartialEq)]
pub struct TmsParams<T> {
    pub w: Matrix<T>,
    pub b: Vec<T>,
}

/// Per-feature loss weights `I_i = base^i`.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct ImportanceSpec {
    pub base: f64,
}

impl Default for ImportanceSpec {
    fn default() -> Self {
        Self { base: 0.8 }
    }
}

impl ImportanceSpec {
    pub fn new(base: f64) -> Result<Self> {
        if !(base > 0.0 && base <= 1.0) {
            return Err(Error::InvalidArgument(format!(
                "importance base must lie in (0, 1], got {base}"
            )));
        }
        Ok(Self { base })
    }

    pub fn weights<T: Real>(&self, n: usize) -> Vec<T> {
        (0..n).map(|i| T::lit(self.base.powi(i as i32))).collect()
    }
}

impl<T: Real> TmsParams<T> {
    pub fn new(w: Matrix<T>, b: Vec<T>) -> Result<Self> {
        if w.cols() != b.len() {
            return Err(Error::Shape(format!(
                "W is {}x{} but b has length {}",
                w.rows(),
                w.cols(),
                b.len()
            )));
        }
        Ok(Self { w, b })
    }

    pub fn zeros(m: usize, n: usize) -> Self {
        Self {
            w: Matrix::zeros(m, n),
            b: vec![T::zero(); n],
        }
    }

    pub fn hidden(&self) -> usize {
        self.w.rows()
    }

    pub fn features(&self) -> usize {
        self.w.cols()
    }

    pub fn n_params(&self) -> usize {
        self.hidden() * self.features() + self.features()
    }

    /// `W` row-major, then `b`.
    pub fn flatten(&self) -> Vec<T> {
        let mut out = self.w.as_slice().to_vec();
        out.extend_from_slice(&self.b);
        out
    }

    pub fn unflatten(m: usize, n: usize, flat: &[T]) -> Result<Self> {
        if flat.len() != m * n + n {
            return Err(Error::Shape(format!(
                "expected {} parameters, got {}",
                m * n + n,
                flat.len()
            )));
        }
        Ok(Self {
            w: Matrix::from_vec(m, n, flat[..m * n].to_vec())?,
            b: flat[m * n..].to_vec(),
        })
    }

    /// Gram matrix `WᵀW` (`n × n`).
    pub fn gram(&self) -> Matrix<T> {
        self.w.tr_matmul(&self.w).expect("W shape")
    }
}

fn check_input<T: Real>(params: &TmsParams<T>, len: usize) -> Result<()> {
    if len != params.features() {
        return Err(Error::Shape(format!(
            "input has length {len}, model has {} features",
            params.features()
        )));
    }
    Ok(())
}

/// Pre-activations `WᵀW x + b` for one input.
pub fn tms_preactivation<T: Real>(params: &TmsParams<T>, x: &[T]) -> Result<Vec<T>> {
    check_input(params, x.len())?;
    let h = params.w.matvec(x);
    let mut pre = params.w.tr_matvec(&h);
    for (p, &b) in pre.iter_mut().zip(&params.b) {
        *p += b;
    }
    Ok(pre)
}

pub fn tms_forward<T: Real>(params: &TmsParams<T>, x: &[T]) -> Result<Vec<T>> {
    Ok(tms_preactivation(params, x)?
        .into_iter()
        .map(|v| v.max(T::zero()))
        .collect())
}

/// Batched pre-activations (`N × n`) for the rows of `x`.
pub fn tms_preactivation_batch<T: Real>(params: &TmsParams<T>, x: &Matrix<T>) -> Result<Matrix<T>> {
    check_input(params, x.cols())?;
    let h = x.matmul_nt(&params.w)?;
    let mut pre = h.matmul(&params.w)?;
    for r in 0..pre.rows() {
        for (v, &b) in pre.row_mut(r).iter_mut().zip(&params.b) {
            *v += b;
        }
    }
    Ok(pre)
}

/// Mean over data points of `Σ_i I_i (x_i − f_i(x))²`.
pub fn tms_loss<T: Real>(
    params: &TmsParams<T>,
    ds: &Dataset<T>,
    imp: &ImportanceSpec,
) -> Result<T> {
    ds.expect_tms()?;
    let pre = tms_preactivation_batch(params, &ds.inputs)?;
    let weights = imp.weights::<T>(params.features());
    let mut total = T::zero();
    for r in 0..pre.rows() {
        let x = ds.labels.row(r);
        for ((&p, &xi), &w) in pre.row(r).iter().zip(x).zip(&weights) {
            let d = xi - p.max(T::zero());
            total += w * d * d;
        }
    }
    Ok(total / T::from_count(ds.len().max(1)))
}

/// Analytic gradient of [`tms_loss`]; the ReLU derivative at 0 is 0.
///
/// With `G = (2/N) · I ∘ (f − x) ∘ 1[pre > 0]`, `∂L/∂W = W(GᵀX + XᵀG)` and
/// `∂L/∂b = Σ_α G_α`.
pub fn tms_grad<T: Real>(
    params: &TmsParams<T>,
    ds: &Dataset<T>,
    imp: &ImportanceSpec,
) -> Result<TmsParams<T>> {
    ds.expect_tms()?;
    let x = &ds.inputs;
    let pre = tms_preactivation_batch(params, x)?;
    let weights = imp.weights::<T>(params.features());
    let scale = T::lit(2.0) / T::from_count(ds.len().max(1));
    let mut g = Matrix::zeros(pre.rows(), pre.cols());
    for r in 0..pre.rows() {
        let target = ds.labels.row(r);
        let grow = g.row_mut(r);
        for (i, &p) in pre.row(r).iter().enumerate() {
            if p > T::zero() {
                grow[i] = scale * weights[i] * (p - target[i]);
            }
        }
    }
    let gtx = g.tr_matmul(x)?;
    let sym = gtx.add(&gtx.transpose())?;
    let gw = params.w.matmul(&sym)?;
    let mut gb = vec![T::zero(); params.features()];
    for r in 0..g.rows() {
        for (acc, &v) in gb.iter_mut().zip(g.row(r)) {
            *acc += v;
        }
    }
    Ok(TmsParams { w: gw, b: gb })
}

/// Gates `g_i = 1[(WᵀWx + b)_i > 0]`.
pub fn tms_gates<T: Real>(params: &TmsParams<T>, x: &[T]) -> Result<Vec<T>> {
    Ok(tms_preactivation(params, x)?
        .into_iter()
        .map(|p| if p > T::zero() { T::one() } else { T::zero() })
        .collect())
}

/// Closed-form `C × P` Jacobian at `x`:
/// `∂f_i/∂W_{aj} = g_i (W_{ai} x_j + δ_ij (Wx)_a)`, `∂f_i/∂b_j = g_i δ_ij`.
pub fn tms_jacobian<T: Real>(params: &TmsParams<T>, x: &[T]) -> Result<Matrix<T>> {
    let gates = tms_gates(params, x)?;
    let (m, n) = (params.hidden(), params.features());
    let h = params.w.matvec(x);
    let mut jac = Matrix::zeros(n, params.n_params());
    for i in 0..n {
        if gates[i] == T::zero() {
            continue;
        }
        let row = jac.row_mut(i);
        for a in 0..m {
            let wai = params.w[(a, i)];
            let block = &mut row[a * n..(a + 1) * n];
            for (j, v) in block.iter_mut().enumerate() {
                *v = wai * x[j];
            }
            block[i] += h[a];
        }
        row[m * n + i] = T::one();
    }
    Ok(jac)
}

/// Number of features with `(WᵀW)_ii > threshold`.
pub fn reconstructed_feature_count<T: Real>(params: &TmsParams<T>, threshold: f64) -> usize {
    let t = T::lit(threshold);
    (0..params.features())
        .filter(|&i| {
            (0..params.hidden())
                .map(|a| params.w[(a, i)] * params.w[(a, i)])
                .sum::<T>()
                > t
        })
        .count()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::{DatasetKind, DatasetMeta};

    fn tms_ds(rows: &[Vec<f64>]) -> Dataset<f64> {
        let x = Matrix::from_rows(rows).unwrap();
        Dataset {
            labels: x.clone(),
            inputs: x,
            meta: DatasetMeta {
                kind: DatasetKind::Tms { n: rows[0].len() },
                seed: None,
                split: None,
            },
        }
    }

    #[test]
    fn zero_and_identity_models() {
        let z = TmsParams::<f64>::zeros(2, 3);
        assert_eq!(tms_forward(&z, &[0.3, 0.2, 0.9]).unwrap(), vec![0.0; 3]);
        let id = TmsParams::new(Matrix::identity(3), vec![0.0; 3]).unwrap();
        assert_eq!(
            tms_forward(&id, &[0.3, 0.0, 0.9]).unwrap(),
            vec![0.3, 0.0, 0.9]
        );
        assert!(matches!(tms_forward(&id, &[1.0]), Err(Error::Shape(_))));
    }

    #[test]
    fn hand_computed_two_by_three() {
        // W = [[1, 0, 2], [0, 1, -1]], b = [0, -0.5, 0.1], x = [1, 2, 1]
        // Wx = [3, 1]; WᵀWx = [3, 1, 5]; pre = [3, 0.5, 5.1].
        let w = Matrix::from_rows(&[vec![1.0, 0.0, 2.0], vec![0.0, 1.0, -1.0]]).unwrap();
        let p = TmsParams::new(w, vec![0.0, -0.5, 0.1]).unwrap();
        let f = tms_forward(&p, &[1.0, 2.0, 1.0]).unwrap();
        for (a, b) in f.iter().zip([3.0f64, 0.5, 5.1]) {
            assert!((a - b).abs() < 1e-14);
        }
    }

    #[test]
    fn loss_values() {
        let ds = tms_ds(&[vec![1.0, 0.0]]);
        let z = TmsParams::<f64>::zeros(1, 2);
        assert_eq!(tms_loss(&z, &ds, &ImportanceSpec::default()).unwrap(), 1.0);
        let id = TmsParams::new(Matrix::identity(2), vec![0.0; 2]).unwrap();
        assert_eq!(tms_loss(&id, &ds, &ImportanceSpec::default()).unwrap(), 0.0);
        let g = tms_grad(&id, &ds, &ImportanceSpec::default()).unwrap();
        assert!(g.flatten().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn count_threshold() {
        assert_eq!(
            reconstructed_feature_count(
                &TmsParams::<f64>::new(Matrix::identity(4), vec![0.0; 4]).unwrap(),
                0.75
            ),
            4
        );
        assert_eq!(
            reconstructed_feature_count(&TmsParams::<f64>::zeros(2, 4), 0.75),
            0
        );
    }

    #[test]
    fn closed_gates_give_zero_jacobian() {
        let mut p = TmsParams::<f64>::zeros(2, 3);
        p.w[(0, 0)] = 1.0;
        p.b = vec![-1.0; 3];
        let j = tms_jacobian(&p, &[0.0; 3]).unwrap();
        assert!(j.as_slice().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn flatten_round_trip() {
        let p = TmsParams::new(
            Matrix::from_fn(2, 3, |i, j| (i * 3 + j) as f64),
            vec![7.0, 8.0, 9.0],
        )
        .unwrap();
        let flat = p.flatten();
        assert_eq!(flat, vec![0.0, 1.0, 2.0, 3.0, 4.0, 5.0, 7.0, 8.0, 9.0]);
        assert_eq!(TmsParams::unflatten(2, 3, &flat).unwrap(), p);
    }
}

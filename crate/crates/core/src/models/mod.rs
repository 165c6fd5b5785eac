//! The two architectures, their losses, gradients and Jacobians.

pub mod checkpoint;
pub mod modmlp;
pub mod tms;

pub use checkpoint::{
    load_checkpoint, read_header, save_checkpoint, Checkpoint, CheckpointHeader, OptimizerState,
};
pub use modmlp::{
    calibrate_output_scale, ground_truth_weights, ground_truth_weights_with, modmlp_accuracy,
    modmlp_forward, modmlp_forward_batch, modmlp_grad, modmlp_jacobian, modmlp_loss,
    LayerSelection, ModMlpParams,
};
pub use tms::{
    reconstructed_feature_count, tms_forward, tms_gates, tms_grad, tms_jacobian, tms_loss,
    tms_preactivation, tms_preactivation_batch, ImportanceSpec, TmsParams,
};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::scalar::Real;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Arch {
    Tms,
    Modmlp,
}

/// Parameters of either architecture.
#[derive(Clone, Debug, PartialEq)]
pub enum ModelParams<T> {
    Tms(TmsParams<T>),
    ModMlp(ModMlpParams<T>),
}

impl<T: Real> ModelParams<T> {
    pub fn arch(&self) -> Arch {
        match self {
            Self::Tms(_) => Arch::Tms,
            Self::ModMlp(_) => Arch::Modmlp,
        }
    }

    /// Matrix shapes in flattening order.
    pub fn shapes(&self) -> Vec<Vec<usize>> {
        match self {
            Self::Tms(p) => vec![vec![p.hidden(), p.features()], vec![p.features()]],
            Self::ModMlp(p) => vec![
                vec![p.w1.rows(), p.w1.cols()],
                vec![p.w2.rows(), p.w2.cols()],
            ],
        }
    }

    pub fn n_params(&self) -> usize {
        match self {
            Self::Tms(p) => p.n_params(),
            Self::ModMlp(p) => p.n_params(),
        }
    }

    pub fn flatten(&self) -> Vec<T> {
        match self {
            Self::Tms(p) => p.flatten(),
            Self::ModMlp(p) => p.flatten(),
        }
    }

    pub fn unflatten(arch: Arch, shapes: &[Vec<usize>], flat: &[T]) -> Result<Self> {
        let bad = || {
            Error::Shape(format!(
                "shapes {shapes:?} do not describe a {arch:?} model"
            ))
        };
        match arch {
            Arch::Tms => {
                let [w, b] = shapes else { return Err(bad()) };
                if w.len() != 2 || b.len() != 1 || b[0] != w[1] {
                    return Err(bad());
                }
                Ok(Self::Tms(TmsParams::unflatten(w[0], w[1], flat)?))
            }
            Arch::Modmlp => {
                let [w1, w2] = shapes else { return Err(bad()) };
                if w1.len() != 2 || w2.len() != 2 || w1[1] != 2 * w2[0] || w2[1] != w1[0] {
                    return Err(bad());
                }
                Ok(Self::ModMlp(ModMlpParams::unflatten(w2[0], w1[0], flat)?))
            }
        }
    }

    pub fn as_tms(&self) -> Result<&TmsParams<T>> {
        match self {
            Self::Tms(p) => Ok(p),
            Self::ModMlp(_) => Err(Error::InvalidArgument("expected TMS parameters".into())),
        }
    }

    pub fn as_modmlp(&self) -> Result<&ModMlpParams<T>> {
        match self {
            Self::ModMlp(p) => Ok(p),
            Self::Tms(_) => Err(Error::InvalidArgument(
                "expected modular MLP parameters".into(),
            )),
        }
    }

    pub fn is_finite(&self) -> bool {
        self.flatten().iter().all(|v| v.is_finite())
    }
}

impl<T> From<TmsParams<T>> for ModelParams<T> {
    fn from(p: TmsParams<T>) -> Self {
        Self::Tms(p)
    }
}

impl<T> From<ModMlpParams<T>> for ModelParams<T> {
    fn from(p: ModMlpParams<T>) -> Self {
        Self::ModMlp(p)
    }
}

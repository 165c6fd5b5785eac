use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    #[error("matrix contains non-finite entries")]
    NonFiniteInput,

    #[error("iterative eigensolver did not converge after {iterations} iterations (last residual {residual:e})")]
    ConvergenceFailure { iterations: usize, residual: f64 },

    #[error("sparsity must lie in [0, 1), got {0}")]
    InvalidSparsity(f64),

    #[error("fraction must lie strictly inside (0, 1), got {0}")]
    InvalidFraction(f64),

    #[error("shape mismatch: {0}")]
    Shape(String),

    #[error("dataset kind mismatch: expected {expected}, found {found}")]
    WrongDatasetKind {
        expected: &'static str,
        found: &'static str,
    },

    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("training diverged at epoch {epoch} (loss = {loss})")]
    Divergence { epoch: usize, loss: f64 },

    #[error("spectrum needs at least two eigenvalues")]
    EmptySpectrum,

    #[error("kernel system is numerically singular; pass a positive ridge (suggested {suggested_ridge:e})")]
    SingularKernel { suggested_ridge: f64 },

    #[error("basis has no columns")]
    EmptyBasis,

    #[error("cannot keep {keep} of {available} columns")]
    InvalidSplit { keep: usize, available: usize },

    #[error("kernel dimension {dim} exceeds the dense cap {cap}; use the iterative path or force")]
    KernelTooLarge { dim: usize, cap: usize },

    #[error("requested cliff #{requested} but only {found} boundaries were detected")]
    CliffNotFound { requested: usize, found: usize },

    #[error("corrupt file {path}: {reason}")]
    Corrupt { path: String, reason: String },

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),

    #[error(transparent)]
    Csv(#[from] csv::Error),
}

pub type Result<T, E = Error> = std::result::Result<T, E>;

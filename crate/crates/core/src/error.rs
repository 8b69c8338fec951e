use thiserror::Error;

/// Errors raised across the workbench.
#[derive(Debug, Error)]
pub enum Error {
    #[error("grid resolution {grid} is too small for cutoff {cutoff} (need at least {required})")]
    ResolutionTooSmall {
        grid: usize,
        cutoff: usize,
        required: usize,
    },

    #[error("coefficient array has length {got}, expected {expected} for cutoff {cutoff}")]
    ShapeMismatch {
        got: usize,
        expected: usize,
        cutoff: usize,
    },

    #[error("non-finite amplitude at lattice point {0:?}")]
    NonFinite([i32; 3]),

    #[error("Hermitian symmetry violated by {deviation:e} at lattice point {at:?}")]
    SymmetryViolation { deviation: f64, at: [i32; 3] },

    #[error("multiplier is not conjugate-symmetric; real-valuedness lost")]
    RealityLost,

    #[error("invalid parameter: {0}")]
    InvalidParameter(String),

    #[error("partition of unity self-check failed: residual {0:e}")]
    PartitionCheck(f64),

    #[error("lattice sum needs {terms} terms, budget is {budget}")]
    Budget { terms: u64, budget: u64 },

    #[error("moment of order {order} exceeds the supported maximum {max}")]
    MomentOrder { order: usize, max: usize },

    #[error("dimension mismatch: {0}")]
    Dimension(String),

    #[error("blow-up at step {step}: field norm {norm:e} exceeds ceiling {ceiling:e}")]
    BlowUp { step: usize, norm: f64, ceiling: f64 },

    #[error("stability: dt * (3K^2 + m0^2) = {0} exceeds 0.5 for the tamed scheme")]
    Unstable(f64),

    #[error("config error at `{key}`: {msg}")]
    Config { key: String, msg: String },

    #[error("missing column `{0}`")]
    MissingColumn(String),

    #[error("malformed snapshot: {0}")]
    Snapshot(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),
}

pub type Result<T> = std::result::Result<T, Error>;

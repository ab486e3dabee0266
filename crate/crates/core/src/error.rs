use thiserror::Error;

/// Crate-wide error type.
#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid grid: {0}")]
    InvalidGrid(String),

    #[error("line {from}-{to} has near-zero impedance |z| = {z_abs:.3e}")]
    DegenerateLine { from: usize, to: usize, z_abs: f64 },

    #[error("{op}: shape mismatch between {a:?} and {b:?}")]
    ShapeMismatch {
        op: &'static str,
        a: (usize, usize),
        b: (usize, usize),
    },

    #[error("{op}: expected scalar (1x1), got {shape:?}")]
    NotScalar { op: &'static str, shape: (usize, usize) },

    #[error("backward: loss must be scalar, got {shape:?}")]
    NonScalarLoss { shape: (usize, usize) },

    #[error("softmax: row {row} is fully masked")]
    FullyMaskedRow { row: usize },

    #[error("grad_check: step size must be positive, got {0}")]
    BadStepSize(f64),

    #[error("linear solve: matrix is singular at pivot {pivot}")]
    SingularMatrix { pivot: usize },

    #[error("numerical blowup: non-finite value in {what} at refinement step {step}")]
    NumericalBlowup { what: &'static str, step: usize },

    #[error("non-finite gradient for parameter '{name}'")]
    NonFiniteGradient { name: String },

    #[error("non-finite loss at epoch {epoch}, batch {batch}")]
    NonFiniteLoss { epoch: usize, batch: usize },

    #[error("generation budget exhausted: kept {kept}/{requested} after {attempts} attempts")]
    GenerationBudget {
        kept: usize,
        requested: usize,
        attempts: usize,
    },

    #[error("adapter already attached to '{target}'")]
    AdapterAlreadyAttached { target: String },

    #[error("mode {mode} requires adapters but none are attached")]
    MissingAdapters { mode: &'static str },

    #[error("no such parameter target '{0}'")]
    NoSuchTarget(String),

    #[error("LoRA rank must satisfy 0 < r <= min(d_out, d_in) = {max_rank}, got {rank}")]
    BadRank { rank: usize, max_rank: usize },

    #[error("dataset line {line}: {msg}")]
    MalformedDataset { line: usize, msg: String },

    #[error("checkpoint: {0}")]
    Checkpoint(String),

    #[error("config: {0}")]
    Config(String),

    #[error("stats: {0}")]
    Stats(String),

    #[error(transparent)]
    Json(#[from] serde_json::Error),

    #[error(transparent)]
    Io(#[from] std::io::Error),
}

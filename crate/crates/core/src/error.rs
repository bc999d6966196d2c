use thiserror::Error;

/// Errors raised by the numerical core and the run orchestration.
#[derive(Debug, Error)]
pub enum Error {
    #[error("row {row} has norm <= {threshold:e} and cannot be normalized")]
    ZeroRow { row: usize, threshold: f64 },

    #[error("dimension mismatch in {context}: expected {expected}, found {found}")]
    DimensionMismatch {
        context: &'static str,
        expected: usize,
        found: usize,
    },

    #[error("matrix is rank deficient: pivot norm of row {row} is {pivot:e}")]
    RankDeficient { row: usize, pivot: f64 },

    #[error("non-finite value in {0}")]
    NonFinite(&'static str),

    #[error("batch too small: need at least {min} rows, got {got}")]
    BatchTooSmall { min: usize, got: usize },

    #[error("invalid pair map: {0}")]
    InvalidPairMap(String),

    #[error("dimension {dim} of view {view} has batch std {std:e} (degenerate)")]
    DegenerateDimension { view: char, dim: usize, std: f64 },

    #[error("label {label} at sample {index} is out of range for {classes} classes")]
    LabelOutOfRange { index: usize, label: usize, classes: usize },

    #[error("cannot build {classes} orthonormal anchors in dimension {dim}")]
    TooManyClasses { classes: usize, dim: usize },

    #[error("could not sample cluster directions after {attempts} attempts")]
    DirectionSamplingFailed { attempts: usize },

    #[error("loss `{0}` is not supported here")]
    UnsupportedLoss(String),

    #[error("class {0} has no samples in the probe's training split")]
    MissingClass(usize),

    #[error("non-finite loss at epoch {epoch}, step {step}")]
    NonFiniteLoss { epoch: usize, step: usize },

    #[error("invalid configuration: {0}")]
    InvalidConfig(String),

    #[error("I/O error: {0}")]
    Io(#[from] std::io::Error),

    #[error("CSV error: {0}")]
    Csv(#[from] csv::Error),

    #[error("JSON error: {0}")]
    Json(#[from] serde_json::Error),
}

pub type Result<T, E = Error> = std::result::Result<T, E>;

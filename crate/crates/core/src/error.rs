use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    #[error("dimension mismatch: expected {expected}, got {got}")]
    DimensionMismatch { expected: usize, got: usize },

    #[error("matrix is not positive definite (pivot {pivot} at row {row})")]
    NotPositiveDefinite { row: usize, pivot: f64 },

    #[error("matrix is not symmetric (|a[{row},{col}] - a[{col},{row}]| = {diff})")]
    NotSymmetric { row: usize, col: usize, diff: f64 },

    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("metric {metric} does not apply to {space} action spaces")]
    MetricMismatch {
        metric: &'static str,
        space: &'static str,
    },

    #[error("archive is empty")]
    EmptyArchive,

    #[error("snapshot has no behavior descriptor but the archive is a grid")]
    MissingDescriptor,

    #[error("invalid configuration: {0}")]
    Config(String),

    #[error("snapshot format: {0}")]
    Format(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

pub type Result<T, E = Error> = std::result::Result<T, E>;

use thiserror::Error;

/// Errors raised across the precoding pipeline.
#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid configuration: {0}")]
    InvalidConfig(String),

    #[error("dimension mismatch: {0}")]
    DimensionMismatch(String),

    #[error("non-finite value in {0}")]
    NonFinite(&'static str),

    #[error("matrix is numerically singular: {0}")]
    Singular(&'static str),

    #[error("matrix is rank deficient: {0}")]
    RankDeficient(&'static str),

    #[error("cannot normalize a zero vector")]
    ZeroVector,

    #[error("recovered direction of stream {stream} is zero but its power is {power:e}")]
    ZeroDirection { stream: usize, power: f64 },

    #[error("matrix is not Hermitian (max asymmetry {0:e})")]
    NotHermitian(f64),

    #[error("{0} streams requested for a user with {1} receive antennas")]
    TooManyStreams(usize, usize),

    #[error("degenerate instance: {0}")]
    Degenerate(&'static str),

    #[error("channel set is already flagged as noisy")]
    AlreadyNoisy,

    #[error("training diverged: {0}")]
    Diverged(String),

    #[error("malformed file: {0}")]
    Format(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),

    #[error(transparent)]
    Csv(#[from] csv::Error),
}

pub type Result<T> = std::result::Result<T, Error>;

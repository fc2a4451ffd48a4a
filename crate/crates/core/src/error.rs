use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("dimension mismatch: expected {expected}, got {actual}")]
    DimensionMismatch { expected: usize, actual: usize },

    #[error("invalid mixture: {0}")]
    InvalidMixture(String),

    #[error("invalid parameter: {0}")]
    InvalidParameter(String),

    #[error("non-finite cost in residual block {block}")]
    NonFiniteCost { block: usize },

    /// `JᵀJ` could not be inverted. No pseudo-inverse is substituted.
    #[error("information matrix is rank deficient (numerical rank {rank} of {dim})")]
    RankDeficient { rank: usize, dim: usize },

    #[error("loss `{0}` is not applicable here")]
    UnsupportedLoss(String),

    #[error("experiment aborted: {0}")]
    Experiment(String),

    #[error("malformed record: {0}")]
    Parse(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

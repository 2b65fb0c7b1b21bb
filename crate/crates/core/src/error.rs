use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    /// Inputs disagree in shape or violate a documented precondition.
    #[error("configuration error: {0}")]
    Config(String),

    /// A probability row, reward or similar quantity is out of range.
    #[error("validation error: {0}")]
    Validation(String),

    /// A computation produced a non-finite value.
    #[error("numeric error: {0}")]
    Numeric(String),

    /// Normal equations are singular and no regularization is present.
    #[error("solver error: normal-equation matrix is singular (rank {rank} of {dim}); add regularization or improve coverage")]
    Singular { rank: usize, dim: usize },

    /// A covariance block could not be inverted reliably.
    #[error("inference error: {0}")]
    Inference(String),

    /// A Monte-Carlo study or bootstrap run lost too many replicates.
    #[error("study error: {0}")]
    Study(String),

    #[error("format error: {0}")]
    Format(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),
}

pub type Result<T, E = Error> = std::result::Result<T, E>;

pub(crate) fn config<T>(msg: impl Into<String>) -> Result<T> {
    Err(Error::Config(msg.into()))
}

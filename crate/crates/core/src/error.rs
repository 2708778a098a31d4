use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("dimension mismatch: expected {expected}, got {got}")]
    DimensionMismatch { expected: usize, got: usize },

    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("non-finite value encountered: {0}")]
    NonFinite(String),

    #[error("chain is not ergodic: {0}")]
    NotErgodic(String),

    #[error("replay buffer is empty")]
    EmptyBuffer,

    #[error("scripted expert produced {got} successes in {attempts} attempts (needed {needed})")]
    ExpertFailed { needed: usize, got: usize, attempts: usize },

    #[error("training diverged at iteration {iter}: {what}")]
    Divergence { iter: usize, what: String },

    #[error("invalid config:\n{}", .0.join("\n"))]
    Config(Vec<String>),

    #[error("checkpoint format: {0}")]
    Checkpoint(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

pub(crate) fn check_dim(expected: usize, got: usize) -> Result<()> {
    if expected != got {
        return Err(Error::DimensionMismatch { expected, got });
    }
    Ok(())
}

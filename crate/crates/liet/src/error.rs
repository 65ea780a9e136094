//! Error type shared across the crate.

/// Unified error for dataset, checkpoint, config and contract failures.
#[derive(Debug, thiserror::Error)]
pub enum Error {
    /// An API precondition was violated (wrong channel count, indivisible
    /// spatial dims, empty batch, ...). The message names the violation.
    #[error("contract violation: {0}")]
    Contract(String),

    #[error("config error: {0}")]
    Config(String),

    #[error("checkpoint error: {0}")]
    Checkpoint(String),

    #[error("dataset error: {0}")]
    Dataset(String),

    /// Training aborted because a loss term stopped being finite.
    #[error("non-finite loss: term `{term}` at iteration {iter}")]
    NonFiniteLoss { term: String, iter: u64 },

    #[error("i/o error: {0}")]
    Io(#[from] std::io::Error),

    #[error("json error: {0}")]
    Json(#[from] serde_json::Error),

    #[error("png error: {0}")]
    Image(#[from] image::ImageError),
}

pub type Result<T> = std::result::Result<T, Error>;

impl Error {
    /// Convenience for formatted contract violations.
    pub fn contract(msg: impl Into<String>) -> Self {
        Error::Contract(msg.into())
    }
}

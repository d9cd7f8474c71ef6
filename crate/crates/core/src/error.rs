//! Error type shared by every subsystem.

use thiserror::Error;

#[derive(Error, Debug)]
pub enum Error {
    /// Tensor/raster dimensions do not line up.
    #[error("shape error: {0}")]
    Shape(String),

    /// A container file is malformed (bad magic, truncated record, wrong dtype).
    #[error("format error: {0}")]
    Format(String),

    /// Sample values violate a data invariant (non-finite, out of range).
    #[error("data error: {0}")]
    Data(String),

    /// Invalid configuration.
    #[error("config error: {0}")]
    Config(String),

    /// Operation called in the wrong state (backward twice, missing grads).
    #[error("state error: {0}")]
    State(String),

    /// Argument outside the mathematical domain of the operation.
    #[error("domain error: {0}")]
    Domain(String),

    /// Not enough samples / area to satisfy the request.
    #[error("capacity error: {0}")]
    Capacity(String),

    /// Training diverged.
    #[error("training error at epoch {epoch}, batch {batch}: {msg}")]
    Training {
        epoch: usize,
        batch: usize,
        msg: String,
    },

    #[error("io error: {0}")]
    Io(#[from] std::io::Error),
}

pub type Result<T> = std::result::Result<T, Error>;

impl Error {
    /// Process exit code for the CLI: 2 config, 4 training, 3 anything data/io related.
    pub fn exit_code(&self) -> i32 {
        match self {
            Error::Config(_) => 2,
            Error::Training { .. } => 4,
            _ => 3,
        }
    }
}

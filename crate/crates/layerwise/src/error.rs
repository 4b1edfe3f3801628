//! Crate-wide error type, categorized for CLI exit codes.

use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    /// Invalid or inconsistent configuration (bad preset, schedule, override).
    #[error("config error: {0}")]
    Config(String),

    /// Dataset parsing or validation failure.
    #[error("data error: {0}")]
    Data(String),

    /// Non-finite values or numeric divergence during training.
    #[error("numeric error: {0}")]
    Numeric(String),

    /// Checkpoint format, version or checksum failure.
    #[error("checkpoint error: {0}")]
    Checkpoint(String),

    #[error("io error: {0}")]
    Io(#[from] std::io::Error),
}

impl Error {
    /// Process exit code for the CLI: config=2, data=3, numeric=4, io/checkpoint=5.
    pub fn exit_code(&self) -> i32 {
        match self {
            Error::Config(_) => 2,
            Error::Data(_) => 3,
            Error::Numeric(_) => 4,
            Error::Checkpoint(_) | Error::Io(_) => 5,
        }
    }
}

pub type Result<T> = std::result::Result<T, Error>;

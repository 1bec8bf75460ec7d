//! Crate-wide error type.

use std::path::PathBuf;

/// Errors surfaced by the library. The CLI maps these onto exit codes:
/// config errors -> 2, data/input errors -> 3, training divergence -> 4.
#[derive(Debug, thiserror::Error)]
pub enum Error {
    /// An operation received input that violates its preconditions
    /// (shape mismatch, out-of-range value, unsupported size).
    #[error("invalid input: {0}")]
    InvalidInput(String),

    /// Configuration file or override problem (unknown key, bad type,
    /// failed validation).
    #[error("config error: {0}")]
    Config(String),

    /// Dataset or filesystem content problem (empty directory, filename
    /// mismatch, missing checkpoint).
    #[error("data error: {0}")]
    Data(String),

    /// A checkpoint directory does not contain a loadable state.
    #[error("missing checkpoint at {0}")]
    MissingCheckpoint(PathBuf),

    /// Training produced a non-finite or exploding loss.
    #[error("training diverged: {0}")]
    Divergence(String),

    #[error("io error: {0}")]
    Io(#[from] std::io::Error),

    #[error("image error: {0}")]
    Image(#[from] image::ImageError),
}

pub type Result<T> = std::result::Result<T, Error>;

impl Error {
    /// Process exit code for this error class.
    pub fn exit_code(&self) -> i32 {
        match self {
            Error::Config(_) => 2,
            Error::InvalidInput(_)
            | Error::Data(_)
            | Error::MissingCheckpoint(_)
            | Error::Io(_)
            | Error::Image(_) => 3,
            Error::Divergence(_) => 4,
        }
    }
}

//! Error type shared across the crate.

use std::path::PathBuf;
use thiserror::Error;

/// Crate-wide error enum. Variants distinguish caller mistakes
/// (`InvalidArgument`) from runtime failures so the CLI can map them to
/// distinct exit codes.
#[derive(Debug, Error)]
pub enum Error {
    /// A precondition on an argument was violated (bad shape, out-of-range
    /// value, inconsistent configuration).
    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    /// A numeric invariant broke at runtime (non-finite value, failed
    /// convergence). `context` names the tensor or step involved.
    #[error("numeric failure in {context}: {detail}")]
    Numeric { context: String, detail: String },

    /// An operation that requires points received an empty cloud.
    #[error("empty point cloud in {0}")]
    EmptyCloud(String),

    /// Filesystem failure, tagged with the path involved.
    #[error("i/o error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    /// A file had valid I/O but invalid contents.
    #[error("parse error in {path} at {location}: {detail}")]
    Parse {
        path: PathBuf,
        location: String,
        detail: String,
    },

    /// Checkpoint or dataset archive with a wrong magic, version, or layout.
    #[error("format error: {0}")]
    Format(String),
}

impl Error {
    /// Shorthand for an invalid-argument error.
    pub fn invalid(msg: impl Into<String>) -> Self {
        Error::InvalidArgument(msg.into())
    }

    /// Shorthand for a numeric error with a named context.
    pub fn numeric(context: impl Into<String>, detail: impl Into<String>) -> Self {
        Error::Numeric {
            context: context.into(),
            detail: detail.into(),
        }
    }

    /// Wraps an `io::Error` with the path it occurred on.
    pub fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }
}

pub type Result<T> = std::result::Result<T, Error>;

//! Crate-wide error type.

use std::path::PathBuf;

/// Errors produced anywhere in the toolkit.
#[derive(Debug, thiserror::Error)]
pub enum Error {
    /// Malformed input file (bad header, bad magic, truncated payload).
    #[error("format error in {path}: {reason}")]
    Format { path: PathBuf, reason: String },
    /// File uses a codec or version this crate does not handle.
    #[error("unsupported {what}: {detail}")]
    Unsupported { what: String, detail: String },
    /// An argument violated an operation's preconditions.
    #[error("domain error: {0}")]
    Domain(String),
    /// An iterative numerical routine failed to converge or produced
    /// non-finite values.
    #[error("numerical error: {0}")]
    Numerical(String),
    /// Training hit the instability detector or produced non-finite state.
    #[error("training error: {0}")]
    Training(String),
    /// An operation was called before its required state existed.
    #[error("state error: {0}")]
    State(String),
    /// The latent search lost every candidate to non-finite objectives.
    #[error("projection failure: {0}")]
    ProjectionFailure(String),
    /// Checkpoint or cache file is structurally damaged.
    #[error("corruption in {path} at byte {offset}: {reason}")]
    Corruption {
        path: PathBuf,
        offset: u64,
        reason: String,
    },
    #[error("config error: {0}")]
    Config(String),
    #[error("I/O error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
}

impl Error {
    pub fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    pub fn format(path: impl Into<PathBuf>, reason: impl Into<String>) -> Self {
        Error::Format {
            path: path.into(),
            reason: reason.into(),
        }
    }
}

pub type Result<T> = std::result::Result<T, Error>;

//! Error type shared across the crate.
//!
//! Variants are grouped by how a caller should react: usage errors mean the
//! request itself was malformed, data errors mean an input file was bad, and
//! invariant errors mean an internal contract was violated (these abort the
//! operation rather than producing a silently wrong artifact).

use std::path::{Path, PathBuf};

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, thiserror::Error)]
pub enum Error {
    /// I/O failure, tagged with the path being touched.
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    /// A file exists but its contents do not parse. `line` is 1-based and 0
    /// when no line number applies (e.g. binary artifacts).
    #[error("{path}:{line}: {message}")]
    Format {
        path: PathBuf,
        line: usize,
        message: String,
    },

    /// The caller asked for something nonsensical (bad k, unknown metric,
    /// token id out of range, ...).
    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    /// A persisted artifact is structurally valid but cannot be used here:
    /// wrong format version or built against a different vocabulary.
    #[error("incompatible artifact: {0}")]
    Incompatible(String),

    /// A runtime invariant was violated (non-finite numbers, inconsistent
    /// run files, ...). Nothing is written when this fires.
    #[error("invariant violated: {0}")]
    Invariant(String),
}

impl Error {
    pub fn io(path: impl AsRef<Path>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.as_ref().to_path_buf(),
            source,
        }
    }

    pub fn format(path: impl AsRef<Path>, line: usize, message: impl Into<String>) -> Self {
        Error::Format {
            path: path.as_ref().to_path_buf(),
            line,
            message: message.into(),
        }
    }
}

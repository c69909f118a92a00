//! Crate-wide error type.

use thiserror::Error;

/// Errors surfaced by the library. `Config` maps to CLI exit code 2,
/// everything else to exit code 1.
#[derive(Debug, Error)]
pub enum Error {
    /// Bad configuration: unknown keys, unparsable values, impossible settings.
    #[error("configuration error: {0}")]
    Config(String),

    /// A value outside its documented domain (lattice level, label, shape).
    #[error("domain error: {0}")]
    Domain(String),

    /// A malformed binary file (dataset or checkpoint).
    #[error("format error in {path} at offset {offset}: {detail}")]
    Format {
        path: String,
        offset: u64,
        detail: String,
    },

    /// Training stopped because an invariant broke mid-run.
    #[error("training aborted at batch {batch_index}: {detail}")]
    Training { batch_index: u64, detail: String },

    /// An I/O failure, annotated with the path involved.
    #[error("io error on {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
}

impl Error {
    /// Attach a path to a raw I/O error.
    pub fn io(path: impl AsRef<std::path::Path>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.as_ref().display().to_string(),
            source,
        }
    }
}

pub type Result<T> = std::result::Result<T, Error>;

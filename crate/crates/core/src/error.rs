use std::path::PathBuf;

use thiserror::Error;

/// Errors produced by the quantization, training and I/O pipeline.
#[derive(Debug, Error)]
pub enum Error {
    #[error("dimension error: {0}")]
    Dimension(String),

    #[error("contract violation: {0}")]
    Contract(String),

    #[error("invalid configuration: {0}")]
    Config(String),

    #[error("value out of domain: {0}")]
    Domain(String),

    #[error("lookup failed: {0}")]
    Lookup(String),

    #[error("corrupt data at byte {offset}: {msg}")]
    Corruption { offset: u64, msg: String },

    #[error("unsupported format version {found} (this build reads version {expected}); re-export the file with a matching build")]
    Migration { found: u16, expected: u16 },

    #[error("incompatible scale pack: {0}")]
    Incompatible(String),

    #[error("numerical failure: {0}")]
    Numeric(String),

    #[error("correctness check failed: {0}")]
    Correctness(String),

    #[error("i/o error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error(transparent)]
    Json(#[from] serde_json::Error),

    #[error(transparent)]
    Csv(#[from] csv::Error),
}

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    pub(crate) fn corrupt(offset: u64, msg: impl Into<String>) -> Self {
        Error::Corruption {
            offset,
            msg: msg.into(),
        }
    }

    /// True for errors caused by bad input data rather than bad usage.
    pub fn is_data_error(&self) -> bool {
        matches!(
            self,
            Error::Corruption { .. }
                | Error::Migration { .. }
                | Error::Incompatible(_)
                | Error::Io { .. }
                | Error::Json(_)
                | Error::Csv(_)
                | Error::Numeric(_)
                | Error::Correctness(_)
        )
    }
}

pub type Result<T, E = Error> = std::result::Result<T, E>;

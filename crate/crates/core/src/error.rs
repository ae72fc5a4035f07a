use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    /// Operand shapes do not conform.
    #[error("dimension mismatch in {op}: {left:?} vs {right:?}")]
    Dimension {
        op: &'static str,
        left: Vec<usize>,
        right: Vec<usize>,
    },

    /// A caller violated an operation's precondition.
    #[error("contract violation: {0}")]
    Contract(String),

    /// User-supplied input (files, config, names) failed validation.
    #[error("validation failed: {0}")]
    Validation(String),

    /// A numerical quantity blew up or became non-finite.
    #[error("numerical abort: {0}")]
    Numerical(String),

    /// Regenerated Brownian increments did not match the forward pass.
    #[error("noise replay mismatch in segment {segment}: expected checksum {expected:016x}, got {actual:016x}")]
    ReplayMismatch {
        segment: usize,
        expected: u64,
        actual: u64,
    },

    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("json: {0}")]
    Json(#[from] serde_json::Error),

    #[error("csv: {0}")]
    Csv(#[from] csv::Error),
}

impl Error {
    pub(crate) fn contract(msg: impl Into<String>) -> Self {
        Error::Contract(msg.into())
    }

    pub(crate) fn validation(msg: impl Into<String>) -> Self {
        Error::Validation(msg.into())
    }

    pub(crate) fn numerical(msg: impl Into<String>) -> Self {
        Error::Numerical(msg.into())
    }

    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    /// Process exit code: 2 for validation failures, 3 for numerical aborts, 1 otherwise.
    pub fn exit_code(&self) -> i32 {
        match self {
            Error::Validation(_) | Error::Csv(_) | Error::Json(_) => 2,
            Error::Numerical(_) | Error::ReplayMismatch { .. } => 3,
            _ => 1,
        }
    }
}

use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = CcpeError> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum CcpeError {
    #[error("dimension error: {0}")]
    Dimension(String),

    #[error("configuration error: {0}")]
    Config(String),

    #[error("domain error: {0}")]
    Domain(String),

    #[error("contract violation: {0}")]
    Contract(String),

    #[error("numerical failure: {0}")]
    Numerical(String),

    #[error("parse error at line {line}: {message}")]
    Parse { line: usize, message: String },

    #[error("internal error: {0}")]
    Internal(String),

    #[error("i/o error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
}

impl CcpeError {
    pub fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        CcpeError::Io {
            path: path.into(),
            source,
        }
    }

    /// Process exit code: 2 for numerical failures, 1 for everything else.
    pub fn exit_code(&self) -> i32 {
        match self {
            CcpeError::Numerical(_) => 2,
            _ => 1,
        }
    }
}

pub(crate) fn dim_err<T>(msg: impl Into<String>) -> Result<T> {
    Err(CcpeError::Dimension(msg.into()))
}

use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = GrfError> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum GrfError {
    #[error("cannot read {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("{path}:{line}: {message}")]
    Parse {
        path: PathBuf,
        line: usize,
        message: String,
    },

    #[error("invalid input: {0}")]
    Invalid(String),

    #[error("dimension mismatch: {0}")]
    Dimension(String),

    #[error("matrix is not positive definite: {0}")]
    NotPositiveDefinite(String),

    #[error("numerical failure: {0}")]
    Numerical(String),

    #[error("csv: {0}")]
    Csv(#[from] csv::Error),
}

impl GrfError {
    pub(crate) fn invalid(msg: impl Into<String>) -> Self {
        GrfError::Invalid(msg.into())
    }

    pub(crate) fn dim(msg: impl Into<String>) -> Self {
        GrfError::Dimension(msg.into())
    }

    /// True for failures of the numerical core rather than of the inputs.
    pub fn is_numerical(&self) -> bool {
        matches!(
            self,
            GrfError::NotPositiveDefinite(_) | GrfError::Numerical(_)
        )
    }

    pub fn is_io(&self) -> bool {
        matches!(self, GrfError::Io { .. })
    }
}

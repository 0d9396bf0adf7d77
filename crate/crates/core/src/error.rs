use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = MccError> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum MccError {
    #[error("configuration error: {0}")]
    Config(String),

    #[error("parse error at {path}:{line}: {message}")]
    Parse {
        path: PathBuf,
        line: usize,
        message: String,
    },

    #[error("shape error for sample `{sample_id}`: {message}")]
    SampleShape { sample_id: String, message: String },

    #[error("shape error: {0}")]
    Shape(String),

    #[error("data error: {0}")]
    Data(String),

    #[error("numerical failure: {0}")]
    Numerical(String),

    #[error("i/o error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
}

impl MccError {
    /// Process exit code used by the command line tool.
    pub fn exit_code(&self) -> i32 {
        match self {
            MccError::Config(_) => 2,
            MccError::Numerical(_) => 4,
            _ => 3,
        }
    }

    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        MccError::Io {
            path: path.into(),
            source,
        }
    }

    pub(crate) fn config(msg: impl Into<String>) -> Self {
        MccError::Config(msg.into())
    }

    pub(crate) fn shape(msg: impl Into<String>) -> Self {
        MccError::Shape(msg.into())
    }
}

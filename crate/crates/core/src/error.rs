use std::path::PathBuf;

use thiserror::Error;

pub type Result<T> = std::result::Result<T, CtdError>;

#[derive(Debug, Error)]
pub enum CtdError {
    #[error("shape error: {0}")]
    Shape(String),

    #[error("config error: {0}")]
    Config(String),

    #[error("usage error: {0}")]
    Usage(String),

    #[error("validation error: {0}")]
    Validation(String),

    #[error("numerical error: {0}")]
    Numerical(String),

    #[error("generation error: {0}")]
    Generation(String),

    #[error("forward pass not supported for structural backbone `{0}`")]
    UnsupportedForward(String),

    #[error("io error at {path}: {message}")]
    Io { path: PathBuf, message: String },
}

impl CtdError {
    pub fn io(path: impl Into<PathBuf>, err: impl std::fmt::Display) -> Self {
        CtdError::Io {
            path: path.into(),
            message: err.to_string(),
        }
    }

    /// Process exit code for the command-line front end.
    pub fn exit_code(&self) -> i32 {
        match self {
            CtdError::Io { .. } => 2,
            CtdError::Numerical(_) => 3,
            _ => 1,
        }
    }
}

macro_rules! shape_err {
    ($($arg:tt)*) => {
        $crate::error::CtdError::Shape(format!($($arg)*))
    };
}
pub(crate) use shape_err;

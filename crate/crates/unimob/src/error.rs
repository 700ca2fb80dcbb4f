//! Error classes with stable exit codes, documented in `--help`.

use thiserror::Error;

#[derive(Debug, Error)]
pub enum AppError {
    #[error("{0}")]
    Config(String),
    #[error("{0}")]
    Data(String),
    #[error("{0}")]
    Io(#[from] std::io::Error),
    #[error("{0}")]
    Numeric(String),
}

impl AppError {
    pub fn config(msg: impl Into<String>) -> Self {
        AppError::Config(msg.into())
    }

    pub fn data(msg: impl Into<String>) -> Self {
        AppError::Data(msg.into())
    }

    pub fn numeric(msg: impl Into<String>) -> Self {
        AppError::Numeric(msg.into())
    }

    /// One-word error class printed on stderr.
    pub fn class(&self) -> &'static str {
        match self {
            AppError::Config(_) => "ConfigError",
            AppError::Data(_) => "DataError",
            AppError::Io(_) => "IoError",
            AppError::Numeric(_) => "NumericError",
        }
    }

    /// Process exit code (clap usage errors exit with 2).
    pub fn exit_code(&self) -> i32 {
        match self {
            AppError::Config(_) => 3,
            AppError::Data(_) => 4,
            AppError::Io(_) => 5,
            AppError::Numeric(_) => 6,
        }
    }
}

pub type Result<T> = std::result::Result<T, AppError>;

impl From<serde_json::Error> for AppError {
    fn from(e: serde_json::Error) -> Self {
        AppError::Data(format!("json: {e}"))
    }
}

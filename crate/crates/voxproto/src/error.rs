//! Crate-wide error type.
//!
//! Every fallible public operation returns [`Result`]. Variants are grouped by
//! failure class so the CLI can map them onto exit codes: validation problems
//! (dimensions, parameters, configuration, generation) exit with 1, while I/O
//! and file-format problems exit with 2.

use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    /// Tensor or grid extents do not line up.
    #[error("dimension mismatch: {0}")]
    Dimension(String),

    /// A scalar argument is outside its documented domain.
    #[error("invalid parameter: {0}")]
    Parameter(String),

    /// Inputs are structurally valid but semantically unusable
    /// (e.g. non-finite values where finite ones are required).
    #[error("invalid data: {0}")]
    Data(String),

    /// An experiment configuration field is inconsistent.
    #[error("invalid config: field `{field}`: {message}")]
    Config { field: String, message: String },

    /// Procedural generation could not satisfy its constraints.
    #[error("generation failed: {0}")]
    Generation(String),

    /// A binary artifact does not follow its file format.
    #[error("format error: {0}")]
    Format(String),

    #[error("i/o error: {0}")]
    Io(#[from] std::io::Error),

    #[error("json error: {0}")]
    Json(#[from] serde_json::Error),
}

pub type Result<T> = std::result::Result<T, Error>;

impl Error {
    /// Shorthand constructors keep call sites terse.
    pub fn dim(msg: impl Into<String>) -> Self {
        Error::Dimension(msg.into())
    }
    pub fn param(msg: impl Into<String>) -> Self {
        Error::Parameter(msg.into())
    }
    pub fn data(msg: impl Into<String>) -> Self {
        Error::Data(msg.into())
    }
    pub fn config(field: impl Into<String>, msg: impl Into<String>) -> Self {
        Error::Config { field: field.into(), message: msg.into() }
    }
    pub fn generation(msg: impl Into<String>) -> Self {
        Error::Generation(msg.into())
    }
    pub fn format(msg: impl Into<String>) -> Self {
        Error::Format(msg.into())
    }

    /// Process exit code for the CLI: 1 for validation failures, 2 for I/O
    /// and format failures.
    pub fn exit_code(&self) -> i32 {
        match self {
            Error::Io(_) | Error::Format(_) | Error::Json(_) => 2,
            _ => 1,
        }
    }
}

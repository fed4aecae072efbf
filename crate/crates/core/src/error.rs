//! Crate-wide error type and exit-code mapping for the CLI.

use thiserror::Error;

/// All failure modes surfaced by this crate.
#[derive(Debug, Error)]
pub enum Error {
    /// Matrix/vector dimensions do not line up for an operation.
    #[error("shape mismatch in {op}: {left_rows}x{left_cols} vs {right_rows}x{right_cols}")]
    Shape {
        op: &'static str,
        left_rows: usize,
        left_cols: usize,
        right_rows: usize,
        right_cols: usize,
    },
    /// A caller-supplied argument is out of range or inconsistent.
    #[error("invalid argument: {0}")]
    Argument(String),
    /// A configuration file or derived configuration is invalid.
    #[error("invalid configuration: {0}")]
    Config(String),
    /// Input data is unusable (empty, non-finite, unaligned samples, ...).
    #[error("data error: {0}")]
    Data(String),
    /// A delimited input file failed to parse; positions are 1-based file
    /// coordinates (row counts physical lines including the header).
    #[error("parse error in {path} at row {row}, column {col}: {message}")]
    Parse {
        path: String,
        row: usize,
        col: usize,
        message: String,
    },
    /// Numerics went off the rails (non-finite loss, singular system, ...).
    #[error("numeric failure: {0}")]
    Numeric(String),
    #[error("i/o error: {0}")]
    Io(#[from] std::io::Error),
    #[error("serialization error: {0}")]
    Json(#[from] serde_json::Error),
}

impl Error {
    /// Process exit code contract: 2 config/usage, 3 data, 4 numeric.
    pub fn exit_code(&self) -> i32 {
        match self {
            Error::Config(_) | Error::Argument(_) => 2,
            Error::Data(_) | Error::Parse { .. } | Error::Io(_) | Error::Json(_) => 3,
            Error::Shape { .. } | Error::Numeric(_) => 4,
        }
    }
}

pub type Result<T> = std::result::Result<T, Error>;

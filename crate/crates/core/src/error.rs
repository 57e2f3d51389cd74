//! Error types shared across the crate.

use std::path::PathBuf;

use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    #[error("i/o error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("cannot decode {path}: {reason}")]
    Format { path: PathBuf, reason: String },
    #[error("shape mismatch: {0}")]
    Shape(String),
    #[error("insufficient data: {0}")]
    InsufficientData(String),
    #[error("degenerate input: {0}")]
    DegenerateInput(String),
    #[error("domain error: {0}")]
    Domain(String),
    #[error("numerical degeneracy: {0}")]
    NumericalDegeneracy(String),
    #[error("fit failed: {0}")]
    Fit(String),
    #[error("invalid data: {0}")]
    Data(String),
    #[error(
        "target detection probability {requested} exceeds the achievable bound {bound} \
         at contamination {contamination}"
    )]
    BoundViolation {
        requested: f64,
        bound: f64,
        contamination: f64,
    },
    #[error("invalid plan: {0}")]
    InvalidPlan(String),
    #[error("invalid argument: {0}")]
    InvalidArgument(String),
}

pub type Result<T> = std::result::Result<T, Error>;

impl Error {
    /// Process exit code for the CLI: 2 is reserved for usage errors
    /// (raised by the argument parser), 0 for success.
    pub fn exit_code(&self) -> i32 {
        match self {
            Error::InsufficientData(_) => 3,
            Error::BoundViolation { .. } => 4,
            Error::Io { .. } | Error::Format { .. } => 5,
            _ => 1,
        }
    }

    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }
}

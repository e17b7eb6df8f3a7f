//! Error taxonomy shared by every module.
//!
//! The CLI maps variants onto its exit-code contract: config errors exit 2,
//! I/O and file-integrity errors exit 3, numerical failures exit 4.

use thiserror::Error;

#[derive(Error, Debug)]
pub enum Error {
    /// Shape/dimension violation. Names the operation and the offending axis.
    #[error("dimension error in {op}: {detail}")]
    Dim { op: &'static str, detail: String },

    /// Invalid configuration (geometry, dataset, cascade, training).
    #[error("configuration error: {0}")]
    Config(String),

    /// A caller violated an operation's precondition.
    #[error("contract violation: {0}")]
    Contract(String),

    /// Missing/corrupt files, bad magic bytes, manifest inconsistencies.
    #[error("file integrity error: {0}")]
    Integrity(String),

    /// Metric undefined for the given inputs (e.g. all-zero reference).
    #[error("undefined metric: {0}")]
    Metric(String),

    /// NaN/Inf encountered where finite values are required.
    #[error("numerical failure: {0}")]
    Numerical(String),

    #[error("i/o error: {0}")]
    Io(#[from] std::io::Error),
}

pub type Result<T> = std::result::Result<T, Error>;

impl Error {
    pub fn dim(op: &'static str, detail: impl Into<String>) -> Self {
        Error::Dim { op, detail: detail.into() }
    }

    /// Exit code for the CLI: 2 config, 3 i/o, 4 numerical, 1 anything else.
    pub fn exit_code(&self) -> i32 {
        match self {
            Error::Config(_) => 2,
            Error::Io(_) | Error::Integrity(_) => 3,
            Error::Numerical(_) => 4,
            _ => 1,
        }
    }
}

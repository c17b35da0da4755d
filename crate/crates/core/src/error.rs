use std::path::PathBuf;

use thiserror::Error;

use crate::ecm::EcmParams;

/// Coarse classification used to pick a process exit status.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ErrorKind {
    /// Bad configuration or arguments.
    Usage,
    /// Missing, malformed or inconsistent input data.
    Data,
    /// Numerical failure: degenerate fits, non-finite losses.
    Numeric,
}

#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid input: {0}")]
    Input(String),
    #[error("domain error: {0}")]
    Domain(String),
    #[error("invalid configuration: {0}")]
    Config(String),
    #[error("insufficient data: need at least {needed} samples, got {got}")]
    InsufficientData { needed: usize, got: usize },
    #[error("degenerate fit after {iterations} iterations: Jacobian singular at {last:?}")]
    DegenerateFit { last: EcmParams, iterations: usize },
    #[error("{}:{line}: column `{column}`: {message}", file.display())]
    Parse { file: PathBuf, line: u64, column: String, message: String },
    #[error("duplicate cycle {cycle} for cell {cell}")]
    DuplicateCycle { cell: String, cycle: u32 },
    #[error("non-finite training loss at epoch {epoch}, batch {batch}: {detail}")]
    NonFiniteLoss { epoch: usize, batch: usize, detail: String },
    #[error("checkpoint: {0}")]
    Checkpoint(String),
    #[error("stream: {0}")]
    Stream(String),
    #[error("{}: {source}", path.display())]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error(transparent)]
    Json(#[from] serde_json::Error),
    #[error(transparent)]
    Nn(#[from] pace_nn::NnError),
}

impl Error {
    pub fn kind(&self) -> ErrorKind {
        match self {
            Error::Config(_) => ErrorKind::Usage,
            Error::DegenerateFit { .. } | Error::NonFiniteLoss { .. } | Error::Nn(_) | Error::Domain(_) => {
                ErrorKind::Numeric
            }
            _ => ErrorKind::Data,
        }
    }

    pub fn io(path: impl Into<PathBuf>) -> impl FnOnce(std::io::Error) -> Error {
        let path = path.into();
        move |source| Error::Io { path, source }
    }
}

pub type Result<T> = std::result::Result<T, Error>;

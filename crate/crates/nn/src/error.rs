use thiserror::Error;

/// Errors raised by tensor construction, graph operations and backward.
#[derive(Debug, Error, Clone, PartialEq)]
pub enum NnError {
    #[error("{op}: shape mismatch, expected {expected}, got {got}")]
    ShapeMismatch { op: &'static str, expected: String, got: String },
    #[error("{op}: invalid argument: {reason}")]
    InvalidArgument { op: &'static str, reason: String },
    #[error("weight_norm: direction for output channel {channel} has zero norm")]
    ZeroNorm { channel: usize },
    #[error("backward called on a graph that was already consumed")]
    GraphConsumed,
    #[error("backward requires a scalar loss, got shape {0:?}")]
    NotScalar(Vec<usize>),
    #[error("{op}: non-finite value produced")]
    NonFinite { op: &'static str },
}

pub type Result<T> = std::result::Result<T, NnError>;

pub(crate) fn shape_err<T>(op: &'static str, expected: impl std::fmt::Debug, got: impl std::fmt::Debug) -> Result<T> {
    Err(NnError::ShapeMismatch { op, expected: format!("{expected:?}"), got: format!("{got:?}") })
}

pub(crate) fn invalid<T>(op: &'static str, reason: impl Into<String>) -> Result<T> {
    Err(NnError::InvalidArgument { op, reason: reason.into() })
}

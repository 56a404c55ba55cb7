use thiserror::Error;

use crate::tensor::Dims;

/// Shape and argument errors raised by tensor primitives.
#[derive(Debug, Clone, PartialEq, Error)]
pub enum TensorError {
    #[error("dimension mismatch in {op}: {detail}")]
    DimensionMismatch { op: &'static str, detail: String },
    #[error("{op}: expected {expected:?}, got {actual:?}")]
    ShapeMismatch {
        op: &'static str,
        expected: Dims,
        actual: Dims,
    },
    #[error("{op}: spatial extent {h}x{w} must be even")]
    OddExtent { op: &'static str, h: usize, w: usize },
    #[error("invalid argument to {op}: {detail}")]
    InvalidArgument { op: &'static str, detail: String },
    #[error("backward already ran on this graph")]
    GraphConsumed,
    #[error("backward root must be a scalar, got {0:?}")]
    NonScalarRoot(Dims),
}

pub type Result<T, E = TensorError> = std::result::Result<T, E>;

pub(crate) fn mismatch(op: &'static str, detail: impl Into<String>) -> TensorError {
    TensorError::DimensionMismatch {
        op,
        detail: detail.into(),
    }
}

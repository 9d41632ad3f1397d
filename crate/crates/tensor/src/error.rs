use thiserror::Error;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum TensorError {
    #[error("{op}: shape mismatch ({detail})")]
    ShapeMismatch { op: &'static str, detail: String },
    #[error("{op}: non-finite value produced")]
    NonFinite { op: &'static str },
    #[error("{op}: invalid attribute ({detail})")]
    InvalidAttribute { op: &'static str, detail: String },
    #[error("gradient reversal requires lambda >= 0, got {0}")]
    NegativeLambda(f64),
    #[error("backward needs a scalar loss, got shape {0:?}")]
    NotScalar(Vec<usize>),
    #[error("loss is detached from any differentiable graph")]
    Detached,
    #[error("graph was consumed by a previous backward pass")]
    GraphConsumed,
    #[error("non-finite gradient in parameter #{index}")]
    NonFiniteGradient { index: usize },
    #[error("max_norm must be positive and finite, got {0}")]
    InvalidMaxNorm(f64),
}

pub type Result<T, E = TensorError> = std::result::Result<T, E>;

pub(crate) fn shape_err(op: &'static str, detail: impl Into<String>) -> TensorError {
    TensorError::ShapeMismatch {
        op,
        detail: detail.into(),
    }
}

//! Crate-wide error type.

use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    #[error("{op}: shape mismatch: {detail}")]
    ShapeMismatch { op: &'static str, detail: String },

    #[error("{op}: invalid attribute: {detail}")]
    InvalidAttribute { op: &'static str, detail: String },

    #[error("non-finite values in {context}")]
    NonFinite { context: String },

    #[error("tensor id {id} is not on this tape")]
    NotOnTape { id: usize },

    #[error("backward requires a scalar loss, got {numel} elements")]
    NonScalarLoss { numel: usize },

    #[error("invalid config: {0}")]
    Config(String),

    #[error("zero standard deviation for modality {modality}")]
    ZeroStd { modality: &'static str },

    #[error("rows are not unit-norm: max deviation {max_deviation:.3e}")]
    NotNormalized { max_deviation: f64 },

    #[error("{path}: format error at byte {offset}: {detail}")]
    Format {
        path: String,
        offset: u64,
        detail: String,
    },

    #[error("class {class} has {count} members, fewer than k = {k}")]
    ClassTooSmall {
        class: String,
        count: usize,
        k: usize,
    },

    #[error("checkpoint tensor {name}: {detail}")]
    TensorMismatch { name: String, detail: String },

    #[error("non-finite gradient for parameter {param}")]
    NonFiniteGradient { param: String },

    #[error("io error: {0}")]
    Io(#[from] std::io::Error),
}

pub type Result<T> = std::result::Result<T, Error>;

impl Error {
    pub(crate) fn shape(op: &'static str, detail: impl Into<String>) -> Self {
        Error::ShapeMismatch {
            op,
            detail: detail.into(),
        }
    }

    pub(crate) fn attr(op: &'static str, detail: impl Into<String>) -> Self {
        Error::InvalidAttribute {
            op,
            detail: detail.into(),
        }
    }
}

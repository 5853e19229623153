use thiserror::Error;

/// Errors raised by tensor arithmetic, layers and the compression operators.
#[derive(Debug, Clone, PartialEq, Error)]
pub enum Error {
    #[error("empty input")]
    EmptyInput,

    #[error("shape {shape:?} holds {expected} elements but {actual} values were given")]
    ShapeDataMismatch {
        shape: Vec<usize>,
        expected: usize,
        actual: usize,
    },

    #[error("non-finite value {value} at flat index {index}")]
    NonFinite { index: usize, value: f64 },

    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("{context}: expected shape {expected:?}, got {actual:?}")]
    ShapeMismatch {
        context: String,
        expected: Vec<usize>,
        actual: Vec<usize>,
    },

    #[error("feature shape varies; use channelwise mode (expected {expected:?}, got {actual:?})")]
    VaryingFeatureShape {
        expected: Vec<usize>,
        actual: Vec<usize>,
    },

    #[error("class index {index} out of range for {classes} classes")]
    ClassOutOfRange { index: usize, classes: usize },

    #[error("non-finite loss at step {step} (first non-finite output at layer {layer})")]
    NonFiniteLoss { step: u64, layer: usize },

    #[error("invalid configuration: {0}")]
    Config(String),
}

pub type Result<T> = std::result::Result<T, Error>;

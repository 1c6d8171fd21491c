use alloc::string::String;
use alloc::vec::Vec;

pub type Result<T, E = Error> = core::result::Result<T, E>;

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum Error {
    #[error("invalid shape {shape:?}: {reason}")]
    InvalidShape { shape: Vec<usize>, reason: &'static str },
    #[error("{op}: shape mismatch, expected {expected:?}, got {actual:?}")]
    ShapeMismatch {
        op: &'static str,
        expected: Vec<usize>,
        actual: Vec<usize>,
    },
    #[error("non-finite value at flat index {index}")]
    NonFinite { index: usize },
    #[error("invalid argument: {0}")]
    InvalidArgument(String),
    #[error("{layer}: running statistics are not initialized")]
    UninitializedRunningStats { layer: String },
    #[error("label {label} out of range for {classes} classes")]
    LabelOutOfRange { label: usize, classes: usize },
    #[error("unknown tap {name:?}; valid taps: {valid}")]
    UnknownTap { name: String, valid: String },
    #[error("{param}: parameter shape mismatch, expected {expected:?}, got {actual:?}")]
    ParamMismatch {
        param: String,
        expected: Vec<usize>,
        actual: Vec<usize>,
    },
    #[error("missing parameter {0}")]
    MissingParam(String),
    #[error("non-finite gradient for {param}")]
    NonFiniteGradient { param: String },
    #[error("non-finite loss at epoch {epoch}, batch {batch}")]
    NonFiniteLoss { epoch: usize, batch: usize },
    #[error("correlation undefined: {0} vector is constant")]
    ConstantVector(&'static str),
    #[error("stimulus {index} has a constant activation pattern")]
    ConstantRow { index: usize },
    #[error("{context}: degenerate (constant) dissimilarity triangle")]
    DegenerateTriangle { context: String },
    #[error("invalid RDM: {0}")]
    InvalidRdm(String),
    #[error("missing score for layer {layer}")]
    MissingScore { layer: String },
    #[error("checkpoint sink failed: {0}")]
    Sink(String),
}

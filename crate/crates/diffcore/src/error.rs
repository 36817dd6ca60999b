use thiserror::Error;

pub type Result<T, E = DiffError> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum DiffError {
    #[error("shape mismatch at node {node}: {detail}")]
    Shape { node: String, detail: String },

    #[error("non-finite value produced by node {node}")]
    NonFinite { node: String },

    #[error("zero-norm row {row} at node {node}")]
    ZeroNorm { node: String, row: usize },

    #[error("input `{0}` is not bound")]
    MissingInput(String),

    #[error("no node named `{0}`")]
    UnknownNode(String),

    #[error("loss node {node} is not scalar (shape {shape:?})")]
    NotScalar { node: String, shape: Vec<usize> },

    #[error("backward called before a training-mode forward pass reached node {0}")]
    BackwardBeforeForward(String),

    #[error("non-finite gradient in parameter `{0}`")]
    NonFiniteGradient(String),

    #[error("parameter mismatch: {0}")]
    ParamMismatch(String),

    #[error("step {step} outside [0, {total}]")]
    StepOutOfRange { step: usize, total: usize },

    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("checkpoint format error at byte {offset}: {detail}")]
    Format { offset: u64, detail: String },

    #[error(transparent)]
    Io(#[from] std::io::Error),
}

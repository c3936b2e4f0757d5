use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    #[error("{op}: shape mismatch between {left:?} and {right:?}")]
    ShapeMismatch {
        op: &'static str,
        left: Vec<usize>,
        right: Vec<usize>,
    },

    #[error("invalid tensor: {0}")]
    InvalidTensor(String),

    #[error("l2_normalize: row {row} has zero norm")]
    ZeroNormRow { row: usize },

    #[error("grad: output must be a scalar, got shape {0:?}")]
    NonScalarOutput(Vec<usize>),

    #[error("grad: node {0} is not a graph leaf")]
    NotALeaf(usize),

    #[error(
        "gradient penalty needs input-gradient tracking: register the interpolated input with `Graph::leaf` instead of `Graph::constant`"
    )]
    InputGradientDisabled,

    #[error("{what}: expected unit-norm rows, row {row} has norm {norm}")]
    NotUnitNorm {
        what: &'static str,
        row: usize,
        norm: f64,
    },

    #[error("label {label} out of range for {classes} classes")]
    LabelOutOfRange { label: usize, classes: usize },

    #[error("age {0} is negative")]
    NegativeAge(f64),

    #[error("{what}: value {value} outside the open interval (0, 1)")]
    ProbabilityOutOfRange { what: &'static str, value: f64 },

    #[error("{0}: empty batch")]
    EmptyBatch(&'static str),

    #[error("invalid config: {0}")]
    Config(String),

    #[error("infeasible folds: {0}")]
    InfeasibleFolds(String),

    #[error("non-finite value in `{tensor}` at step {step}")]
    NonFinite { tensor: String, step: usize },

    #[error("non-finite value in `{0}`")]
    NonFiniteValue(String),

    #[error("unknown parameter `{0}`")]
    UnknownParam(String),

    #[error("format error: {0}")]
    Format(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

pub type Result<T> = std::result::Result<T, Error>;

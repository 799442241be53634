use std::path::PathBuf;

use thiserror::Error;

pub type Result<T> = std::result::Result<T, KoalaError>;

#[derive(Debug, Error)]
pub enum KoalaError {
    #[error("{op}: shape mismatch between {left:?} and {right:?}")]
    ShapeMismatch {
        op: &'static str,
        left: Vec<usize>,
        right: Vec<usize>,
    },
    #[error("invalid shape {shape:?} for {len} elements")]
    InvalidShape { shape: Vec<usize>, len: usize },
    #[error("{op}: invalid temperature {value}, must be positive")]
    InvalidTemperature { op: &'static str, value: f64 },
    #[error("{op}: non-finite value in input")]
    NonFiniteInput { op: &'static str },
    #[error("{op}: {reason}")]
    InvalidProbabilities { op: &'static str, reason: String },
    #[error("label {label} out of range for {classes} classes")]
    LabelOutOfRange { label: usize, classes: usize },
    #[error("backward requires a scalar loss, got shape {0:?}")]
    NonScalarLoss(Vec<usize>),
    #[error("non-finite gradient in parameter {param} at step {step}")]
    NonFiniteGradient { param: usize, step: u64 },
    #[error("non-finite training loss at step {step} of client {client}")]
    NonFiniteLoss { client: usize, step: u64 },
    #[error("invalid model spec: {0}")]
    InvalidSpec(String),
    #[error("class count mismatch: teacher {teacher}, student {student}")]
    ClassMismatch { teacher: usize, student: usize },
    #[error("model spec mismatch: {0}")]
    SpecMismatch(String),
    #[error("invalid argument: {0}")]
    InvalidArgument(String),
    #[error("empty client set")]
    EmptyClientSet,
    #[error("round {round}: missing upload from client {client}")]
    MissingUpload { round: usize, client: usize },
    #[error("no rounds left: round {round} of {total}")]
    RoundsExhausted { round: usize, total: usize },
    #[error("checkpoint: {0}")]
    Checkpoint(String),
    #[error("{path}:{line}: {message}")]
    Csv {
        path: PathBuf,
        line: u64,
        message: String,
    },
    #[error("config key `{key}`: {message}")]
    Config { key: String, message: String },
    #[error("evaluation sets differ: {0}")]
    MismatchedTestSet(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

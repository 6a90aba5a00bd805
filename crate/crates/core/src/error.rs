use crate::autodiff::AutodiffError;

/// Failures of model construction, forward passes and training.
#[derive(Debug, thiserror::Error, PartialEq)]
pub enum ModelError {
    #[error(transparent)]
    Autodiff(#[from] AutodiffError),
    #[error("sequence is empty")]
    EmptySequence,
    #[error("{what}: expected {expected}, got {got}")]
    DimMismatch {
        what: &'static str,
        expected: usize,
        got: usize,
    },
    #[error("token {token} outside vocabulary of size {vocab}")]
    TokenOutOfRange { token: usize, vocab: usize },
    #[error("operation requires a {expected} target model")]
    WrongTargetKind { expected: &'static str },
    #[error("invalid configuration: {0}")]
    InvalidConfig(String),
    #[error("segment {id}: label {label} outside [-3, 3]")]
    LabelOutOfRange { id: String, label: f64 },
    #[error("non-finite loss at epoch {epoch}, sample {sample}: {detail}")]
    NonFiniteLoss {
        epoch: usize,
        sample: usize,
        detail: String,
    },
    #[error("training set is empty")]
    EmptyTrainingSet,
    #[error("training halted after {epochs} epochs in this invocation")]
    Interrupted { epochs: usize },
    #[error("checkpoint: {0}")]
    Checkpoint(String),
}

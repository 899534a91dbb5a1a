use thiserror::Error;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum NnError {
    #[error("shape mismatch in {op}: {left:?} vs {right:?}")]
    ShapeMismatch {
        op: &'static str,
        left: (usize, usize),
        right: (usize, usize),
    },
    #[error("class {class} out of range for {n_classes} classes")]
    ClassOutOfRange { class: usize, n_classes: usize },
    #[error("model dimension {dim} is not divisible by {heads} heads")]
    DimNotDivisible { dim: usize, heads: usize },
    #[error("adam step requested before any gradient was accumulated")]
    UninitializedGrads,
    #[error("model is not deterministic: repeated loss {first} vs {second}")]
    NonDeterministicModel { first: f64, second: f64 },
    #[error("non-finite value produced by {0}")]
    NonFinite(&'static str),
    #[error("unknown parameter {0}")]
    UnknownParam(String),
    #[error("invalid configuration: {0}")]
    InvalidConfig(String),
    #[error("checkpoint error: {0}")]
    Checkpoint(String),
}

pub type Result<T> = std::result::Result<T, NnError>;

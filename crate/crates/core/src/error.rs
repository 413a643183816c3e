use thiserror::Error;

pub type Result<T> = std::result::Result<T, PhaError>;

#[derive(Debug, Error)]
pub enum PhaError {
    #[error("dimension mismatch in {op}: {left:?} vs {right:?}")]
    Dimension {
        op: &'static str,
        left: Vec<usize>,
        right: Vec<usize>,
    },

    #[error("index error: {0}")]
    Index(String),

    #[error("degenerate input: {0}")]
    Degenerate(String),

    #[error("contract violation: {0}")]
    Contract(String),

    #[error("non-deterministic loss function: {0}")]
    Determinism(String),

    #[error("configuration error: {0}")]
    Config(String),

    #[error("tokenization error: {0}")]
    Tokenize(String),

    #[error("numerical abort at step {step}: {detail}")]
    Numerical { step: usize, detail: String },

    #[error("checkpoint error: {0}")]
    Checkpoint(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

impl PhaError {
    pub(crate) fn dim(op: &'static str, left: &[usize], right: &[usize]) -> Self {
        PhaError::Dimension {
            op,
            left: left.to_vec(),
            right: right.to_vec(),
        }
    }
}

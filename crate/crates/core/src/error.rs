use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("dimension mismatch in {op}: {left:?} vs {right:?}")]
    Dimension {
        op: &'static str,
        left: Vec<usize>,
        right: Vec<usize>,
    },

    #[error("invalid parameter: {0}")]
    Parameter(String),

    #[error("degenerate embedding for class {index}: norm below 1e-12")]
    DegenerateEmbedding { index: usize },

    #[error("contract violation: {0}")]
    Contract(String),

    #[error("class {class} has no training instances")]
    Frequency { class: usize },

    #[error("labels must be 0 or 1, found {value} at ({row}, {col})")]
    Label { row: usize, col: usize, value: f64 },

    #[error("configuration error: {0}")]
    Config(String),

    #[error("incompatible checkpoint: {0}")]
    Compatibility(String),

    #[error("non-finite loss at step {step} (batch seed {batch_seed})")]
    NonFiniteLoss { step: usize, batch_seed: u64 },

    #[error("malformed file: {0}")]
    Format(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

impl Error {
    pub(crate) fn dim(op: &'static str, left: &[usize], right: &[usize]) -> Self {
        Error::Dimension {
            op,
            left: left.to_vec(),
            right: right.to_vec(),
        }
    }

    pub(crate) fn param(msg: impl Into<String>) -> Self {
        Error::Parameter(msg.into())
    }
}

use thiserror::Error;

#[derive(Debug, Error)]
pub enum FadeError {
    /// Bad shapes, out-of-range arguments, or malformed requests.
    #[error("input error: {0}")]
    Input(String),

    #[error("vocabulary error: token id {id} is outside the vocabulary of size {vocab}")]
    Vocabulary { id: usize, vocab: usize },

    /// An operation was called in the wrong lifecycle state.
    #[error("state error: {0}")]
    State(String),

    #[error("training error at step {step}: {reason}")]
    Training { step: usize, reason: String },

    #[error("numerical error: {0}")]
    Numerical(String),

    #[error("gate failure: {0}")]
    Gate(String),

    #[error("shape mismatch at layer {layer}: expected {expected:?}, found {found:?}")]
    ShapeMismatch { layer: String, expected: Vec<usize>, found: Vec<usize> },

    #[error("format error: {0}")]
    Format(String),

    #[error("config error: {0}")]
    Config(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),
}

pub type Result<T> = std::result::Result<T, FadeError>;

pub(crate) fn input_err<T>(msg: impl Into<String>) -> Result<T> {
    Err(FadeError::Input(msg.into()))
}

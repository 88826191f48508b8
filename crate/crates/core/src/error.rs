use sedd_tensor::TensorError;

#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error(transparent)]
    Tensor(#[from] TensorError),
    #[error("empty corpus")]
    EmptyCorpus,
    #[error("unknown character {ch:?} at position {position}")]
    UnknownChar { ch: char, position: usize },
    #[error("token id {id} at position {position} out of range for vocabulary of size {size}")]
    TokenOutOfRange {
        id: usize,
        position: usize,
        size: usize,
    },
    #[error("split has {have} tokens, fewer than the window length {need}")]
    ShortSplit { have: usize, need: usize },
    #[error("zero-probability conditioning state")]
    ZeroProbability,
    #[error("state space of {size} sequences exceeds the oracle budget of {budget}")]
    Budget { size: u128, budget: usize },
    #[error("non-generator input: {0}")]
    NotGenerator(String),
    #[error("non-positive score {value} at position {position}, token {token}")]
    NonPositiveScore {
        value: f64,
        position: usize,
        token: usize,
    },
    #[error("training diverged at step {step}: loss {loss}, lr {lr:e}, grad norm {grad_norm}")]
    Diverged {
        step: u64,
        loss: f64,
        lr: f64,
        grad_norm: f64,
    },
    #[error("sequence of length {len} exceeds context length {context}")]
    ContextOverflow { len: usize, context: usize },
    #[error("vocabulary mismatch: {0}")]
    VocabMismatch(String),
    #[error("checkpoint: {0}")]
    Checkpoint(String),
    #[error("config: {0}")]
    Config(String),
    #[error("{0}")]
    Invalid(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

pub type Result<T, E = Error> = std::result::Result<T, E>;

pub(crate) fn invalid<T>(msg: impl Into<String>) -> Result<T> {
    Err(Error::Invalid(msg.into()))
}

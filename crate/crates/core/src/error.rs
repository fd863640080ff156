use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("shape mismatch in {op}: {lhs:?} vs {rhs:?}")]
    Shape {
        op: &'static str,
        lhs: Vec<usize>,
        rhs: Vec<usize>,
    },
    #[error("invalid configuration: {0}")]
    Config(String),
    #[error("softmax row {row} is fully masked")]
    FullyMasked { row: usize },
    #[error("backward already ran on this graph")]
    BackwardTwice,
    #[error("loss must be a scalar, got shape {0:?}")]
    NonScalarLoss(Vec<usize>),
    #[error("token id {id} is outside the vocabulary of size {size}")]
    OutOfVocab { id: u32, size: usize },
    #[error("unknown token {0:?}")]
    UnknownToken(String),
    #[error("sequence of length {len} exceeds the maximum of {max}")]
    Overlength { len: usize, max: usize },
    #[error("empty input: {0}")]
    Empty(&'static str),
    #[error("malformed cache file: {0}")]
    CacheFormat(String),
    #[error("malformed checkpoint: {0}")]
    Checkpoint(String),
    #[error("unknown candidate id {0}")]
    UnknownCandidate(u64),
    #[error("non-finite loss {loss} at step {step}")]
    NonFiniteLoss { step: usize, loss: f64 },
    #[error("invalid argument: {0}")]
    InvalidArgument(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

impl Error {
    pub(crate) fn shape(op: &'static str, lhs: &[usize], rhs: &[usize]) -> Self {
        Error::Shape {
            op,
            lhs: lhs.to_vec(),
            rhs: rhs.to_vec(),
        }
    }
}

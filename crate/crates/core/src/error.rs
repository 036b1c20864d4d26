use thiserror::Error;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum Error {
    #[error("empty logits")]
    EmptyLogits,
    #[error("non-positive sigma")]
    NonPositiveSigma,
    #[error("shape mismatch: {0}")]
    Shape(String),
    #[error("non-finite function value at index {index}")]
    NonFinite { index: usize },
    #[error("unsupported op tag `{0}`")]
    UnsupportedOp(String),
    #[error("unknown input `{0}`")]
    UnknownInput(String),
    #[error("loss must be scalar")]
    NonScalarLoss,
    #[error("learning rate must be positive")]
    BadLearningRate,
    #[error("vanilla attention undefined on empty history")]
    EmptyHistory,
    #[error("degenerate fusion: total precision zero")]
    DegenerateFusion,
    #[error("invalid precision: {0}")]
    InvalidPrecision(String),
    #[error("empty group")]
    EmptyGroup,
    #[error("failed to converge after {iterations} iterations (gradient norm {grad_norm:e})")]
    NoConvergence { iterations: usize, grad_norm: f64 },
    #[error("position {position} beyond table size {size}")]
    PositionOutOfRange { position: usize, size: usize },
    #[error("unknown id {id} in vocabulary `{vocab}` of size {size}")]
    UnknownId {
        vocab: &'static str,
        id: usize,
        size: usize,
    },
    #[error("AUC undefined: {0}")]
    AucUndefined(&'static str),
    #[error("invalid config: {}", .0.join("; "))]
    Config(Vec<String>),
    #[error("format error: {0}")]
    Format(String),
    #[error("digest mismatch: {0}")]
    DigestMismatch(String),
    #[error("io error: {0}")]
    Io(String),
}

impl From<std::io::Error> for Error {
    fn from(e: std::io::Error) -> Self {
        Error::Io(e.to_string())
    }
}

pub type Result<T> = std::result::Result<T, Error>;

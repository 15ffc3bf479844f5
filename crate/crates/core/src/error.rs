use thiserror::Error;

#[derive(Debug, Error)]
pub enum CalecError {
    #[error("shape error: {0}")]
    Shape(String),
    #[error("degenerate mask: row {row} has no unmasked entries")]
    DegenerateMask { row: usize },
    #[error("index {index} out of range for length {len}")]
    Index { index: usize, len: usize },
    #[error("token id {id} outside vocabulary of size {size}")]
    Vocab { id: usize, size: usize },
    #[error("numeric error: {0}")]
    Numeric(String),
    #[error("unknown words in tagging lexicon: {0:?}")]
    Tagging(Vec<String>),
    #[error("invalid chunk spans: {0}")]
    Span(String),
    #[error("no labeled chunks for alignment loss")]
    EmptyLabels,
    #[error("config error: {0}")]
    Config(String),
    #[error("data error: {0}")]
    Data(String),
    #[error("staging error: {0}")]
    Staging(String),
    #[error("checkpoint error: {0}")]
    Checkpoint(String),
    #[error("unknown parameter `{0}`")]
    UnknownParameter(String),
    #[error("refusing to overwrite existing path {0} (pass --force)")]
    Exists(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

pub type Result<T, E = CalecError> = std::result::Result<T, E>;

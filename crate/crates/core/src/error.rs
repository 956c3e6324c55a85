use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid input: {0}")]
    InvalidInput(String),

    #[error("insufficient data: {0}")]
    InsufficientData(String),

    #[error("no valid candidate: {0}")]
    NoValidCandidate(String),

    #[error("parse error: {0}")]
    Parse(String),

    #[error("configuration error: {0}")]
    Config(String),

    #[error("image decode error: {0}")]
    Decode(String),

    #[error("feature lookup error: {0}")]
    Lookup(String),

    #[error("degenerate embedding: {0}")]
    DegenerateEmbedding(String),

    #[error("non-finite loss at epoch {epoch}, batch {batch} (lr = {lr:e}): {detail}")]
    NonFinite {
        epoch: usize,
        batch: usize,
        lr: f64,
        detail: String,
    },

    #[error("fetch error: {0}")]
    Fetch(String),

    #[error("container format error: {0}")]
    Format(String),

    #[error("io error: {0}")]
    Io(#[from] std::io::Error),

    #[error("json error: {0}")]
    Json(#[from] serde_json::Error),

    #[error("tensor error: {0}")]
    Tensor(#[from] candle::Error),
}

impl Error {
    pub fn invalid(msg: impl Into<String>) -> Self {
        Error::InvalidInput(msg.into())
    }

    pub fn insufficient(msg: impl Into<String>) -> Self {
        Error::InsufficientData(msg.into())
    }

    pub fn config(msg: impl Into<String>) -> Self {
        Error::Config(msg.into())
    }

    /// Process exit code: 2 usage, 3 data, 4 numeric failure.
    pub fn exit_code(&self) -> i32 {
        match self {
            Error::Config(_) => 2,
            Error::NonFinite { .. } | Error::DegenerateEmbedding(_) | Error::Tensor(_) => 4,
            _ => 3,
        }
    }
}

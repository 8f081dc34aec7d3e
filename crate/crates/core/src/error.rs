use thiserror::Error;

/// Errors raised across the crate.
#[derive(Debug, Error)]
pub enum Error {
    #[error("token {token} is outside the vocabulary of size {vocab}")]
    InvalidToken { token: u32, vocab: usize },

    #[error("context must contain at least one token")]
    EmptyContext,

    #[error("action (TT={tt}, d={depth}, k={top_k}) violates TT <= k^(d-1)")]
    InfeasibleAction { tt: u32, depth: u32, top_k: u32 },

    #[error("dimension mismatch: expected {expected}, got {got}")]
    DimensionMismatch { expected: usize, got: usize },

    #[error("contract violation: {0}")]
    Contract(String),

    #[error("non-finite value: {0}")]
    NonFinite(String),

    #[error("empty input: {0}")]
    Empty(&'static str),

    #[error("unknown sub-event tag `{0}`")]
    UnknownSubEvent(String),

    #[error("invalid configuration: {0}")]
    Config(String),

    #[error("checkpoint: {0}")]
    Checkpoint(String),

    #[error("run log: {0}")]
    Log(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),
}

pub type Result<T> = std::result::Result<T, Error>;

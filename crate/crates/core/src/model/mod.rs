//! Toy grouped-query-attention transformer with gated FFN.

mod config;
mod forward;
mod weights;

use thiserror::Error;

use crate::linalg::LinalgError;

pub use config::ModelConfig;
pub use forward::{argmax, CompactFfn, FfnOutput, FfnPlan, KvCache, LayerTrace, Model, StepTrace};
pub use weights::{LayerWeights, ModelWeights, MAGIC};

#[derive(Debug, Error, Clone, PartialEq)]
pub enum ModelError {
    #[error("invalid model config: {0}")]
    InvalidConfig(String),
    #[error("shape error: {0}")]
    Shape(String),
    #[error("token {token} out of range for vocabulary of {vocab}")]
    TokenOutOfRange { token: u32, vocab: usize },
    #[error("KV cache does not match the model config")]
    CacheMismatch,
    #[error("KV cache full at {0} tokens")]
    CacheFull(usize),
    #[error("mask length {got} does not match FFN width {expected}")]
    MaskLength { expected: usize, got: usize },
    #[error("prompt must contain at least one token")]
    EmptyPrompt,
    #[error("not a weight file (bad magic)")]
    BadMagic,
    #[error("weight file truncated")]
    Truncated,
    #[error("weight file has trailing bytes")]
    TrailingBytes,
    #[error("io: {0}")]
    Io(String),
    #[error(transparent)]
    Linalg(#[from] LinalgError),
}

impl From<std::io::Error> for ModelError {
    fn from(e: std::io::Error) -> Self {
        ModelError::Io(e.to_string())
    }
}

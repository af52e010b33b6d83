//! Error types shared across the engine.

use thiserror::Error;

#[derive(Debug, Error)]
pub enum EngineError {
    #[error("shape mismatch: expected {expected}, got {got}")]
    ShapeMismatch { expected: String, got: String },
    #[error("invalid dimension: {0}")]
    InvalidDim(String),
    #[error("empty tensor: {0}")]
    EmptyTensor(String),
    #[error("spike value {value} outside alphabet {{0..{max}}}")]
    SpikeAlphabet { value: u32, max: u32 },
    #[error("non-finite value at index {0}")]
    NonFinite(usize),
    #[error("degenerate mask: {0}")]
    DegenerateMask(String),
    #[error("invalid configuration: {0}")]
    InvalidConfig(String),
    #[error("NaN gradient in parameter '{0}'")]
    NanGradient(String),
    #[error("checkpoint error: {0}")]
    Checkpoint(String),
    #[error("missing frame: {0}")]
    MissingFrame(String),
    #[error("frame size mismatch: {0}")]
    FrameSizeMismatch(String),
    #[error("unreadable file {path}: {reason}")]
    Unreadable { path: String, reason: String },
    #[error("io error: {0}")]
    Io(#[from] std::io::Error),
    #[error("{0}")]
    Other(String),
}

pub type Result<T> = std::result::Result<T, EngineError>;

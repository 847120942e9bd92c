use thiserror::Error;

use crate::lm::Token;

/// Errors raised by the decoding library.
#[derive(Debug, Error)]
pub enum Error {
    #[error("token {token} is outside the vocabulary of size {vocab_size}")]
    UnknownToken { token: Token, vocab_size: usize },

    #[error("vocabulary mismatch: expected size {expected}, got {got}")]
    VocabMismatch { expected: usize, got: usize },

    #[error("dimension mismatch: expected {expected}, got {got}")]
    DimensionMismatch { expected: usize, got: usize },

    #[error("empty input: {0}")]
    EmptyInput(&'static str),

    #[error("non-finite value at index {index}")]
    NonFinite { index: usize },

    #[error("invalid probability vector: {0}")]
    InvalidDistribution(String),

    /// Every entry of a vector was non-positive after clamping.
    #[error("degenerate residual: no strictly positive mass after clamping")]
    DegenerateResidual,

    #[error("invalid configuration: {0}")]
    Config(String),

    #[error("parse error at line {line}: {message}")]
    Parse { line: usize, message: String },

    /// An internal contract was broken (e.g. a drafted token with zero draft probability).
    #[error("invariant breach: {0}")]
    Invariant(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),
}

pub type Result<T, E = Error> = std::result::Result<T, E>;

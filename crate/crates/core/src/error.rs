//! Error type shared across the crate.

use thiserror::Error;

#[derive(Debug, Error)]
pub enum FpError {
    #[error("shape mismatch in {op}: expected {expected}, got {got}")]
    ShapeMismatch {
        op: &'static str,
        expected: String,
        got: String,
    },

    #[error("non-finite value encountered in {context}")]
    NonFinite { context: String },

    #[error("non-finite iterate at fixed-point iteration {iteration}")]
    NonFiniteIterate { iteration: usize },

    #[error("non-finite output at token index {token}")]
    NonFiniteToken { token: usize },

    #[error("singular matrix in {context}")]
    Singular { context: String },

    #[error("tape replay mismatch: recorded forward deviates from solver iterate by {deviation:e}")]
    TapeReplayMismatch { deviation: f64 },

    #[error("invalid configuration: {0}")]
    InvalidConfig(String),

    #[error("empty loss mask: no supervised positions")]
    EmptyMask,

    #[error("generator could not reach a length in range after {retries} retries")]
    LengthUnreachable { retries: usize },

    #[error("training diverged at step {step}: non-finite loss")]
    Diverged { step: usize },

    #[error("bad file format: {0}")]
    Format(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),
}

impl FpError {
    pub fn shape(op: &'static str, expected: impl Into<String>, got: impl Into<String>) -> Self {
        FpError::ShapeMismatch {
            op,
            expected: expected.into(),
            got: got.into(),
        }
    }
}

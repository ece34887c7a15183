//! Crate-wide error type.

use crate::sampler::TraceRow;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error("io error: {0}")]
    Io(#[from] std::io::Error),

    /// File does not start with the expected container magic.
    #[error("bad magic in {path}: expected {expected:?}")]
    BadMagic { path: String, expected: &'static str },

    /// File ended before the declared payload was complete.
    #[error("truncated payload in {path}: need {need} bytes, have {have}")]
    Truncated { path: String, need: usize, have: usize },

    /// Container declares a value type this build does not read.
    #[error("unsupported dtype code {0} (only 0 = f32)")]
    UnsupportedDtype(u32),

    #[error("unsupported png: {0}")]
    UnsupportedPng(String),

    #[error("dimension mismatch: {0}")]
    DimMismatch(String),

    #[error("invalid input: {0}")]
    InvalidInput(String),

    #[error("empty input: {0}")]
    Empty(&'static str),

    #[error("config error: {0}")]
    Config(String),

    /// Non-finite state detected during a solve; carries the loss trace
    /// accumulated up to the aborting step.
    #[error("numerical abort at step {step}: {detail}")]
    NumericalAbort {
        step: usize,
        detail: String,
        trace: Vec<TraceRow>,
    },

    #[error("training diverged at step {step}: loss {loss}")]
    Diverged { step: usize, loss: f64 },
}

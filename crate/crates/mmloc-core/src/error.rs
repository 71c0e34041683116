//! Error types shared across the crate.

use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    /// Tensor or feature-map shape does not match what the operation requires.
    #[error("shape mismatch in {op}: expected {expected}, got {got}")]
    ShapeMismatch {
        op: &'static str,
        expected: String,
        got: String,
    },

    /// A configuration value failed validation.
    #[error("config error: {0}")]
    Config(String),

    /// Dataset generation, loading or schema problems.
    #[error("data error: {0}")]
    Data(String),

    /// Token id outside the gloss vocabulary.
    #[error("unknown token id {id} (vocab size {vocab})")]
    UnknownToken { id: usize, vocab: usize },

    /// encode_text was called with no tokens.
    #[error("empty token sequence")]
    EmptyTokens,

    /// Unknown category name in the gloss table.
    #[error("unknown category {0:?}")]
    UnknownCategory(String),

    /// A query vector used as a basis column is (numerically) zero.
    #[error("degenerate query: basis column {index} has norm {norm:.3e}")]
    DegenerateQuery { index: usize, norm: f64 },

    /// Non-finite loss encountered while training.
    #[error("numeric divergence at epoch {epoch}, batch {batch}: loss = {loss}")]
    Divergence { epoch: usize, batch: usize, loss: f64 },

    /// Checkpoint cannot be applied (config hash mismatch, bad magic, ...).
    #[error("checkpoint error: {0}")]
    Checkpoint(String),

    /// Split/checkpoint or split-mode inconsistencies at evaluation time.
    #[error("evaluation error: {0}")]
    Eval(String),

    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error("json error: {0}")]
    Json(#[from] serde_json::Error),

    #[error("image error: {0}")]
    Image(#[from] image::ImageError),
}

pub type Result<T> = std::result::Result<T, Error>;

impl Error {
    pub fn shape(op: &'static str, expected: impl Into<String>, got: impl Into<String>) -> Self {
        Error::ShapeMismatch {
            op,
            expected: expected.into(),
            got: got.into(),
        }
    }

    /// Process exit code used by the CLI: 2 config, 3 data, 4 divergence, 1 other.
    pub fn exit_code(&self) -> i32 {
        match self {
            Error::Config(_) | Error::InvalidArgument(_) => 2,
            Error::Data(_)
            | Error::UnknownCategory(_)
            | Error::UnknownToken { .. }
            | Error::Io(_)
            | Error::Json(_)
            | Error::Image(_) => 3,
            Error::Divergence { .. } => 4,
            _ => 1,
        }
    }
}

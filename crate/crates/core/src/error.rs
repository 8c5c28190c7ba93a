// SPDX-License-Identifier: MIT OR Apache-2.0

use std::path::PathBuf;

/// Errors produced anywhere in the toolkit.
#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error("invalid model config: {0}")]
    InvalidConfig(String),

    #[error("token id {token} out of range for vocabulary of {vocab_size}")]
    TokenOutOfRange { token: u32, vocab_size: usize },

    #[error("sequence of {len} tokens exceeds max_seq {max_seq}")]
    SequenceTooLong { len: usize, max_seq: usize },

    #[error("hook site out of bounds: {0}")]
    HookOutOfBounds(String),

    #[error("dimension mismatch for {what}: expected {expected}, got {actual}")]
    DimensionMismatch {
        what: String,
        expected: usize,
        actual: usize,
    },

    #[error("training diverged at step {step} (loss {loss})")]
    Divergence { step: usize, loss: f64 },

    #[error("answer must contain at least one token")]
    EmptyAnswer,

    #[error("malformed archive: {0}")]
    MalformedArchive(String),

    #[error("tensor `{name}` has shape {actual:?}, expected {expected:?}")]
    ShapeMismatch {
        name: String,
        expected: Vec<usize>,
        actual: Vec<usize>,
    },

    #[error("labels contain a single class")]
    SingleClass,

    #[error("non-finite value at row {row}, column {col}")]
    NonFinite { row: usize, col: usize },

    #[error("missing column `{0}`")]
    MissingColumn(String),

    #[error("vocabulary overflow: {needed} words do not fit in vocab_size {vocab_size}")]
    VocabularyOverflow { needed: usize, vocab_size: usize },

    #[error("invalid input: {0}")]
    InvalidInput(String),

    #[error("numeric failure: {0}")]
    Numeric(String),

    #[error("config error: {0}")]
    Config(String),

    #[error("missing prerequisite: run stage `{stage}` first ({missing})")]
    MissingPrerequisite { stage: String, missing: PathBuf },

    #[error("config changed since stage `{stage}` last ran; rerun with --force to overwrite")]
    ConfigMismatch { stage: String },

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),

    #[error(transparent)]
    Csv(#[from] csv::Error),
}

pub type Result<T> = std::result::Result<T, Error>;

impl Error {
    pub(crate) fn invalid(msg: impl Into<String>) -> Self {
        Error::InvalidInput(msg.into())
    }

    pub(crate) fn dims(what: impl Into<String>, expected: usize, actual: usize) -> Self {
        Error::DimensionMismatch {
            what: what.into(),
            expected,
            actual,
        }
    }
}

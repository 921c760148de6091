// SPDX-License-Identifier: MIT OR Apache-2.0

//! Error type shared by every module of the crate.

use std::path::PathBuf;

/// Crate-wide result alias.
pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error("i/o error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("json error: {0}")]
    Json(#[from] serde_json::Error),

    #[error("tokenizer error: {0}")]
    Tokenizer(String),

    #[error("invalid model checkpoint: {0}")]
    Checkpoint(String),

    #[error("unknown model id `{0}`")]
    UnknownModel(String),

    #[error("empty input: {0}")]
    EmptyInput(&'static str),

    #[error("context overflow: {len} positions exceed max context {max}")]
    ContextOverflow { len: usize, max: usize },

    #[error("layer {layer} out of range [0, {n_layers}]")]
    LayerOutOfRange { layer: usize, n_layers: usize },

    #[error("position {position} out of range for sequence of length {len}")]
    PositionOutOfRange { position: usize, len: usize },

    #[error("dimension mismatch: expected {expected}, got {got}")]
    DimensionMismatch { expected: usize, got: usize },

    #[error("token id {id} outside vocabulary of size {vocab}")]
    TokenOutOfVocab { id: u32, vocab: usize },

    #[error("invalid knockout: {0}")]
    InvalidKnockout(String),

    #[error("span alignment failed for `{mention}`: {reason}")]
    Alignment { mention: String, reason: String },

    #[error("malformed corpus at {path}:{line}: {reason}")]
    Corpus {
        path: PathBuf,
        line: usize,
        reason: String,
    },

    #[error("model mismatch: `{left}` vs `{right}`")]
    ModelMismatch { left: String, right: String },

    #[error("representation mismatch: {0}")]
    RepresentationMismatch(String),

    #[error("training diverged at epoch {epoch}: {detail}")]
    Diverged { epoch: usize, detail: String },

    #[error("optimization did not converge: best loss {best_loss}")]
    NotConverged { best_loss: f32 },

    #[error("cache miss: {0}")]
    CacheMiss(String),

    #[error("frequency lookup failed for `{mention}`: {reason}")]
    Frequency { mention: String, reason: String },

    #[error("invalid dataset: {0}")]
    Dataset(String),

    #[error("invalid configuration: {0}")]
    Config(String),
}

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }
}

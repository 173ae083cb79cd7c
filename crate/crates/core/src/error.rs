use std::path::PathBuf;

use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid configuration: {0}")]
    InvalidConfig(String),

    #[error("shape mismatch for {what}: expected {expected:?}, got {actual:?}")]
    Shape {
        what: String,
        expected: Vec<usize>,
        actual: Vec<usize>,
    },

    #[error("missing tensor `{0}` in container")]
    Schema(String),

    #[error("non-finite activation after layer {layer}")]
    Numeric { layer: usize },

    #[error("degenerate embedding: pooled patch mean has zero norm")]
    DegenerateEmbedding,

    #[error("container format error: {0}")]
    Container(String),

    #[error("input error for {path}: {message}")]
    Input { path: PathBuf, message: String },

    #[error("manifest error: {0}")]
    Manifest(String),

    #[error("cache format error: {0}")]
    Cache(String),

    #[error("invalid seeds: {0}")]
    InvalidSeeds(String),

    #[error("split error: {0}")]
    Split(String),

    #[error("evaluation error: {0}")]
    Evaluation(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),

    #[error(transparent)]
    Csv(#[from] csv::Error),
}

impl Error {
    pub(crate) fn shape(what: impl Into<String>, expected: &[usize], actual: &[usize]) -> Self {
        Error::Shape {
            what: what.into(),
            expected: expected.to_vec(),
            actual: actual.to_vec(),
        }
    }

    pub(crate) fn input(path: impl Into<PathBuf>, message: impl std::fmt::Display) -> Self {
        Error::Input {
            path: path.into(),
            message: message.to_string(),
        }
    }
}

use std::io;

use thiserror::Error;

/// Errors produced anywhere in the stitching pipeline.
#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid state: {0}")]
    InvalidState(String),

    #[error("invalid maze: {0}")]
    InvalidMaze(String),

    #[error("shape mismatch: {0}")]
    Shape(String),

    #[error("invalid configuration: {0}")]
    Config(String),

    #[error("dataset generation failed: {0}")]
    Generation(String),

    #[error("model has not been trained: {0}")]
    Untrained(String),

    #[error("undefined correlation: {0}")]
    UndefinedCorrelation(String),

    #[error("empty index")]
    EmptyIndex,

    #[error("empty candidate set")]
    NoCandidates,

    #[error("unsupported format version {found} (expected {expected})")]
    Version { found: u32, expected: u32 },

    #[error("corrupt file: {0}")]
    Corrupt(String),

    #[error(transparent)]
    Io(#[from] io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

pub type Result<T, E = Error> = std::result::Result<T, E>;

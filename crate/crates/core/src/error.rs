use std::io;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("shape mismatch: expected {expected:?}, got {got:?}")]
    Shape { expected: Vec<usize>, got: Vec<usize> },

    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("wrong magic for {what}: expected {expected:#010x}, found {found:#010x}")]
    WrongMagic { what: &'static str, expected: u32, found: u32 },

    #[error("truncated or inconsistent IDX data: {0}")]
    Truncated(String),

    #[error("IDX dimensions overflow: {0:?}")]
    DimOverflow(Vec<u32>),

    #[error("label {label} at index {index} is out of range (classes = {classes})")]
    LabelOutOfRange { index: usize, label: usize, classes: usize },

    #[error("training diverged at epoch {epoch}, batch {batch}: loss = {loss}")]
    Diverged { epoch: usize, batch: usize, loss: f64 },

    #[error("checkpoint error: {0}")]
    Checkpoint(String),

    #[error("topology hash mismatch: expected {expected}, found {found}")]
    TopologyMismatch { expected: String, found: String },

    #[error("parse error: {0}")]
    Parse(String),

    #[error(transparent)]
    Io(#[from] io::Error),
}

impl Error {
    pub(crate) fn shape(expected: &[usize], got: &[usize]) -> Self {
        Error::Shape { expected: expected.to_vec(), got: got.to_vec() }
    }

    pub(crate) fn invalid(msg: impl Into<String>) -> Self {
        Error::InvalidArgument(msg.into())
    }
}

use std::path::PathBuf;

use thiserror::Error;

/// Errors raised by the simulator library.
#[derive(Debug, Error)]
pub enum Error {
    #[error("shape mismatch at block {block}: {detail}")]
    Shape { block: usize, detail: String },

    #[error("contract violation: {0}")]
    Contract(String),

    #[error("non-finite gradient in block {block} ({which})")]
    NonFinite { block: usize, which: &'static str },

    #[error("layer index {index} out of range 1..={max}")]
    LayerOutOfRange { index: usize, max: usize },

    #[error("mask length {got} does not match model with {expected} prunable layers")]
    MaskLength { expected: usize, got: usize },

    #[error("payload from client {client} layer {layer}: {detail}")]
    PayloadShape {
        client: usize,
        layer: usize,
        detail: String,
    },

    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("{path}: bad magic number {found:#010x}, expected {expected:#010x}")]
    IdxMagic {
        path: PathBuf,
        found: u32,
        expected: u32,
    },

    #[error("{path}: truncated IDX file ({detail})")]
    IdxTruncated { path: PathBuf, detail: String },

    #[error("image count {images} does not match label count {labels}")]
    IdxCountMismatch { images: usize, labels: usize },

    #[error("insufficient samples: need {needed}, dataset has {available}")]
    InsufficientSamples { needed: usize, available: usize },

    #[error("config error:\n{}", .0.join("\n"))]
    Config(Vec<String>),

    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
}

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }
}

pub type Result<T, E = Error> = std::result::Result<T, E>;

//! Error type shared across the engine.

use crate::tensor::Shape;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error("{op}: shape mismatch between {left} and {right}")]
    ShapeMismatch { op: &'static str, left: Shape, right: Shape },

    #[error("{op}: expected {expected} channels, got {got}")]
    ChannelMismatch { op: &'static str, expected: usize, got: usize },

    #[error("{op}: {msg}")]
    InvalidArgument { op: &'static str, msg: String },

    #[error("backward: loss must be a scalar (1x1x1x1), got {shape}")]
    NonScalarLoss { shape: Shape },

    #[error("backward: loss tensor is not attached to the tape")]
    DetachedLoss,

    #[error("{op}: non-finite value encountered ({detail})")]
    NonFinite { op: &'static str, detail: String },

    #[error("training diverged at iteration {iteration}: loss = {loss}")]
    Diverged { iteration: usize, loss: f64 },

    #[error("invalid label {value} (K = {num_classes}) in {context}")]
    InvalidLabel { value: u8, num_classes: usize, context: String },

    #[error("metrics: {0}")]
    EmptyMetric(&'static str),

    #[error("{path}: {source}")]
    Io { path: String, source: std::io::Error },

    #[error("{path}: parse error at byte {offset}: {msg}")]
    Parse { path: String, offset: usize, msg: String },

    #[error("{path}:{line}: {msg}")]
    Config { path: String, line: usize, msg: String },

    #[error("{path}: not a model file (bad magic)")]
    BadMagic { path: String },

    #[error("{path}: unsupported model format version {found} (expected {expected})")]
    VersionMismatch { path: String, found: u32, expected: u32 },

    #[error("{path}: truncated model file (needed {needed} more bytes)")]
    Truncated { path: String, needed: usize },

    #[error("{path}: checksum mismatch (stored {stored:#010x}, computed {computed:#010x})")]
    ChecksumMismatch { path: String, stored: u32, computed: u32 },

    #[error("{path}: model tensor '{name}' has dtype {found}, expected {expected}")]
    DtypeMismatch { path: String, name: String, found: String, expected: String },

    #[error("{path}: model record '{name}': {msg}")]
    BadRecord { path: String, name: String, msg: String },
}

impl Error {
    pub fn io(path: impl Into<String>, source: std::io::Error) -> Self {
        Error::Io { path: path.into(), source }
    }

    pub fn invalid(op: &'static str, msg: impl Into<String>) -> Self {
        Error::InvalidArgument { op, msg: msg.into() }
    }
}

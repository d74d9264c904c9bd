//! Crate-wide error type.

use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    /// Tensor shapes incompatible with the requested operation.
    #[error("shape mismatch in {op}: {detail}")]
    ShapeMismatch { op: &'static str, detail: String },

    /// Input spatial size not divisible by the pyramid's coarsest stride.
    #[error("input size {got}x{got_w} must be a multiple of {required} for pyramid levels up to {level}")]
    InputSize {
        got: usize,
        got_w: usize,
        required: usize,
        level: u8,
    },

    /// High/low feature maps that should be spatially aligned are not.
    #[error("alignment violation: {0}")]
    Alignment(String),

    /// A configuration field failed validation.
    #[error("config field `{field}`: {constraint}")]
    Config { field: String, constraint: String },

    /// Training produced a non-finite loss.
    #[error("non-finite loss in term `{term}` at step {step}")]
    NonFinite { term: &'static str, step: usize },

    /// Scene generation could not place the requested objects.
    #[error("infeasible scene spec: {0}")]
    InfeasibleScene(String),

    #[error("checkpoint: bad magic bytes (not a checkpoint file)")]
    CkptBadMagic,

    #[error("checkpoint: unsupported format version {0}")]
    CkptBadVersion(u32),

    #[error("checkpoint: file truncated while reading {0}")]
    CkptTruncated(&'static str),

    /// Loaded checkpoint does not match the active configuration.
    #[error("checkpoint incompatible: {0}")]
    CkptIncompatible(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error("image encode/decode: {0}")]
    Image(String),
}

pub type Result<T> = std::result::Result<T, Error>;

impl Error {
    /// Process exit code per the CLI contract: 1 validation, 2 numerical, 3 I/O.
    pub fn exit_code(&self) -> i32 {
        match self {
            Error::NonFinite { .. } => 2,
            Error::Io(_) | Error::Image(_) | Error::CkptTruncated(_) | Error::CkptBadMagic => 3,
            _ => 1,
        }
    }
}

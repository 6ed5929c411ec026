use std::io;
use std::path::PathBuf;

use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Error)]
pub enum CodecError {
    #[error("cannot encode non-finite value {0}")]
    NonFinite(f64),
    #[error("value {0} is not an integer in [-128, 127]")]
    Int8OutOfRange(f64),
    #[error("value {value} overflows {format}")]
    Overflow { value: f64, format: &'static str },
    #[error("raw word {raw:#x} has bits above width {bit_width}")]
    RawOutOfWidth { raw: u32, bit_width: u32 },
    #[error("unknown format tag `{0}`")]
    UnknownFormat(String),
}

/// Non-finite values surfaced by a forward or loss computation.
#[derive(Debug, Clone, PartialEq, Eq, Error, Serialize, Deserialize)]
#[error("numerical runtime error at {stage}{}", tensor.as_ref().map(|t| format!(" (tensor `{t}`)")).unwrap_or_default())]
pub struct NumericalError {
    /// First tensor, in manifest order, holding a non-finite effective value.
    pub tensor: Option<String>,
    pub stage: String,
}

#[derive(Debug, Error)]
pub enum BundleError {
    #[error(transparent)]
    Codec(#[from] CodecError),
    #[error("i/o error on {path}: {source}")]
    Io { path: PathBuf, source: io::Error },
    #[error("malformed manifest: {0}")]
    Manifest(#[from] serde_json::Error),
    #[error("checksum mismatch: manifest {expected}, blob {actual}")]
    Checksum { expected: String, actual: String },
    #[error("tensor `{tensor}`: {reason}")]
    Layout { tensor: String, reason: String },
    #[error("weight reference out of bounds: tensor {tensor_id}, index {flat_index}")]
    OutOfBounds { tensor_id: usize, flat_index: usize },
    #[error("attack mode {mode} is not applicable: {reason}")]
    Mode { mode: String, reason: String },
    #[error("bundle is already quantized")]
    AlreadyQuantized,
    #[error("architecture mismatch: {0}")]
    Architecture(String),
    #[error("invalid exclusion pattern `{pattern}`: {reason}")]
    Pattern { pattern: String, reason: String },
}

pub type Result<T, E = BundleError> = std::result::Result<T, E>;

//! Error type shared by every module in this crate.

use thiserror::Error;

/// Crate-wide error enum. Variants map to the failure classes the public
/// operations document: bad caller input, malformed specs/files, datasets too
/// small or one-sided for the requested computation, and artifacts that do
/// not fit together (checkpoint vs. config, format versions).
#[derive(Error, Debug)]
pub enum CoreError {
    /// Caller passed an argument that violates a documented precondition
    /// (shape mismatch, unlabeled sample where a label is required, ...).
    #[error("invalid input: {0}")]
    InvalidInput(String),

    /// A spec/config value is outside its documented domain
    /// (cut fraction out of range, unknown regime key, zero batch size, ...).
    #[error("invalid spec: {0}")]
    InvalidSpec(String),

    /// The data at hand cannot support the computation
    /// (empty score list, empty split, dataset smaller than one batch).
    #[error("insufficient data: {0}")]
    InsufficientData(String),

    /// Two artifacts do not fit together: checkpoint vs. backbone config,
    /// unsupported format version, parameter arrays of the wrong length.
    #[error("incompatible: {0}")]
    Incompatible(String),

    /// Underlying I/O failure while reading or writing artifacts.
    #[error("i/o error: {0}")]
    Io(#[from] std::io::Error),

    /// A file that should be structured text failed to parse.
    #[error("parse error: {0}")]
    Parse(String),
}

impl From<serde_json::Error> for CoreError {
    fn from(e: serde_json::Error) -> Self {
        CoreError::Parse(e.to_string())
    }
}

impl From<image::ImageError> for CoreError {
    fn from(e: image::ImageError) -> Self {
        CoreError::Parse(e.to_string())
    }
}

/// Convenience alias used across the crate.
pub type Result<T> = std::result::Result<T, CoreError>;

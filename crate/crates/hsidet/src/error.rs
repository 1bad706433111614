//! Error type shared across the crate.

use thiserror::Error;

/// Crate-wide result alias.
pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    /// A tensor dimension does not satisfy an operation's contract.
    /// The message names the offending dimension.
    #[error("{op}: shape mismatch: {detail}")]
    ShapeMismatch { op: &'static str, detail: String },

    /// An operation received a NaN or infinite value where a finite one is required.
    #[error("{op}: non-finite input value")]
    NonFinite { op: &'static str },

    /// A layer/block specification violates its invariants.
    #[error("invalid spec: {0}")]
    InvalidSpec(String),

    /// A named parameter is missing from (or duplicated in) the registry.
    #[error("parameter registry: {0}")]
    Param(String),

    /// Weight container, annotation, image, or RLE parsing failed.
    #[error("format error: {0}")]
    Format(String),

    /// Model configuration failed validation.
    #[error("config error: {0}")]
    Config(String),

    #[error("io error: {0}")]
    Io(#[from] std::io::Error),
}

impl Error {
    pub fn shape(op: &'static str, detail: impl Into<String>) -> Self {
        Error::ShapeMismatch {
            op,
            detail: detail.into(),
        }
    }
}

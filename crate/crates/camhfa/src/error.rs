//! Crate-wide error type.

use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    #[error("{op}: incompatible shapes {lhs:?} and {rhs:?}")]
    ShapeMismatch {
        op: &'static str,
        lhs: Vec<usize>,
        rhs: Vec<usize>,
    },

    #[error("invalid configuration: {0}")]
    InvalidConfig(String),

    #[error("unknown configuration key `{0}`")]
    UnknownConfigKey(String),

    /// `offset` counts bytes in binary inputs and lines in text inputs.
    #[error("parse error at offset {offset}: {message}")]
    Parse { offset: u64, message: String },

    #[error("unsupported format version {found} (expected {expected})")]
    UnsupportedVersion { found: u32, expected: u32 },

    #[error("backward requires a scalar loss node, got shape {shape:?}")]
    NotScalar { shape: Vec<usize> },

    #[error("degenerate embedding: pre-normalization vector is zero")]
    DegenerateEmbedding,

    #[error("class label {label} out of range for {num_classes} classes")]
    LabelOutOfRange { label: usize, num_classes: usize },

    #[error("zero score variance in the {side}-side cohort statistics")]
    DegenerateCohort { side: &'static str },

    #[error("score set has no {missing} trials")]
    MissingClass { missing: &'static str },

    #[error("no embedding found for utterance id `{0}`")]
    MissingEmbedding(String),

    #[error("no score found for trial `{enroll}` vs `{test}`")]
    MissingScore { enroll: String, test: String },

    #[error("i/o error: {0}")]
    Io(#[from] std::io::Error),
}

pub type Result<T> = std::result::Result<T, Error>;

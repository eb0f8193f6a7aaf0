use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("plant state became non-finite at step {step}")]
    NonFiniteState { step: usize },

    #[error("target ({x:.6}, {y:.6}) is outside the reachable annulus by {excess:.6e} m")]
    Unreachable { x: f64, y: f64, excess: f64 },

    #[error("insufficient data: need at least {needed} samples, got {got}")]
    InsufficientData { needed: usize, got: usize },

    #[error("dimension mismatch in {context}: expected {expected}, got {got}")]
    DimensionMismatch {
        context: &'static str,
        expected: usize,
        got: usize,
    },

    #[error("Gram matrix is numerically singular (min pivot {min_pivot:.3e})")]
    SingularGram { min_pivot: f64 },

    #[error("invalid parameter `{field}`: {reason}")]
    InvalidParameter { field: String, reason: String },

    #[error("invalid config field `{field}`: {reason}")]
    ConfigInvalid { field: String, reason: String },

    #[error("parse error at byte offset {offset}: {message}")]
    Parse { offset: usize, message: String },

    #[error("unsupported model format version {found} (expected {expected})")]
    UnsupportedVersion { found: u32, expected: u32 },

    #[error("model dictionaries differ: {first} vs {second}")]
    DictionaryMismatch { first: String, second: String },

    #[error("model file is inconsistent: {0}")]
    InvalidModel(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),
}

impl Error {
    pub(crate) fn invalid(field: impl Into<String>, reason: impl Into<String>) -> Self {
        Error::InvalidParameter {
            field: field.into(),
            reason: reason.into(),
        }
    }
}

impl Error {
    /// Process exit status: 2 config or input, 3 numeric, 4 I/O.
    pub fn exit_code(&self) -> u8 {
        match self {
            Error::ConfigInvalid { .. }
            | Error::InvalidParameter { .. }
            | Error::Parse { .. }
            | Error::UnsupportedVersion { .. }
            | Error::DictionaryMismatch { .. }
            | Error::InvalidModel(_)
            | Error::Unreachable { .. } => 2,
            Error::NonFiniteState { .. } | Error::SingularGram { .. } | Error::InsufficientData { .. } | Error::DimensionMismatch { .. } => 3,
            Error::Io(_) => 4,
        }
    }
}

use thiserror::Error;

/// Errors produced anywhere in the crate.
#[derive(Debug, Error)]
pub enum Error {
    #[error("row {row} has near-zero norm ({norm:e})")]
    ZeroRow { row: usize, norm: f64 },

    #[error("dimension mismatch: {0}")]
    DimMismatch(String),

    #[error("shape mismatch: {0}")]
    ShapeMismatch(String),

    #[error("score set is empty")]
    EmptyScores,

    #[error("alpha {0} is outside the allowed range")]
    AlphaOutOfRange(f64),

    #[error("anchor has no negatives")]
    EmptyNegatives,

    #[error("index {index} out of range for length {len}")]
    IndexOutOfRange { index: usize, len: usize },

    #[error("filtered negative set is empty for anchor {0}")]
    EmptyFilteredSet(usize),

    #[error("surrogate for anchor {0} was never initialized")]
    UninitializedSurrogate(usize),

    #[error("k = {k} exceeds the {available} available negatives")]
    KTooLarge { k: usize, available: usize },

    #[error("bad configuration: {0}")]
    BadConfig(String),

    #[error("io error: {0}")]
    Io(#[from] std::io::Error),

    #[error("json error: {0}")]
    Json(#[from] serde_json::Error),

    #[error("csv error: {0}")]
    Csv(#[from] csv::Error),
}

impl Error {
    /// Stable short name used in machine-readable error reports.
    pub fn kind(&self) -> &'static str {
        match self {
            Error::ZeroRow { .. } => "ZeroRow",
            Error::DimMismatch(_) => "DimMismatch",
            Error::ShapeMismatch(_) => "ShapeMismatch",
            Error::EmptyScores => "EmptyScores",
            Error::AlphaOutOfRange(_) => "AlphaOutOfRange",
            Error::EmptyNegatives => "EmptyNegatives",
            Error::IndexOutOfRange { .. } => "IndexOutOfRange",
            Error::EmptyFilteredSet(_) => "EmptyFilteredSet",
            Error::UninitializedSurrogate(_) => "UninitializedSurrogate",
            Error::KTooLarge { .. } => "KTooLarge",
            Error::BadConfig(_) => "ConfigError",
            Error::Io(_) => "IoError",
            Error::Json(_) => "IoError",
            Error::Csv(_) => "IoError",
        }
    }
}

pub type Result<T> = std::result::Result<T, Error>;

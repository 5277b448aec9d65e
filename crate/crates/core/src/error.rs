use thiserror::Error;

#[derive(Debug, Error)]
pub enum SpareError {
    #[error("domain error: {0}")]
    Domain(String),

    #[error("dimension mismatch: expected {expected}, got {got} ({context})")]
    Dimension {
        expected: usize,
        got: usize,
        context: &'static str,
    },

    #[error("invalid reference list: {0}")]
    ReferenceList(String),

    #[error("non-finite value in {0}")]
    NonFinite(&'static str),

    #[error("training failed: {0}")]
    Training(String),

    #[error("scene generation failed after {attempts} attempts: {reason}")]
    Generation { attempts: usize, reason: String },

    #[error("dataset error: {0}")]
    Dataset(String),

    #[error("invalid configuration: {0}")]
    Config(String),

    #[error("model format error: {0}")]
    Format(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

pub type Result<T, E = SpareError> = std::result::Result<T, E>;

use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid config: {}", .0.join("; "))]
    InvalidConfig(Vec<String>),

    #[error("invalid generator spec: {0}")]
    InvalidSpec(String),

    #[error("dimension mismatch on {axis}: expected {expected}, got {actual}")]
    DimensionMismatch {
        axis: String,
        expected: usize,
        actual: usize,
    },

    #[error("non-finite value in {0}")]
    NonFinite(&'static str),

    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("no positive pairs")]
    NoPositivePairs,

    #[error("insufficient pairs ({pairs}); skip IB term this step")]
    InsufficientPairs { pairs: usize },

    #[error("class {class} has {count} groups; at least 3 are required")]
    ClassTooSmall { class: usize, count: usize },

    #[error("manifest: {0}")]
    Manifest(String),

    #[error("checkpoint: {0}")]
    Checkpoint(String),

    #[error("freeze mask references unknown layer index {0}")]
    UnknownLayer(usize),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),

    #[error("toml: {0}")]
    Toml(String),
}

pub type Result<T> = std::result::Result<T, Error>;

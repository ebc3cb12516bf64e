use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    #[error("shape mismatch: expected {expected:?}, got {actual:?}")]
    ShapeMismatch {
        expected: (usize, usize),
        actual: (usize, usize),
    },

    #[error("invalid value: {0}")]
    InvalidValue(String),

    #[error("invalid config: {0}")]
    InvalidConfig(String),

    #[error("non-finite value in {0}")]
    NonFinite(String),

    #[error("unknown prompt key `{key}`; available keys: {available}")]
    UnknownPromptKey { key: String, available: String },

    #[error("backend `{backend}` failed: {message}")]
    Backend { backend: String, message: String },

    #[error("empty pseudo-label cache: no valid records survived filtering; lower replay jitter/dropout or check the box and mask backends")]
    EmptyCache,

    #[error("not enough ids for an 8:1:1 split: got {0}, need at least 10")]
    TooFewIds(usize),

    #[error("training diverged: non-finite {loss} loss on batch [{ids}]")]
    Diverged { loss: &'static str, ids: String },

    #[error("checkpoint: {0}")]
    Checkpoint(String),

    #[error("png: {0}")]
    Png(String),

    #[error("io error at {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

pub type Result<T> = std::result::Result<T, Error>;

impl Error {
    pub(crate) fn io(path: impl AsRef<std::path::Path>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.as_ref().display().to_string(),
            source,
        }
    }
}

use thiserror::Error;

/// Errors produced anywhere in the engine.
#[derive(Debug, Error)]
pub enum Error {
    #[error("dimension error: {0}")]
    Dimension(String),

    #[error("domain error: {0}")]
    Domain(String),

    #[error("index error: {0}")]
    Index(String),

    #[error("value error: {0}")]
    Value(String),

    #[error("geometry error: {0}")]
    Geometry(String),

    #[error("non-finite value produced by {0}")]
    NonFinite(String),

    #[error("missing gradient for parameter `{0}`")]
    MissingGradient(String),

    #[error("stale tape: value recorded on tape {found}, current tape is {expected}")]
    StaleTape { expected: u64, found: u64 },

    #[error("parse error: {0}")]
    Parse(String),

    #[error("config error: {0}")]
    Config(String),

    #[error("dataset error: {0}")]
    Dataset(String),

    #[error("training diverged at seed {seed}, epoch {epoch}: {detail}")]
    Divergence { seed: u64, epoch: usize, detail: String },

    #[error("i/o error on {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },

    #[error("json error: {0}")]
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

use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("I/O error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("format error: {0}")]
    Format(String),

    #[error("data error: {0}")]
    Data(String),

    #[error("configuration error: {0}")]
    Config(String),

    #[error("degenerate box: {0}")]
    DegenerateBox(String),

    #[error("insufficient samples: need at least {needed}, got {got}")]
    InsufficientSamples { needed: usize, got: usize },

    #[error("undefined: {0}")]
    Undefined(String),

    #[error("every sample was labelled noise")]
    AllNoise,

    #[error("fit error: {0}")]
    Fit(String),

    #[error("zero-norm vector under cosine distance")]
    ZeroVector,

    #[error("triplet mining error: {0}")]
    Triplet(String),

    #[error("training diverged ({0}); try a lower learning_rate")]
    Divergence(String),

    #[error("degenerate map: all values are equal")]
    DegenerateMap,

    #[error("json error: {0}")]
    Json(#[from] serde_json::Error),
}

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }
}

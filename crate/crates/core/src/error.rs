use std::path::PathBuf;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error("image decode error: {0}")]
    Decode(String),
    #[error("unsupported image format: {0}")]
    Format(String),
    #[error("precondition violated: {0}")]
    Precondition(String),
    #[error("box {0} lies outside the {1}x{2} image")]
    Bounds(String, usize, usize),
    #[error("feature pyramid has no usable level")]
    EmptyPyramid,
    #[error("invalid parameter: {0}")]
    Parameter(String),
    #[error("no training positives for class '{0}'")]
    MissingClass(char),
    #[error("training diverged: {0}")]
    TrainingDivergence(String),
    #[error("font has no glyph for '{0}'")]
    MissingGlyph(char),
    #[error("font data: {0}")]
    Font(String),
    #[error("no annotation for image '{0}'")]
    Lookup(String),
    #[error("record keys do not match: {0}")]
    Keying(String),
    #[error("model file: {0}")]
    ModelFormat(String),
    #[error("manifest: {0}")]
    Manifest(String),
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    pub(crate) fn precondition(msg: impl Into<String>) -> Self {
        Error::Precondition(msg.into())
    }
}

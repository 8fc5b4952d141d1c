use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    #[error("rejected input: {0}")]
    InvalidInput(String),

    #[error("degenerate geometry: {0}")]
    DegenerateGeometry(String),

    #[error("pose rejected: {0}")]
    Pose(String),

    #[error("flagged frame: {0}")]
    FlaggedFrame(String),

    #[error("fold planning failed: {0}")]
    Planning(String),

    #[error("detector `{model}` failed: {message}")]
    Detector { model: String, message: String },

    #[error("model error: {0}")]
    Model(String),

    #[error("protocol violation: {0}")]
    Protocol(String),

    #[error("AUC undefined: {0}")]
    UndefinedAuc(String),

    #[error("dimension mismatch: expected {expected}, got {got}")]
    DimensionMismatch { expected: usize, got: usize },

    #[error("fold {fold}: {source}")]
    Fold {
        fold: usize,
        #[source]
        source: Box<Error>,
    },

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Image(#[from] image::ImageError),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

pub type Result<T> = std::result::Result<T, Error>;

impl Error {
    pub(crate) fn invalid(msg: impl Into<String>) -> Self {
        Error::InvalidInput(msg.into())
    }

    pub(crate) fn in_fold(self, fold: usize) -> Self {
        Error::Fold {
            fold,
            source: Box::new(self),
        }
    }
}

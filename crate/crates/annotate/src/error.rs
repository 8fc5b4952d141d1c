use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::model::{TaskEvent, TaskStatus};

#[derive(Debug, Error)]
pub enum ServiceError {
    #[error("unknown task `{0}`")]
    UnknownTask(String),

    #[error("unknown frame `{0}`")]
    UnknownFrame(String),

    #[error("invalid geometry: {0}")]
    InvalidGeometry(String),

    #[error("illegal transition: {event:?} from {from:?}")]
    IllegalTransition { from: TaskStatus, event: TaskEvent },

    #[error("version conflict: task is at version {current}, submission carried {submitted}")]
    VersionConflict { current: i64, submitted: i64 },

    #[error("bad request: {0}")]
    BadRequest(String),

    #[error("retraining is already running")]
    Busy,

    #[error(transparent)]
    Pipeline(#[from] chickface::Error),

    #[error("store: {0}")]
    Store(#[from] rusqlite::Error),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error("export: {0}")]
    Export(#[from] zip::result::ZipError),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

impl ServiceError {
    /// Stable machine-readable code of the error body.
    pub fn code(&self) -> &'static str {
        match self {
            ServiceError::UnknownTask(_) | ServiceError::UnknownFrame(_) => "not_found",
            ServiceError::InvalidGeometry(_) => "invalid_geometry",
            ServiceError::IllegalTransition { .. } => "illegal_transition",
            ServiceError::VersionConflict { .. } => "version_conflict",
            ServiceError::BadRequest(_) => "bad_request",
            ServiceError::Busy => "busy",
            ServiceError::Pipeline(_) | ServiceError::Store(_) | ServiceError::Io(_) | ServiceError::Export(_) | ServiceError::Json(_) => {
                "internal"
            }
        }
    }

    pub fn body(&self) -> ErrorBody {
        ErrorBody { code: self.code().to_string(), message: self.to_string() }
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ErrorBody {
    pub code: String,
    pub message: String,
}

pub type Result<T> = std::result::Result<T, ServiceError>;

//! Semi-automatic annotation cycle: manual seeds, model drafts, human
//! revisions, rounds of retraining and ground-truth export.

pub mod error;
pub mod export;
pub mod http;
pub mod model;
pub mod service;

pub use error::{ErrorBody, Result, ServiceError};
pub use model::*;
pub use service::{AdvanceConfig, AdvanceOutcome, Drafter, Service};

//! Facial chick-sexing pipeline: face localization, seven-point keypoints,
//! eye-line alignment, full/middle face cropping, binary gender
//! classification, grouped cross-validation and Grad-CAM++ saliency.
//!
//! Every stage is a pure function over images and small geometry types so
//! that batches can be processed data-parallel (see [`parallel`]).

pub mod backbones;
pub mod classifier;
pub mod cropping;
pub mod dataset;
pub mod detection;
pub mod error;
pub mod evaluation;
pub mod explain;
pub mod geometry;
pub mod keypoints;
pub mod nn;
pub mod parallel;
pub mod pipeline;
pub mod raster;
pub mod synth;

pub use error::{Error, Result};

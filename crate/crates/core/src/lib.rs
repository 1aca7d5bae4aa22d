//! Learned underwater image quality ranking and ranker-guided enhancement.

pub mod annotation;
pub mod checkpoint;
pub mod dataset;
pub mod error;
pub mod image;
pub mod metrics;
pub mod nn;
pub mod params;
pub mod ranking;
pub mod runconfig;
pub mod uie;
pub mod uranker;

pub use error::{Error, Result};
pub use image::ImageTensor;

//! Fine-grained anomaly detection with diffusion-based dissolving
//! transformations and contrastive learning.

pub mod contrastive;
pub mod datasets;
pub mod diffusion;
pub mod error;
pub mod harness;
pub mod image;
pub mod nn;
pub mod scoring;
pub mod transforms;

pub use error::{Error, Result};
pub use image::{Image, ImageBatch, ValueRange};

#![allow(clippy::needless_range_loop)]

//! RGBD salient-object detection.
//!
//! The pipeline has three stages: per-superpixel saliency feature vectors
//! (local/global color and depth contrast, color compactness, and contrast
//! to pseudo-background border regions), a small convolutional network that
//! fuses the packed feature patch into a salient/non-salient probability,
//! and a graph propagation step that spreads high-confidence labels along
//! color- and depth-consistent region neighborhoods into a spatially
//! coherent saliency map.
//!
//! Everything is deterministic for a fixed seed; see the `rsdf` CLI crate
//! for the command-line surface.

pub mod config;
pub mod error;
pub mod eval;
pub mod features;
pub mod imageio;
pub mod nn;
pub mod pipeline;
pub mod propagate;
pub mod superpixel;
pub mod synth;

pub use config::PipelineConfig;
pub use error::{Error, Result};

//! Anchor-free, NMS-free 3D point-cloud object detection on a BEV lattice.
//!
//! The pipeline: a pillar encoder turns a raw point cloud into a pseudo
//! image, a small convolutional backbone with upsampling necks feeds five
//! prediction heads (center heatmap, local offset, z, size, orientation),
//! and detections are read out by max-pool/AND peak extraction instead of
//! IoU-based NMS. Everything runs on CPU in f64 with analytic gradients,
//! deterministic per seed.

pub mod data_io;
pub mod encoder;
pub mod error;
pub mod geometry;
pub mod harness;
pub mod losses;
#[path = "net/mod.rs"]
pub mod net;
pub mod pipeline;
pub mod targets;

pub use error::{Error, Result};

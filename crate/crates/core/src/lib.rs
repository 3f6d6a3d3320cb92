//! Point-density-aware second-stage refinement for voxel-based LiDAR 3D
//! detectors: voxel point centroids, KDE-augmented RoI grid pooling,
//! grid-point self-attention with density positional encoding, density
//! confidence prediction and the training losses.

// `!(x > 0.0)` is used on purpose so NaN fails validation.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod attn;
pub mod centroid;
pub mod config;
pub mod error;
pub mod geometry;
pub mod gradsuite;
pub mod heads;
pub mod kde;
pub mod nn;
pub mod pcio;
pub mod pipeline;
pub mod roipool;
pub mod voxel;

pub use error::{Error, Result};

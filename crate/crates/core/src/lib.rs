//! One-stage 3D object detection from LIDAR point clouds.
//!
//! The pipeline: multi-scale pillar voxelization of a point cloud, a
//! point-set feature encoder per pillar, scattering into dense BEV
//! pseudo-images, a bottom-up aggregation backbone with a top-down
//! feature-pyramid decoder, anchor-based detection heads, and the full
//! target-encoding / loss / evaluation stack. Everything runs on CPU on
//! top of a small dense-tensor reverse-mode autodiff engine.

pub mod autodiff;
pub mod codec;
pub mod config;
pub mod eval;
pub mod geom;
pub mod kitti;
pub mod loss;
pub mod net;
pub mod synth;
pub mod train;
pub mod voxel;

/// Scalar type of the tensor engine. f64 by default; the `f32` feature
/// switches the whole network to single precision.
#[cfg(not(feature = "f32"))]
pub type Real = f64;
#[cfg(feature = "f32")]
pub type Real = f32;

//! Monocular SLAM toolkit built around capsule-network disparity prediction.
//!
//! The pipeline: a capsule network trained with left-right stereo
//! consistency predicts per-pixel disparity and uncertainty from a single
//! image; direct photometric alignment against keyframes estimates camera
//! pose; Lucas-Kanade optical flow seeds the alignment; an error-state EKF
//! smooths the pose stream; and uncertainty-weighted fusion maintains the
//! keyframe depth maps that back the exported global map.
//!
//! Data-parallel inner loops run on rayon under the default `rayon` feature
//! and fall back to sequential loops without it; both paths produce
//! bit-identical results.

pub mod autodiff;
pub mod camera;
pub mod capsnet;
pub mod dataset;
pub mod depth;
pub mod ekf;
pub mod error;
pub mod flow;
pub mod image;
pub mod io;
pub mod keypoints;
pub mod mapping;
pub mod metrics;
pub mod par;
pub mod pose;
pub mod se3;
pub mod slam;
pub mod synth;
pub mod warp;

pub use camera::{depth_to_disparity, disparity_to_depth, project, unproject, CameraIntrinsics};
pub use depth::{DepthMap, DisparityMap, UncertaintyMap};
pub use error::{Error, Result};
pub use image::ImageBuffer;
pub use se3::PoseSE3;

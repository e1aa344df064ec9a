//! HHP-Net: head pose (yaw, pitch, roll) regression with per-angle aleatoric
//! uncertainty from five facial keypoints, and a fast uncertainty-gated
//! "looking at each other" (LAEO) detector built on top of it.
//!
//! The crate is organised bottom-up:
//!
//! - [`geometry`]: Euler poses, rotation matrices, image-plane head direction, MAE.
//! - [`keypoints`]: raw keypoint sets, normalization, random keypoint dropping.
//! - [`autodiff`]: a small tape-based reverse-mode engine over dense tensors.
//! - [`model`]: the three-stream confidence-gated network.
//! - [`losses`]: the heteroscedastic loss and the MSE / classification+regression ablations.
//! - [`training`]: Adam and the mini-batch training loop with best-validation selection.
//! - [`evaluation`]: MAE, uncertainty/error curves, correlations, keypoint-count study.
//! - [`laeo`]: pairwise mutual-gaze scoring and PREC/REC/F/AP.
//! - [`synthetic`]: a parametric 3D head used as a ground-truth generator.
//! - [`io`] and [`report`]: file formats and structured reports used by the CLI.

pub mod autodiff;
pub mod error;
pub mod evaluation;
pub mod geometry;
pub mod io;
pub mod keypoints;
pub mod laeo;
pub mod losses;
pub mod model;
pub mod report;
pub mod synthetic;
pub mod training;

pub use error::{Error, Result};
pub use geometry::{EulerPose, PlaneVector};
pub use keypoints::{Keypoint, KeypointSet, NormalizedInput};
pub use model::{ModelConfig, ModelParams, PoseEstimate};

/// A labelled (or unlabelled) sample as stored in dataset files.
#[derive(Debug, Clone, PartialEq)]
pub struct Sample {
    pub id: String,
    pub keypoints: KeypointSet,
    pub pose: Option<EulerPose>,
}

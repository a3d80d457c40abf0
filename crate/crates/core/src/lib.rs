//! Viewpoint-repeatable keypoint labels and a depth-based repeatability
//! benchmark.
//!
//! The pipeline renders (or ingests) posed RGB-D frames, runs classical
//! corner detectors, paints their detections into a sparse voxel map,
//! derives per-frame labels from the painted map, and measures how well any
//! detector repeats under true viewpoint change by backprojecting detections
//! between depth frames.

// `!(x > 0.0)` is used on purpose: it also rejects NaN.
#![allow(clippy::neg_cmp_op_on_partial_ord, clippy::too_many_arguments)]

pub mod config;
pub mod dataset;
pub mod detectors;
pub mod error;
pub mod evaluator;
pub mod geometry;
pub mod imageproc;
pub mod labeler;
pub mod mesh;
pub mod pipeline;
pub mod raster;
pub mod synth;
pub mod voxelmap;

pub use error::{Error, Result};
pub use geometry::{CameraIntrinsics, DepthMap, Detection, Pose, Ray};
pub use raster::{GrayImage, Grid, ScoreGrid};

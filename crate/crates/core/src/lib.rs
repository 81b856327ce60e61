//! Desk-scale LiDAR-camera 3D detection.
//!
//! The pipeline turns a point cloud and multi-view camera features into a
//! shared bird's-eye-view (BEV) grid and predicts 3D boxes from it:
//!
//! - [`lidar`] voxelizes the point cloud, encodes voxels, and collapses the
//!   height axis into a LiDAR BEV.
//! - [`view`] lifts camera features into BEV through two paths: a ray stream
//!   that scatters each pixel along its viewing ray weighted by a predicted
//!   depth distribution, and a point stream that reads pixel features at
//!   LiDAR returns.
//! - [`predictor`] selects heatmap peaks as candidates, decodes general
//!   features, and builds separate classification and box queries from
//!   modality-specific features.
//! - [`losses`] and [`metrics`] supply training objectives (with Hungarian
//!   matching) and center-distance evaluation.
//!
//! Everything is differentiable through the small tape in [`numerics`], and
//! [`scene`] generates synthetic worlds with exact ground truth.

// NaN-rejecting `!(x > 0.0)` guards and index-heavy reference loops are
// deliberate.
#![allow(clippy::neg_cmp_op_on_partial_ord, clippy::needless_range_loop, clippy::too_many_arguments)]

pub mod check;
pub mod config;
mod error;
pub mod formats;
pub mod geometry;
pub mod hungarian;
pub mod lidar;
pub mod losses;
pub mod metrics;
pub mod model;
pub mod nn;
pub mod numerics;
pub mod oracle;
pub mod predictor;
pub mod scene;
pub mod training;
pub mod view;

pub use error::{Error, Result};
pub use geometry::{BevConfig, CameraParams, DepthBins};
pub use numerics::{Eager, Graph, Tape, Tensor};
pub use scene::{ObjectBox, PointCloud, Scene};

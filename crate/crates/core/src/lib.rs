//! Hybrid direct-indirect monocular SLAM core with a synthetic-world
//! evaluation harness.
//!
//! The estimation core tracks camera poses by jointly minimizing photometric
//! and geometric residuals over features that carry both a binary descriptor
//! and a pixel patch, maintains a seven-keyframe local window with
//! marginalization priors, keeps a unified inverse-depth global map with
//! early-adoption/late-fusion point re-use, and closes loops through a
//! Sim(3) RANSAC + pose-graph + global inverse-depth bundle adjustment
//! pipeline over a hybrid co-visibility/temporal graph.
//!
//! Everything is verifiable end to end against procedurally generated scenes
//! with ground truth; see the `examples/` directory for runnable entry
//! points and [`eval`] for the batch evaluation harness.

pub mod config;
pub mod eval;
pub mod frontend;
pub mod geometry;
pub mod hybridgraph;
pub mod img;
pub mod loopclosure;
pub mod mapping;
pub mod simworld;
pub mod tracking;

pub use config::RunConfig;
pub use geometry::{CameraModel, Pose, SimTransform};
pub use img::Image;

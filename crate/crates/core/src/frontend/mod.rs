//! Feature extraction with descriptor sharing: FAST corners plus
//! high-gradient pixels, each carrying both a 256-bit binary descriptor and
//! an 8-sample pixel patch, and the Hamming matcher used everywhere.

mod descriptor;
mod detect;
mod matching;
mod pyramid;

pub use descriptor::{extract_descriptor, extract_patch, BinaryDescriptor, PATCH_OFFSETS};
pub use detect::{sobel_magnitude, FeatureDetector};
pub use matching::{match_features, match_with_centers, FeatureMatch};
pub use pyramid::{build_pyramid, ImagePyramid};

use nalgebra::Vector2;
use thiserror::Error;

#[derive(Debug, Error)]
pub enum FrontendError {
    #[error("pyramid level {level} would be {w}x{h}, smaller than 8x8")]
    PyramidTooDeep { level: usize, w: usize, h: usize },
    #[error("pyramid needs at least one level")]
    NoLevels,
    #[error("empty image")]
    EmptyImage,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum FeatureKind {
    Corner,
    Gradient,
}

/// A detected image feature. Every feature carries both descriptor forms
/// regardless of kind, so any of them can serve photometric and geometric
/// residuals alike.
#[derive(Debug, Clone)]
pub struct Feature {
    pub uv: Vector2<f64>,
    pub kind: FeatureKind,
    pub descriptor: BinaryDescriptor,
    /// Host intensities on the 8-point residual pattern around `uv`.
    pub patch: [f32; 8],
    pub gradient_mag: f64,
}

/// A processed input frame: pyramid plus extracted features, ready for
/// tracking and mapping.
#[derive(Debug, Clone)]
pub struct Frame {
    pub index: usize,
    pub timestamp: f64,
    pub pyramid: ImagePyramid,
    pub features: Vec<Feature>,
}

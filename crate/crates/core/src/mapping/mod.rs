//! Local 7-keyframe window maintenance and the unified global map:
//! keyframe insertion, inverse-depth filtering, local photometric bundle
//! adjustment, marginalization with prior factors, global-point re-use
//! (early adoption / late fusion), and keyframe culling.

mod ba;
mod depth_filter;
mod keyframe;
mod landmark;
mod map;
mod mapper;
mod marginalize;

pub use ba::{local_photometric_ba, BaReport};
pub use depth_filter::{update_depth_filter, DepthFilterOutcome};
pub use keyframe::{Keyframe, KeyframeId, KeyframeState};
pub use landmark::{Landmark, LandmarkId, LandmarkStatus};
pub use map::{fuse_inverse_depth, MarginalizationPrior, WorldMap};
pub use mapper::{KeyframeOutcome, Mapper, MapperEvent};
pub use marginalize::schur_marginalize;

use thiserror::Error;

#[derive(Debug, Error)]
pub enum MappingError {
    #[error("non-positive variance {var}")]
    NonPositiveVariance { var: f64 },
    #[error("keyframe {0} not found")]
    UnknownKeyframe(u64),
}

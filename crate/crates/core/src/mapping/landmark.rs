use std::collections::BTreeMap;

use nalgebra::Vector2;
use serde::{Deserialize, Serialize};

use crate::frontend::BinaryDescriptor;
use crate::geometry::InverseDepthPoint;

use super::keyframe::KeyframeId;

#[derive(
    Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize,
)]
pub struct LandmarkId(pub u64);

impl std::fmt::Display for LandmarkId {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "lm{}", self.0)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LandmarkStatus {
    /// Depth still converging in the epipolar filter; not yet used by
    /// optimization.
    Candidate,
    /// Part of the local window optimization; patch present.
    Active,
    /// Marginalized into the global map; patch dropped, inverse depth and
    /// variance frozen until re-activated.
    Global,
}

/// A landmark anchored in its host keyframe with an inverse-depth estimate.
/// The same record serves the local window and the global map; only `status`
/// and the presence of the patch change across that boundary.
#[derive(Debug, Clone)]
pub struct Landmark {
    pub id: LandmarkId,
    pub host: KeyframeId,
    pub anchor: InverseDepthPoint,
    pub descriptor: BinaryDescriptor,
    /// Host intensities on the residual pattern; `None` exactly when global.
    pub patch: Option<[f32; 8]>,
    /// Keyframes observing this landmark and the observed pixel. Always
    /// contains the host.
    pub observations: BTreeMap<KeyframeId, Vector2<f64>>,
    pub status: LandmarkStatus,
    /// Successful depth-filter updates while a candidate.
    pub filter_updates: usize,
    /// Consecutive failed epipolar searches; candidates are dropped past the
    /// configured limit.
    pub outlier_count: usize,
}

impl Landmark {
    pub fn host_uv(&self) -> Vector2<f64> {
        Vector2::new(self.anchor.host_uv[0], self.anchor.host_uv[1])
    }

    /// Depth standard deviation implied by the inverse-depth variance.
    pub fn depth_sigma(&self) -> f64 {
        let id = self.anchor.idepth.max(1e-9);
        self.anchor.idepth_variance.sqrt() / (id * id)
    }

    pub fn memory_bytes(&self) -> usize {
        32 + std::mem::size_of::<InverseDepthPoint>()
            + self.patch.map_or(0, |_| 8 * std::mem::size_of::<f32>())
            + self.observations.len()
                * (std::mem::size_of::<KeyframeId>() + std::mem::size_of::<Vector2<f64>>())
    }
}

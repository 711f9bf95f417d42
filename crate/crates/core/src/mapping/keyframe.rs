use serde::{Deserialize, Serialize};

use crate::frontend::{Feature, ImagePyramid};
use crate::geometry::Pose;

#[derive(
    Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize,
)]
pub struct KeyframeId(pub u64);

impl std::fmt::Display for KeyframeId {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "kf{}", self.0)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum KeyframeState {
    Active,
    Marginalized,
    Culled,
}

/// A keyframe. Active keyframes hold their pyramid and feature patches;
/// marginalization frees the pyramid and patches, culling additionally frees
/// the feature list while the pose lives on as a graph control point.
#[derive(Debug, Clone)]
pub struct Keyframe {
    pub id: KeyframeId,
    /// World-from-camera pose.
    pub pose: Pose,
    pub pyramid: Option<ImagePyramid>,
    pub features: Vec<Feature>,
    /// False once feature patches have been dropped at marginalization.
    pub patches_present: bool,
    pub state: KeyframeState,
    pub timestamp: f64,
    pub frame_index: usize,
    /// Per-frame affine brightness (gain, bias) estimated during tracking.
    pub brightness: (f64, f64),
    /// Loop anchors are protected from culling and pinned during PGO.
    pub loop_anchor: bool,
}

impl Keyframe {
    /// Byte estimate of what this keyframe pins in memory: pyramid, binary
    /// descriptors, feature patches. The pyramid dominates for active
    /// keyframes.
    pub fn memory_bytes(&self) -> usize {
        let pyramid = self.pyramid.as_ref().map_or(0, |p| p.memory_bytes());
        let per_feature = 32  // 256-bit descriptor
            + 2 * std::mem::size_of::<f64>()
            + if self.patches_present {
                8 * std::mem::size_of::<f32>()
            } else {
                0
            };
        pyramid + self.features.len() * per_feature + std::mem::size_of::<Pose>()
    }

    pub fn is_active(&self) -> bool {
        self.state == KeyframeState::Active
    }
}

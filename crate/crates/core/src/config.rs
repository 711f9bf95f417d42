//! Run configuration: every module threshold in one serializable tree.
//!
//! All fields have defaults, unknown keys are rejected, and a config
//! round-trips losslessly through JSON.

use serde::{Deserialize, Serialize};
use std::fmt;
use std::path::PathBuf;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ScenarioKind {
    Loop,
    Exploration,
    TextureDeprived,
    SmallRoom,
}

impl fmt::Display for ScenarioKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let s = match self {
            ScenarioKind::Loop => "loop",
            ScenarioKind::Exploration => "exploration",
            ScenarioKind::TextureDeprived => "texture_deprived",
            ScenarioKind::SmallRoom => "small_room",
        };
        f.write_str(s)
    }
}

impl std::str::FromStr for ScenarioKind {
    type Err = String;
    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "loop" => Ok(ScenarioKind::Loop),
            "exploration" => Ok(ScenarioKind::Exploration),
            "texture_deprived" => Ok(ScenarioKind::TextureDeprived),
            "small_room" => Ok(ScenarioKind::SmallRoom),
            other => Err(format!("unknown scenario kind '{other}'")),
        }
    }
}

/// Pipeline operating mode.
///
/// `StrictVo` disables loop closure and global map-point re-use;
/// `VoWithReuse` disables loop closure only.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Mode {
    Slam,
    StrictVo,
    VoWithReuse,
}

impl fmt::Display for Mode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let s = match self {
            Mode::Slam => "slam",
            Mode::StrictVo => "strict_vo",
            Mode::VoWithReuse => "vo_with_reuse",
        };
        f.write_str(s)
    }
}

impl std::str::FromStr for Mode {
    type Err = String;
    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "slam" => Ok(Mode::Slam),
            "strict_vo" => Ok(Mode::StrictVo),
            "vo_with_reuse" => Ok(Mode::VoWithReuse),
            other => Err(format!("unknown mode '{other}'")),
        }
    }
}

impl Mode {
    pub fn loop_closure_enabled(&self) -> bool {
        matches!(self, Mode::Slam)
    }
    pub fn global_reuse_enabled(&self) -> bool {
        !matches!(self, Mode::StrictVo)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SimConfig {
    pub image_width: usize,
    pub image_height: usize,
    pub focal: f64,
    pub frame_rate: f64,
    /// Landmark seeds stamped onto the scene surfaces.
    pub landmark_seeds: usize,
    pub depth_min: f64,
    pub depth_max: f64,
    /// Largest translation allowed between consecutive trajectory poses.
    pub max_step: f64,
    /// Fraction of surfaces rendered near-constant in texture-deprived scenes.
    pub deprived_fraction: f64,
    pub background_intensity: f64,
}

impl Default for SimConfig {
    fn default() -> Self {
        Self {
            image_width: 320,
            image_height: 240,
            focal: 250.0,
            frame_rate: 20.0,
            landmark_seeds: 1200,
            depth_min: 0.5,
            depth_max: 50.0,
            max_step: 0.08,
            deprived_fraction: 0.5,
            background_intensity: 0.25,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct FrontendConfig {
    /// Total feature budget per frame, corners first.
    pub target_count: usize,
    pub pyramid_levels: usize,
    /// Initial FAST intensity threshold; adapted x0.7 / x1.3 across frames to
    /// track the corner share of the budget.
    pub fast_threshold: f64,
    pub fast_threshold_min: f64,
    pub fast_threshold_max: f64,
    /// Fraction of the budget reserved for corners when adapting the FAST
    /// threshold.
    pub corner_share: f64,
    /// Grid dimension used both for spatial distribution caps and for the
    /// per-cell dynamic gradient threshold.
    pub grid: usize,
    /// MAD multiplier in the per-cell gradient cutoff (median + k * MAD).
    pub gradient_mad_factor: f64,
    /// Extra features allowed per cell above `target_count / grid^2`.
    pub cell_slack: usize,
    /// Hamming acceptance threshold out of 256 bits.
    pub hamming_threshold: u32,
    /// Best/second-best ratio test.
    pub match_ratio: f64,
}

impl Default for FrontendConfig {
    fn default() -> Self {
        Self {
            target_count: 800,
            pyramid_levels: 3,
            fast_threshold: 0.08,
            fast_threshold_min: 0.03,
            fast_threshold_max: 0.5,
            corner_share: 0.25,
            grid: 8,
            gradient_mad_factor: 1.2,
            cell_slack: 8,
            hamming_threshold: 64,
            match_ratio: 0.8,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrackingConfig {
    /// Huber gamma for photometric residuals, intensity units.
    pub huber_photometric: f64,
    /// Huber gamma for geometric residuals, pixels.
    pub huber_geometric: f64,
    /// Floor on the photometric residual sigma (intensity).
    pub sigma_floor_photometric: f64,
    /// Floor on the geometric residual sigma (pixels).
    pub sigma_floor_geometric: f64,
    /// Minimum inlier matches before tracking reports low_matches.
    pub min_inliers: usize,
    /// Below this photometric point count the joint step degrades to
    /// geometric-only.
    pub min_photometric_points: usize,
    pub max_iterations_per_level: usize,
    pub step_norm_tolerance: f64,
    pub energy_decrease_tolerance: f64,
    pub lambda_init: f64,
    /// Pixel search radius when matching against the last frame.
    pub relative_search_radius: f64,
    /// Pixel search radius when matching window landmarks into the frame.
    pub window_search_radius: f64,
    /// Reprojection gate (px, level 0) that defines a geometric inlier.
    pub inlier_threshold_px: f64,
    /// Estimate per-frame affine brightness gain/bias alongside the pose.
    pub affine_brightness: bool,
}

impl Default for TrackingConfig {
    fn default() -> Self {
        Self {
            huber_photometric: 0.03,
            huber_geometric: 1.5,
            sigma_floor_photometric: 0.005,
            sigma_floor_geometric: 0.25,
            min_inliers: 15,
            min_photometric_points: 20,
            max_iterations_per_level: 15,
            step_norm_tolerance: 1e-7,
            energy_decrease_tolerance: 1e-9,
            lambda_init: 1e-4,
            relative_search_radius: 25.0,
            window_search_radius: 8.0,
            inlier_threshold_px: 3.0,
            affine_brightness: false,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct MappingConfig {
    /// Keyframes kept in the local window.
    pub window_size: usize,
    /// Mean optical flow (px) of tracked landmarks that triggers a keyframe.
    pub keyframe_flow_px: f64,
    /// Tracked-landmark ratio below which a keyframe is created.
    pub keyframe_tracked_ratio: f64,
    /// Candidates are promoted once sigma_d / mu drops below this after
    /// enough filter updates.
    pub promotion_sigma_ratio: f64,
    pub promotion_min_updates: usize,
    /// Epipolar-search failures tolerated before a candidate is dropped.
    pub candidate_outlier_limit: usize,
    /// SSD acceptance threshold for the epipolar patch search (per sample,
    /// intensity^2).
    pub epipolar_ssd_threshold: f64,
    /// Pixel noise assumed when propagating depth-filter variance.
    pub epipolar_pixel_sigma: f64,
    pub ba_iterations: usize,
    /// Shared-observation overlap above which a marginalized keyframe is
    /// culled.
    pub cull_overlap: f64,
    /// Other-keyframe observation count that makes a landmark redundant.
    pub cull_min_observers: usize,
    /// Search window (px) for early-adoption matching of global landmarks.
    pub reactivation_radius: f64,
    /// New candidates seeded per keyframe.
    pub candidates_per_keyframe: usize,
}

impl Default for MappingConfig {
    fn default() -> Self {
        Self {
            window_size: 7,
            keyframe_flow_px: 12.0,
            keyframe_tracked_ratio: 0.7,
            promotion_sigma_ratio: 0.1,
            promotion_min_updates: 3,
            candidate_outlier_limit: 5,
            epipolar_ssd_threshold: 0.0020,
            epipolar_pixel_sigma: 0.5,
            ba_iterations: 8,
            cull_overlap: 0.9,
            cull_min_observers: 3,
            reactivation_radius: 15.0,
            candidates_per_keyframe: 250,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct GraphConfig {
    /// Shared-landmark count required for a co-visibility edge.
    pub covis_threshold: u32,
    /// Co-visibility edges below this weight are ignored by the pose-graph
    /// optimization (essential-graph style filter).
    pub pgo_covis_min_weight: u32,
    /// Temporal edge information: 1/sigma^2 diagonals.
    pub temporal_sigma_translation: f64,
    pub temporal_sigma_rotation_deg: f64,
    pub temporal_sigma_scale: f64,
}

impl Default for GraphConfig {
    fn default() -> Self {
        Self {
            covis_threshold: 15,
            pgo_covis_min_weight: 100,
            temporal_sigma_translation: 0.01,
            temporal_sigma_rotation_deg: 0.5,
            temporal_sigma_scale: 0.01,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct LoopConfig {
    /// Vocabulary tree branching factor.
    pub vocab_branching: usize,
    /// Vocabulary tree depth.
    pub vocab_depth: usize,
    /// Keyframes whose descriptors train the per-run vocabulary.
    pub vocab_train_keyframes: usize,
    pub vocab_seed: u64,
    /// Minimum normalized similarity for a loop candidate.
    pub min_score: f64,
    pub ransac_iterations: usize,
    /// RANSAC inlier threshold as a fraction of the scene scale.
    pub ransac_inlier_fraction: f64,
    /// Nominal scene scale in meters.
    pub scene_scale: f64,
    pub ransac_seed: u64,
    /// Inlier matches required to accept a loop closure.
    pub min_loop_inliers: usize,
    pub pgo_iterations: usize,
    pub global_ba_iterations: usize,
}

impl Default for LoopConfig {
    fn default() -> Self {
        Self {
            vocab_branching: 8,
            vocab_depth: 3,
            vocab_train_keyframes: 5,
            vocab_seed: 0x5EED_B0A7,
            min_score: 0.15,
            ransac_iterations: 200,
            ransac_inlier_fraction: 0.05,
            scene_scale: 3.0,
            ransac_seed: 0x10_0B,
            min_loop_inliers: 25,
            pgo_iterations: 25,
            global_ba_iterations: 10,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct NoiseConfig {
    /// Additive Gaussian intensity noise on rendered images.
    pub image_sigma: f64,
    /// Pixel noise applied to synthesized observations.
    pub pixel_sigma: f64,
    /// Outlier fraction in synthesized observations.
    pub outlier_rate: f64,
    /// Magnitude of the per-frame odometry drift injected after tracking
    /// (tangent norm per frame); models accumulated odometry error so that
    /// loop correction has something to correct.
    pub odometry_drift: f64,
}

impl Default for NoiseConfig {
    fn default() -> Self {
        Self {
            image_sigma: 0.0,
            pixel_sigma: 0.0,
            outlier_rate: 0.0,
            odometry_drift: 0.0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub scenario: ScenarioKind,
    pub seed: u64,
    pub frames: usize,
    pub mode: Mode,
    /// Repetitions with derived seeds; medians are reported over these.
    pub runs: usize,
    pub deterministic: bool,
    pub out_dir: Option<PathBuf>,
    /// Dump rendered frames as PGM files for debugging.
    pub dump_frames: bool,
    pub noise: NoiseConfig,
    pub sim: SimConfig,
    pub frontend: FrontendConfig,
    pub tracking: TrackingConfig,
    pub mapping: MappingConfig,
    pub graph: GraphConfig,
    pub loopclosure: LoopConfig,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            scenario: ScenarioKind::Loop,
            seed: 7,
            frames: 400,
            mode: Mode::Slam,
            runs: 1,
            deterministic: true,
            out_dir: None,
            dump_frames: false,
            noise: NoiseConfig::default(),
            sim: SimConfig::default(),
            frontend: FrontendConfig::default(),
            tracking: TrackingConfig::default(),
            mapping: MappingConfig::default(),
            graph: GraphConfig::default(),
            loopclosure: LoopConfig::default(),
        }
    }
}

impl RunConfig {
    pub fn from_json(text: &str) -> Result<Self, serde_json::Error> {
        serde_json::from_str(text)
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("config serializes")
    }

    /// Seed for repetition `rep`, decorrelated by a splitmix64 step.
    pub fn derived_seed(&self, rep: usize) -> u64 {
        splitmix64(self.seed ^ (0x9E37_79B9_7F4A_7C15u64.wrapping_mul(rep as u64 + 1)))
    }
}

pub fn splitmix64(mut x: u64) -> u64 {
    x = x.wrapping_add(0x9E37_79B9_7F4A_7C15);
    let mut z = x;
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn json_round_trip_is_lossless() {
        let mut cfg = RunConfig::default();
        cfg.frames = 123;
        cfg.mode = Mode::VoWithReuse;
        cfg.noise.image_sigma = 0.01;
        cfg.tracking.huber_geometric = 2.0;
        let back = RunConfig::from_json(&cfg.to_json()).unwrap();
        assert_eq!(cfg, back);
    }

    #[test]
    fn unknown_keys_are_rejected() {
        let err = RunConfig::from_json(r#"{"scenario": "loop", "bogus_key": 1}"#);
        assert!(err.is_err());
    }

    #[test]
    fn empty_object_uses_defaults() {
        let cfg = RunConfig::from_json("{}").unwrap();
        assert_eq!(cfg, RunConfig::default());
    }

    #[test]
    fn derived_seeds_differ_per_repetition() {
        let cfg = RunConfig::default();
        let s: Vec<u64> = (0..10).map(|r| cfg.derived_seed(r)).collect();
        for i in 0..10 {
            for j in (i + 1)..10 {
                assert_ne!(s[i], s[j]);
            }
        }
    }
}

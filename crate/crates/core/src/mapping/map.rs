use std::collections::{BTreeMap, BTreeSet};
use std::io::Write;
use std::path::Path;

use nalgebra::{DMatrix, DVector, Vector2, Vector3};

use crate::geometry::{CameraModel, Pose};

use super::keyframe::{Keyframe, KeyframeId, KeyframeState};
use super::landmark::{Landmark, LandmarkId, LandmarkStatus};
use super::MappingError;

/// Gaussian product of two inverse-depth estimates.
///
/// The fused variance is strictly smaller than either input.
pub fn fuse_inverse_depth(
    a: (f64, f64),
    b: (f64, f64),
) -> Result<(f64, f64), MappingError> {
    let (mu1, var1) = a;
    let (mu2, var2) = b;
    if var1 <= 0.0 || var2 <= 0.0 {
        return Err(MappingError::NonPositiveVariance {
            var: var1.min(var2),
        });
    }
    let sum = var1 + var2;
    Ok(((var2 * mu1 + var1 * mu2) / sum, var1 * var2 / sum))
}

/// Marginalization prior over the current window keyframe poses: a quadratic
/// `0.5 d^T H d + b^T d` in the stacked left-multiplicative tangents `d` of
/// each camera-from-world pose relative to its stored linearization point
/// (first-estimate Jacobians).
#[derive(Debug, Clone, Default)]
pub struct MarginalizationPrior {
    pub keyframes: Vec<KeyframeId>,
    /// Camera-from-world linearization poses, one per keyframe.
    pub lin_points: Vec<Pose>,
    pub h: DMatrix<f64>,
    pub b: DVector<f64>,
}

impl MarginalizationPrior {
    pub fn is_empty(&self) -> bool {
        self.keyframes.is_empty()
    }

    pub fn dim(&self) -> usize {
        6 * self.keyframes.len()
    }

    /// Current tangent offset of each keyframe from its linearization point.
    pub fn offset(&self, map: &WorldMap) -> DVector<f64> {
        let mut d = DVector::zeros(self.dim());
        for (i, (id, lin)) in self.keyframes.iter().zip(self.lin_points.iter()).enumerate() {
            let cur_cw = map.keyframe(*id).expect("prior keyframe exists").pose.inverse();
            let delta = (cur_cw * lin.inverse())
                .log()
                .expect("prior offsets stay far from the log singularity");
            d.rows_mut(6 * i, 6).copy_from(&delta);
        }
        d
    }

    /// Smallest eigenvalue of the symmetrized information matrix; the prior
    /// must stay positive semidefinite.
    pub fn min_eigenvalue(&self) -> f64 {
        if self.is_empty() {
            return 0.0;
        }
        let sym = (&self.h + self.h.transpose()) * 0.5;
        sym.symmetric_eigen()
            .eigenvalues
            .iter()
            .cloned()
            .fold(f64::INFINITY, f64::min)
    }
}

/// The unified map: every keyframe and landmark the system has created, the
/// active window ordering, the marginalization prior, and the reverse
/// observation index.
#[derive(Debug, Clone)]
pub struct WorldMap {
    pub cam: CameraModel,
    keyframes: BTreeMap<KeyframeId, Keyframe>,
    landmarks: BTreeMap<LandmarkId, Landmark>,
    window: Vec<KeyframeId>,
    next_keyframe: u64,
    next_landmark: u64,
    pub prior: MarginalizationPrior,
    obs_index: BTreeMap<KeyframeId, BTreeSet<LandmarkId>>,
}

impl WorldMap {
    pub fn new(cam: CameraModel) -> Self {
        Self {
            cam,
            keyframes: BTreeMap::new(),
            landmarks: BTreeMap::new(),
            window: Vec::new(),
            next_keyframe: 0,
            next_landmark: 0,
            prior: MarginalizationPrior::default(),
            obs_index: BTreeMap::new(),
        }
    }

    pub fn insert_keyframe(&mut self, mut kf: Keyframe) -> KeyframeId {
        let id = KeyframeId(self.next_keyframe);
        self.next_keyframe += 1;
        kf.id = id;
        kf.state = KeyframeState::Active;
        self.window.push(id);
        self.keyframes.insert(id, kf);
        id
    }

    pub fn insert_landmark(&mut self, mut lm: Landmark) -> LandmarkId {
        let id = LandmarkId(self.next_landmark);
        self.next_landmark += 1;
        lm.id = id;
        debug_assert!(lm.observations.contains_key(&lm.host));
        for kf in lm.observations.keys() {
            self.obs_index.entry(*kf).or_default().insert(id);
        }
        self.landmarks.insert(id, lm);
        id
    }

    pub fn keyframe(&self, id: KeyframeId) -> Option<&Keyframe> {
        self.keyframes.get(&id)
    }

    pub fn keyframe_mut(&mut self, id: KeyframeId) -> Option<&mut Keyframe> {
        self.keyframes.get_mut(&id)
    }

    pub fn landmark(&self, id: LandmarkId) -> Option<&Landmark> {
        self.landmarks.get(&id)
    }

    pub fn landmark_mut(&mut self, id: LandmarkId) -> Option<&mut Landmark> {
        self.landmarks.get_mut(&id)
    }

    pub fn keyframes(&self) -> impl Iterator<Item = &Keyframe> {
        self.keyframes.values()
    }

    pub fn landmarks(&self) -> impl Iterator<Item = &Landmark> {
        self.landmarks.values()
    }

    pub fn landmark_ids(&self) -> Vec<LandmarkId> {
        self.landmarks.keys().copied().collect()
    }

    pub fn n_keyframes(&self) -> usize {
        self.keyframes.len()
    }

    pub fn window(&self) -> &[KeyframeId] {
        &self.window
    }

    pub fn newest_keyframe(&self) -> Option<KeyframeId> {
        self.window.last().copied()
    }

    pub fn in_window(&self, id: KeyframeId) -> bool {
        self.window.contains(&id)
    }

    /// Removes the oldest keyframe from the window ordering (the caller
    /// handles the marginalization math and state flips).
    pub fn pop_window_oldest(&mut self) -> Option<KeyframeId> {
        if self.window.is_empty() {
            None
        } else {
            Some(self.window.remove(0))
        }
    }

    pub fn add_observation(&mut self, lm: LandmarkId, kf: KeyframeId, pixel: Vector2<f64>) {
        if let Some(l) = self.landmarks.get_mut(&lm) {
            l.observations.insert(kf, pixel);
            self.obs_index.entry(kf).or_default().insert(lm);
        }
    }

    pub fn observed_landmarks(&self, kf: KeyframeId) -> impl Iterator<Item = LandmarkId> + '_ {
        self.obs_index.get(&kf).into_iter().flatten().copied()
    }

    /// World position of a landmark through its host anchor.
    pub fn landmark_world(&self, lm: &Landmark) -> Option<Vector3<f64>> {
        let host = self.keyframes.get(&lm.host)?;
        let p_h = self.cam.backproject(&lm.host_uv(), lm.anchor.idepth).ok()?;
        Some(host.pose.transform(&p_h))
    }

    /// Drops a landmark entirely (failed candidate), cleaning the index.
    pub fn remove_landmark(&mut self, id: LandmarkId) {
        if let Some(lm) = self.landmarks.remove(&id) {
            for kf in lm.observations.keys() {
                if let Some(set) = self.obs_index.get_mut(kf) {
                    set.remove(&id);
                }
            }
        }
    }

    /// Merges landmark `src` into `dst`: observation sets are unioned, the
    /// inverse depth is fused by the caller beforehand, and `src` is retired.
    pub fn merge_landmarks(&mut self, dst: LandmarkId, src: LandmarkId) {
        let Some(src_lm) = self.landmarks.remove(&src) else {
            return;
        };
        for (kf, px) in src_lm.observations {
            if let Some(set) = self.obs_index.get_mut(&kf) {
                set.remove(&src);
            }
            self.add_observation(dst, kf, px);
        }
    }

    pub fn landmarks_with_status(&self, status: LandmarkStatus) -> Vec<LandmarkId> {
        self.landmarks
            .values()
            .filter(|l| l.status == status)
            .map(|l| l.id)
            .collect()
    }

    /// Shared-landmark counts between `kf` and every other keyframe.
    pub fn shared_counts(&self, kf: KeyframeId) -> BTreeMap<KeyframeId, u32> {
        let mut counts: BTreeMap<KeyframeId, u32> = BTreeMap::new();
        for lm in self.observed_landmarks(kf) {
            if let Some(l) = self.landmarks.get(&lm) {
                for other in l.observations.keys() {
                    if *other != kf {
                        *counts.entry(*other).or_default() += 1;
                    }
                }
            }
        }
        counts
    }

    /// Immutable view of the active landmarks for the tracking activity.
    pub fn window_snapshot(&self) -> crate::tracking::WindowSnapshot {
        let mut points = Vec::new();
        for lm in self.landmarks.values() {
            if lm.status != LandmarkStatus::Active {
                continue;
            }
            let Some(patch) = lm.patch else { continue };
            let Some(host) = self.keyframes.get(&lm.host) else {
                continue;
            };
            let Some(world) = self.landmark_world(lm) else {
                continue;
            };
            points.push(crate::tracking::WindowPoint {
                id: lm.id,
                host_pose: host.pose,
                anchor_uv: lm.host_uv(),
                idepth: lm.anchor.idepth,
                idepth_variance: lm.anchor.idepth_variance,
                patch,
                descriptor: lm.descriptor,
                world,
            });
        }
        crate::tracking::WindowSnapshot { points }
    }

    /// Text dump of the map: one landmarks file, one keyframes file.
    pub fn dump(&self, landmarks_path: &Path, keyframes_path: &Path) -> std::io::Result<()> {
        let mut lf = std::io::BufWriter::new(std::fs::File::create(landmarks_path)?);
        writeln!(lf, "# id host u v idepth variance status")?;
        for lm in self.landmarks.values() {
            let status = match lm.status {
                LandmarkStatus::Candidate => "candidate",
                LandmarkStatus::Active => "active",
                LandmarkStatus::Global => "global",
            };
            writeln!(
                lf,
                "{} {} {:.4} {:.4} {:.6} {:.6e} {}",
                lm.id.0,
                lm.host.0,
                lm.anchor.host_uv[0],
                lm.anchor.host_uv[1],
                lm.anchor.idepth,
                lm.anchor.idepth_variance,
                status
            )?;
        }
        let mut kf_file = std::io::BufWriter::new(std::fs::File::create(keyframes_path)?);
        writeln!(kf_file, "# id state tx ty tz qx qy qz qw")?;
        for kf in self.keyframes.values() {
            let state = match kf.state {
                KeyframeState::Active => "active",
                KeyframeState::Marginalized => "marginalized",
                KeyframeState::Culled => "culled",
            };
            let t = kf.pose.translation();
            let q = kf.pose.rotation();
            writeln!(
                kf_file,
                "{} {} {:.6} {:.6} {:.6} {:.9} {:.9} {:.9} {:.9}",
                kf.id.0, state, t.x, t.y, t.z, q.i, q.j, q.k, q.w
            )?;
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;

    #[test]
    fn symmetric_fusion() {
        let (mu, var) = fuse_inverse_depth((0.5, 0.01), (0.5, 0.01)).unwrap();
        assert_relative_eq!(mu, 0.5);
        assert_relative_eq!(var, 0.005);
    }

    #[test]
    fn hand_computed_gaussian_product() {
        let (mu, var) = fuse_inverse_depth((1.0, 0.04), (2.0, 0.01)).unwrap();
        assert_relative_eq!(mu, 1.8, epsilon = 1e-12);
        assert_relative_eq!(var, 0.008, epsilon = 1e-12);
    }

    #[test]
    fn uninformative_factor_is_ignored() {
        let (mu, var) = fuse_inverse_depth((0.7, 0.02), (123.0, 1e9)).unwrap();
        assert_relative_eq!(mu, 0.7, epsilon = 1e-6);
        assert_relative_eq!(var, 0.02, epsilon = 1e-6);
    }

    #[test]
    fn non_positive_variance_errors() {
        assert!(fuse_inverse_depth((1.0, 0.0), (2.0, 0.01)).is_err());
        assert!(fuse_inverse_depth((1.0, 0.01), (2.0, -1.0)).is_err());
    }

    #[test]
    fn fusion_strictly_decreases_variance() {
        use rand::{Rng, SeedableRng};
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(17);
        for _ in 0..1000 {
            let a = (rng.random_range(-3.0..3.0), rng.random_range(1e-6..10.0));
            let b = (rng.random_range(-3.0..3.0), rng.random_range(1e-6..10.0));
            let (_, var) = fuse_inverse_depth(a, b).unwrap();
            assert!(var < a.1 && var < b.1);
        }
    }
}

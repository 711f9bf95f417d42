//! Per-frame camera pose estimation: indirect pre-alignment against the
//! last frame, then the joint scalarized photometric/geometric optimization,
//! plus the relocalization solve used for failure recovery.

mod residuals;
mod weights;

pub use residuals::{
    geometric_residual, photometric_residuals, point_pose_jacobian, projection_jacobian,
    robust_pnp, GeometricSample, PhotometricSample, WindowPoint, WindowSnapshot,
};
pub use weights::{depth_variance_weights, utility_weight};

use std::collections::BTreeMap;

use nalgebra::{DMatrix, DVector, Vector2};

use crate::config::{FrontendConfig, TrackingConfig};
use crate::frontend::{match_with_centers, Feature, Frame};
use crate::geometry::{huber, CameraModel, Pose};
use crate::mapping::LandmarkId;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum TrackStatus {
    Ok,
    LowMatches,
    Lost,
}

#[derive(Debug, Clone, Copy)]
pub struct TrackingState {
    /// World-from-camera pose of the current frame.
    pub current_pose: Pose,
    pub sigma_p2: f64,
    pub sigma_g2: f64,
    pub n_p: usize,
    pub n_g: usize,
    pub status: TrackStatus,
    /// Affine brightness (gain, bias) of the frame.
    pub brightness: (f64, f64),
}

#[derive(Debug, Clone)]
pub struct TrackOutput {
    pub state: TrackingState,
    /// Snapshot-point index -> matched feature index in the current frame.
    pub geo_matches: Vec<(usize, usize)>,
    /// All-kind descriptor matches at the final pose, for observation
    /// bookkeeping in mapping.
    pub obs_matches: Vec<(usize, usize)>,
    /// Mean pixel motion of the features matched against the last frame.
    pub mean_flow: f64,
    /// Fraction of last-frame landmark features re-found in this frame.
    pub tracked_ratio: f64,
    pub relative_inliers: usize,
}

struct LastFrame {
    pose: Pose,
    features: Vec<Feature>,
    /// Landmark association per feature index.
    associations: Vec<Option<LandmarkId>>,
}

/// Tracks one frame at a time against an immutable window snapshot.
pub struct Tracker {
    cfg: TrackingConfig,
    frontend_cfg: FrontendConfig,
    cam: CameraModel,
    last: Option<LastFrame>,
    /// Constant-velocity motion model: previous world-from-camera step.
    velocity: Pose,
}

impl Tracker {
    pub fn new(cfg: TrackingConfig, frontend_cfg: FrontendConfig, cam: CameraModel) -> Self {
        Self {
            cfg,
            frontend_cfg,
            cam,
            last: None,
            velocity: Pose::identity(),
        }
    }

    pub fn cam(&self) -> &CameraModel {
        &self.cam
    }

    /// Seeds the tracker with a reference frame of known pose (bootstrap or
    /// relocalization).
    pub fn prime(
        &mut self,
        frame: &Frame,
        pose: Pose,
        associations: Vec<Option<LandmarkId>>,
    ) {
        debug_assert_eq!(frame.features.len(), associations.len());
        self.last = Some(LastFrame {
            pose,
            features: frame.features.clone(),
            associations,
        });
        self.velocity = Pose::identity();
    }

    /// Replaces the stored last-frame pose/associations after mapping
    /// refined them.
    pub fn refresh_last(&mut self, pose: Pose, associations: Vec<Option<LandmarkId>>) {
        if let Some(last) = self.last.as_mut() {
            last.pose = pose;
            if associations.len() == last.features.len() {
                last.associations = associations;
            }
        }
    }

    pub fn has_reference(&self) -> bool {
        self.last.is_some()
    }

    /// Step (1): feature matching and relative pose estimation against the
    /// last frame. Returns the camera-from-world init, the per-match flow,
    /// and the inlier count.
    pub fn estimate_relative_pose(
        &self,
        frame: &Frame,
        snapshot: &WindowSnapshot,
    ) -> Option<(Pose, f64, usize, usize)> {
        let last = self.last.as_ref()?;
        let predicted = last.pose.compose(&self.velocity);
        let predicted_cw = predicted.inverse();

        let by_id: BTreeMap<LandmarkId, usize> = snapshot
            .points
            .iter()
            .enumerate()
            .map(|(i, p)| (p.id, i))
            .collect();

        // Last-frame features that carry a live landmark.
        let mut query: Vec<Feature> = Vec::new();
        let mut centers: Vec<Vector2<f64>> = Vec::new();
        let mut worlds: Vec<nalgebra::Vector3<f64>> = Vec::new();
        let mut last_uv: Vec<Vector2<f64>> = Vec::new();
        for (fi, assoc) in last.associations.iter().enumerate() {
            let Some(lm) = assoc else { continue };
            let Some(&pi) = by_id.get(lm) else { continue };
            let point = &snapshot.points[pi];
            let center = self
                .cam
                .project(&predicted_cw.transform(&point.world))
                .unwrap_or(last.features[fi].uv);
            query.push(last.features[fi].clone());
            centers.push(center);
            worlds.push(point.world);
            last_uv.push(last.features[fi].uv);
        }
        if query.is_empty() {
            return None;
        }
        let matches = match_with_centers(
            &query,
            &centers,
            &frame.features,
            Some(self.cfg.relative_search_radius),
            &self.frontend_cfg,
        );
        if matches.len() < 3 {
            return Some((predicted_cw, 0.0, matches.len(), query.len()));
        }
        // Solve on corner matches when enough are present; gradient features
        // carry integer-grid positions and degrade the estimate.
        let corner_obs: Vec<(nalgebra::Vector3<f64>, Vector2<f64>)> = matches
            .iter()
            .filter(|m| frame.features[m.reference].kind == crate::frontend::FeatureKind::Corner)
            .map(|m| (worlds[m.query], frame.features[m.reference].uv))
            .collect();
        let observations: Vec<(nalgebra::Vector3<f64>, Vector2<f64>)> =
            if corner_obs.len() >= self.cfg.min_inliers {
                corner_obs
            } else {
                matches
                    .iter()
                    .map(|m| (worlds[m.query], frame.features[m.reference].uv))
                    .collect()
            };
        let (pose_cw, _inliers, count) = robust_pnp(
            &observations,
            &self.cam,
            &predicted_cw,
            self.cfg.huber_geometric,
            self.cfg.inlier_threshold_px,
            12,
        );
        let flow = matches
            .iter()
            .map(|m| (frame.features[m.reference].uv - last_uv[m.query]).norm())
            .sum::<f64>()
            / matches.len() as f64;
        Some((pose_cw, flow, count, query.len()))
    }

    /// Step (2): the scalarized multi-objective optimization over both
    /// residual types, coarse to fine.
    pub fn joint_optimize(
        &self,
        frame: &Frame,
        snapshot: &WindowSnapshot,
        init_cam_from_world: &Pose,
    ) -> (Pose, TrackingState, Vec<(usize, usize)>) {
        let cfg = &self.cfg;
        let cam0 = self.cam;
        let mut pose = *init_cam_from_world;
        let mut brightness = (1.0, 0.0);

        // Geometric matches are established once at level 0 with the init
        // pose and reused across levels.
        let geo_matches = self.match_window_points(frame, snapshot, &pose);
        let variances: Vec<f64> = snapshot.points.iter().map(|p| p.idepth_variance).collect();
        let w_var = depth_variance_weights(&variances);

        let mut status = TrackStatus::Ok;
        let mut sigma_p2 = cfg.sigma_floor_photometric.powi(2);
        let mut sigma_g2 = cfg.sigma_floor_geometric.powi(2);
        let mut n_p_out = 0usize;
        let mut n_g_out = 0usize;

        let n_levels = frame.pyramid.n_levels();
        let state_dim = if cfg.affine_brightness { 8 } else { 6 };

        'levels: for level in (0..n_levels).rev() {
            let cam_l = cam0.at_level(level);
            let img_l = frame.pyramid.level(level);
            let mut lambda = cfg.lambda_init;

            for _iter in 0..cfg.max_iterations_per_level {
                let eval = self.evaluate(
                    frame, snapshot, &geo_matches, &w_var, &pose, brightness, level, &cam_l,
                    img_l,
                );
                let Some(eval) = eval else {
                    status = TrackStatus::Lost;
                    break 'levels;
                };
                sigma_p2 = eval.sigma_p2;
                sigma_g2 = eval.sigma_g2;
                n_p_out = eval.n_p;
                n_g_out = eval.n_g;
                if !eval.energy.is_finite() {
                    status = TrackStatus::Lost;
                    break 'levels;
                }
                if eval.h.nrows() == 0 {
                    break;
                }

                // Damped Gauss-Newton step with energy re-checked under the
                // same weights; retries inflate lambda.
                let mut accepted = false;
                let mut step_norm = 0.0;
                let mut new_energy = eval.energy;
                for _try in 0..6 {
                    let mut damped = eval.h.clone();
                    for i in 0..state_dim {
                        damped[(i, i)] += lambda * eval.h[(i, i)].max(1e-12);
                    }
                    let Some(delta) = damped.cholesky().map(|c| c.solve(&eval.b)) else {
                        lambda *= 10.0;
                        continue;
                    };
                    let pose_try =
                        Pose::exp(&nalgebra::Vector6::from_iterator(delta.iter().take(6).cloned()))
                            .compose(&pose);
                    let brightness_try = if cfg.affine_brightness {
                        (brightness.0 + delta[6], brightness.1 + delta[7])
                    } else {
                        brightness
                    };
                    let e_try = self.energy_only(
                        frame, snapshot, &geo_matches, &w_var, &pose_try, brightness_try,
                        level, &cam_l, img_l, &eval,
                    );
                    if e_try.is_finite() && e_try <= eval.energy {
                        pose = pose_try;
                        brightness = brightness_try;
                        step_norm = delta.norm();
                        new_energy = e_try;
                        lambda = (lambda * 0.5).max(1e-9);
                        accepted = true;
                        break;
                    }
                    lambda *= 10.0;
                }
                if !accepted {
                    break;
                }
                let rel_decrease = (eval.energy - new_energy) / eval.energy.max(1e-300);
                if step_norm < cfg.step_norm_tolerance
                    || rel_decrease < cfg.energy_decrease_tolerance
                {
                    break;
                }
            }
        }

        if n_p_out == 0 && n_g_out == 0 {
            status = TrackStatus::Lost;
        }

        let state = TrackingState {
            current_pose: pose.inverse(),
            sigma_p2,
            sigma_g2,
            n_p: n_p_out,
            n_g: n_g_out,
            status,
            brightness,
        };
        (pose, state, geo_matches)
    }

    /// Full tracking step. The returned pose is world-from-camera.
    pub fn track(&mut self, frame: &Frame, snapshot: &WindowSnapshot) -> TrackOutput {
        let Some((init_cw, flow, rel_inliers, rel_total)) =
            self.estimate_relative_pose(frame, snapshot)
        else {
            return self.failed_output(TrackStatus::Lost);
        };
        if rel_inliers < self.cfg.min_inliers {
            return self.failed_output(TrackStatus::LowMatches);
        }
        let (pose_cw, state, geo_matches) = self.joint_optimize(frame, snapshot, &init_cw);
        if state.status != TrackStatus::Ok {
            return TrackOutput {
                state,
                geo_matches: Vec::new(),
                obs_matches: Vec::new(),
                mean_flow: flow,
                tracked_ratio: 0.0,
                relative_inliers: rel_inliers,
            };
        }
        let obs_matches = self.match_window_points_raw(frame, snapshot, &pose_cw);

        let new_pose = pose_cw.inverse();
        let tracked_ratio = if rel_total > 0 {
            rel_inliers as f64 / rel_total as f64
        } else {
            0.0
        };

        // Commit the frame as the new reference and update the motion model.
        let mut associations = vec![None; frame.features.len()];
        for (pi, fi) in &obs_matches {
            associations[*fi] = Some(snapshot.points[*pi].id);
        }
        if let Some(last) = self.last.as_ref() {
            self.velocity = last.pose.inverse().compose(&new_pose);
        }
        self.last = Some(LastFrame {
            pose: new_pose,
            features: frame.features.clone(),
            associations,
        });

        TrackOutput {
            state,
            geo_matches,
            obs_matches,
            mean_flow: flow,
            tracked_ratio,
            relative_inliers: rel_inliers,
        }
    }

    fn failed_output(&self, status: TrackStatus) -> TrackOutput {
        let pose = self
            .last
            .as_ref()
            .map(|l| l.pose.compose(&self.velocity))
            .unwrap_or_else(Pose::identity);
        TrackOutput {
            state: TrackingState {
                current_pose: pose,
                sigma_p2: self.cfg.sigma_floor_photometric.powi(2),
                sigma_g2: self.cfg.sigma_floor_geometric.powi(2),
                n_p: 0,
                n_g: 0,
                status,
                brightness: (1.0, 0.0),
            },
            geo_matches: Vec::new(),
            obs_matches: Vec::new(),
            mean_flow: 0.0,
            tracked_ratio: 0.0,
            relative_inliers: 0,
        }
    }

    /// Descriptor matching of window landmarks into the frame around their
    /// projections under the init pose.
    ///
    /// Geometric residuals are anchored to corner detections when enough are
    /// available: gradient features drift along edges and snap to the pixel
    /// grid, which biases the reprojection term. Deprived frames with too
    /// few corner matches fall back to all feature kinds.
    fn match_window_points(
        &self,
        frame: &Frame,
        snapshot: &WindowSnapshot,
        cam_from_world: &Pose,
    ) -> Vec<(usize, usize)> {
        let all = self.match_window_points_raw(frame, snapshot, cam_from_world);
        let corners: Vec<(usize, usize)> = all
            .iter()
            .filter(|(_, fi)| frame.features[*fi].kind == crate::frontend::FeatureKind::Corner)
            .copied()
            .collect();
        if corners.len() >= self.cfg.min_inliers {
            corners
        } else {
            all
        }
    }

    fn match_window_points_raw(
        &self,
        frame: &Frame,
        snapshot: &WindowSnapshot,
        cam_from_world: &Pose,
    ) -> Vec<(usize, usize)> {
        let mut query: Vec<Feature> = Vec::new();
        let mut centers: Vec<Vector2<f64>> = Vec::new();
        let mut indices: Vec<usize> = Vec::new();
        for (pi, point) in snapshot.points.iter().enumerate() {
            let p_c = cam_from_world.transform(&point.world);
            if p_c.z <= self.cam.z_min {
                continue;
            }
            let Ok(uv) = self.cam.project(&p_c) else { continue };
            if !self.cam.contains(&uv, 2.0) {
                continue;
            }
            query.push(Feature {
                uv,
                kind: crate::frontend::FeatureKind::Corner,
                descriptor: point.descriptor,
                patch: point.patch,
                gradient_mag: 0.0,
            });
            centers.push(uv);
            indices.push(pi);
        }
        match_with_centers(
            &query,
            &centers,
            &frame.features,
            Some(self.cfg.window_search_radius),
            &self.frontend_cfg,
        )
        .into_iter()
        .map(|m| (indices[m.query], m.reference))
        .collect()
    }

    #[allow(clippy::too_many_arguments)]
    fn evaluate(
        &self,
        frame: &Frame,
        snapshot: &WindowSnapshot,
        geo_matches: &[(usize, usize)],
        w_var: &[f64],
        cam_from_world: &Pose,
        brightness: (f64, f64),
        level: usize,
        cam_l: &CameraModel,
        img_l: &crate::img::Image,
    ) -> Option<Evaluation> {
        let cfg = &self.cfg;
        let mut photo: Vec<PhotometricSample> = Vec::new();
        let mut photo_points = 0usize;
        for (pi, point) in snapshot.points.iter().enumerate() {
            let produced = photometric_residuals(
                pi,
                point,
                &self.cam,
                cam_l,
                img_l,
                cam_from_world,
                brightness,
                level,
                &mut photo,
            );
            if produced > 0 {
                photo_points += 1;
            }
        }
        let mut geo: Vec<GeometricSample> = Vec::new();
        for (pi, fi) in geo_matches {
            if let Some(s) = geometric_residual(
                *pi,
                &snapshot.points[*pi].world,
                &frame.features[*fi].uv,
                &self.cam,
                cam_from_world,
            ) {
                geo.push(s);
            }
        }

        let use_photo = photo_points >= cfg.min_photometric_points;
        let n_p = photo_points;
        let n_g = geo.len();
        if (!use_photo || n_p == 0) && n_g == 0 {
            return None;
        }

        // Per-iteration robust scale: 1.4826 * MAD, floored.
        let sigma_p = robust_sigma(
            photo.iter().map(|s| s.residual.abs()),
            cfg.sigma_floor_photometric,
        );
        let sigma_g = robust_sigma(
            geo.iter().map(|s| s.residual.norm()),
            cfg.sigma_floor_geometric,
        );
        let n_g_inliers = geo
            .iter()
            .filter(|s| s.residual.norm() < cfg.inlier_threshold_px)
            .count();
        let k_util = utility_weight(level, n_g_inliers);

        let state_dim = if cfg.affine_brightness { 8 } else { 6 };
        let mut h = DMatrix::<f64>::zeros(state_dim, state_dim);
        let mut b = DVector::<f64>::zeros(state_dim);
        let mut energy = 0.0;

        if use_photo && n_p > 0 {
            let norm = 1.0 / (n_p as f64 * sigma_p * sigma_p);
            for s in &photo {
                let (cost, hw) = huber(s.residual, cfg.huber_photometric);
                let wv = w_var[s.point_index];
                let cut = if s.residual.abs() > 4.0 * sigma_p { 0.0 } else { 1.0 };
                let w = hw * wv * cut * norm;
                energy += cost * wv * cut * norm;
                if w == 0.0 {
                    continue;
                }
                let mut j = DVector::zeros(state_dim);
                for i in 0..6 {
                    j[i] = s.jacobian[i];
                }
                if cfg.affine_brightness {
                    j[6] = s.brightness_jacobian[0];
                    j[7] = s.brightness_jacobian[1];
                }
                h.ger(w, &j, &j, 1.0);
                b.axpy(-w * s.residual, &j, 1.0);
            }
        }
        if n_g > 0 {
            let norm = k_util / (n_g as f64 * sigma_g * sigma_g);
            for s in &geo {
                let rnorm = s.residual.norm();
                let (cost, hw) = huber(rnorm, cfg.huber_geometric);
                let wv = w_var[s.point_index];
                let cut = if rnorm > 4.0 * sigma_g { 0.0 } else { 1.0 };
                let w = hw * wv * cut * norm;
                energy += cost * wv * cut * norm;
                if w == 0.0 {
                    continue;
                }
                let mut j = DMatrix::zeros(2, state_dim);
                j.view_mut((0, 0), (2, 6)).copy_from(&s.jacobian);
                h += j.transpose() * &j * w;
                b -= j.transpose() * s.residual * w;
            }
        }

        Some(Evaluation {
            energy,
            h,
            b,
            sigma_p2: sigma_p * sigma_p,
            sigma_g2: sigma_g * sigma_g,
            n_p,
            n_g,
            use_photo,
            k_util,
        })
    }

    /// Energy of a candidate state under the weights of `reference`
    /// (same sigma, K, and point counts), for the accept/reject decision.
    #[allow(clippy::too_many_arguments)]
    fn energy_only(
        &self,
        frame: &Frame,
        snapshot: &WindowSnapshot,
        geo_matches: &[(usize, usize)],
        w_var: &[f64],
        cam_from_world: &Pose,
        brightness: (f64, f64),
        level: usize,
        cam_l: &CameraModel,
        img_l: &crate::img::Image,
        reference: &Evaluation,
    ) -> f64 {
        let cfg = &self.cfg;
        let sigma_p = reference.sigma_p2.sqrt();
        let sigma_g = reference.sigma_g2.sqrt();
        let mut energy = 0.0;
        if reference.use_photo && reference.n_p > 0 {
            let norm = 1.0 / (reference.n_p as f64 * reference.sigma_p2);
            let mut photo = Vec::new();
            for (pi, point) in snapshot.points.iter().enumerate() {
                photometric_residuals(
                    pi, point, &self.cam, cam_l, img_l, cam_from_world, brightness, level,
                    &mut photo,
                );
            }
            for s in &photo {
                let (cost, _) = huber(s.residual, cfg.huber_photometric);
                let cut = if s.residual.abs() > 4.0 * sigma_p { 0.0 } else { 1.0 };
                energy += cost * w_var[s.point_index] * cut * norm;
            }
        }
        if reference.n_g > 0 {
            let norm = reference.k_util / (reference.n_g as f64 * reference.sigma_g2);
            for (pi, fi) in geo_matches {
                if let Some(s) = geometric_residual(
                    *pi,
                    &snapshot.points[*pi].world,
                    &frame.features[*fi].uv,
                    &self.cam,
                    cam_from_world,
                ) {
                    let rnorm = s.residual.norm();
                    let (cost, _) = huber(rnorm, cfg.huber_geometric);
                    let cut = if rnorm > 4.0 * sigma_g { 0.0 } else { 1.0 };
                    energy += cost * w_var[s.point_index] * cut * norm;
                }
            }
        }
        energy
    }
}

struct Evaluation {
    energy: f64,
    h: DMatrix<f64>,
    b: DVector<f64>,
    sigma_p2: f64,
    sigma_g2: f64,
    n_p: usize,
    n_g: usize,
    use_photo: bool,
    k_util: f64,
}

/// 1.4826 * median absolute value, floored. The residual distributions here
/// are zero-centered, so the absolute values stand in for deviations.
fn robust_sigma(values: impl Iterator<Item = f64>, floor: f64) -> f64 {
    let mut v: Vec<f64> = values.collect();
    if v.is_empty() {
        return floor;
    }
    v.sort_by(|a, b| a.partial_cmp(b).unwrap());
    (1.4826 * v[v.len() / 2]).max(floor)
}

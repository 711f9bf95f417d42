use std::collections::{BTreeMap, BTreeSet};

use nalgebra::{DMatrix, DVector, Matrix1x6, Vector2};

use crate::config::{GraphConfig, MappingConfig, Mode, TrackingConfig};
use crate::frontend::{Frame, PATCH_OFFSETS};
use crate::geometry::{huber, InverseDepthPoint, Matrix7, Pose, SimTransform};
use crate::hybridgraph::HybridGraph;
use crate::tracking::{point_pose_jacobian, projection_jacobian, TrackOutput};

use super::ba::local_photometric_ba;
use super::depth_filter::{update_depth_filter, DepthFilterOutcome};
use super::keyframe::{Keyframe, KeyframeId, KeyframeState};
use super::landmark::{Landmark, LandmarkId, LandmarkStatus};
use super::map::WorldMap;
use super::marginalize::schur_marginalize;

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum MapperEvent {
    KeyframeCreated(KeyframeId),
    Marginalized(KeyframeId),
    Culled(Vec<KeyframeId>),
    Reactivated(usize),
    Fused(usize),
}

#[derive(Debug, Default)]
pub struct KeyframeOutcome {
    pub events: Vec<MapperEvent>,
    pub created: Option<KeyframeId>,
    /// Refined pose of the newest keyframe after local BA.
    pub refined_pose: Option<Pose>,
    /// Landmark association per feature index of the processed frame.
    pub associations: Vec<Option<LandmarkId>>,
}

/// Owns the map-maintenance pass that runs after tracking each frame.
pub struct Mapper {
    cfg: MappingConfig,
    tracking_cfg: TrackingConfig,
    graph_cfg: GraphConfig,
    /// Geometric match count at the last keyframe, for the collapse check.
    n_g_at_last_keyframe: usize,
}

impl Mapper {
    pub fn new(cfg: MappingConfig, tracking_cfg: TrackingConfig, graph_cfg: GraphConfig) -> Self {
        Self {
            cfg,
            tracking_cfg,
            graph_cfg,
            n_g_at_last_keyframe: 0,
        }
    }

    pub fn temporal_information(&self) -> Matrix7 {
        let mut info = Matrix7::zeros();
        let st = 1.0 / self.graph_cfg.temporal_sigma_translation.powi(2);
        let sr = 1.0 / self.graph_cfg.temporal_sigma_rotation_deg.to_radians().powi(2);
        let ss = 1.0 / self.graph_cfg.temporal_sigma_scale.powi(2);
        for i in 0..3 {
            info[(i, i)] = st;
            info[(3 + i, 3 + i)] = sr;
        }
        info[(6, 6)] = ss;
        info
    }

    /// Keyframe-need heuristic: large mean flow, dropped tracked ratio, or a
    /// collapse of the geometric match count since the last keyframe.
    pub fn needs_keyframe(&self, track: &TrackOutput) -> bool {
        if track.mean_flow > self.cfg.keyframe_flow_px {
            return true;
        }
        if track.tracked_ratio < self.cfg.keyframe_tracked_ratio {
            return true;
        }
        let collapse_floor =
            (self.n_g_at_last_keyframe as f64 * 0.4).max(self.tracking_cfg.min_inliers as f64);
        (track.state.n_g as f64) < collapse_floor
    }

    /// Non-keyframe path: only the candidate depth filters are updated.
    pub fn update_candidates(
        &self,
        map: &mut WorldMap,
        frame: &Frame,
        frame_pose: &Pose,
    ) -> usize {
        let cam = map.cam;
        let candidates = map.landmarks_with_status(LandmarkStatus::Candidate);
        let mut updated = 0;
        let mut dropped: Vec<LandmarkId> = Vec::new();
        for id in candidates {
            let host_pose = {
                let lm = map.landmark(id).unwrap();
                match map.keyframe(lm.host) {
                    Some(kf) => kf.pose,
                    None => continue,
                }
            };
            let lm = map.landmark_mut(id).unwrap();
            match update_depth_filter(
                lm,
                &host_pose,
                frame.pyramid.level(0),
                frame_pose,
                &cam,
                &self.cfg,
            ) {
                DepthFilterOutcome::Updated => updated += 1,
                DepthFilterOutcome::Exhausted => dropped.push(id),
                _ => {}
            }
        }
        for id in dropped {
            map.remove_landmark(id);
        }
        updated
    }

    /// Full keyframe path: insertion, early adoption, candidate activation,
    /// local BA, graph update, culling, marginalization, late fusion.
    #[allow(clippy::too_many_arguments)]
    pub fn process_keyframe(
        &mut self,
        map: &mut WorldMap,
        graph: &mut HybridGraph,
        frame: &Frame,
        track: &TrackOutput,
        snapshot_ids: &[LandmarkId],
        mode: Mode,
    ) -> KeyframeOutcome {
        let mut outcome = KeyframeOutcome::default();
        let pose = track.state.current_pose;
        let prev_kf = map.newest_keyframe();

        // Insert the keyframe (window may transiently reach size + 1).
        let kf = Keyframe {
            id: KeyframeId(0),
            pose,
            pyramid: Some(frame.pyramid.clone()),
            features: frame.features.clone(),
            patches_present: true,
            state: KeyframeState::Active,
            timestamp: frame.timestamp,
            frame_index: frame.index,
            brightness: track.state.brightness,
            loop_anchor: false,
        };
        let kf_id = map.insert_keyframe(kf);
        graph.register(kf_id, KeyframeState::Active);
        outcome.created = Some(kf_id);
        outcome.events.push(MapperEvent::KeyframeCreated(kf_id));
        self.n_g_at_last_keyframe = track.state.n_g;

        // Record observations of tracked window landmarks in this keyframe.
        let mut associations: Vec<Option<LandmarkId>> = vec![None; frame.features.len()];
        for (pi, fi) in &track.obs_matches {
            let lm_id = snapshot_ids[*pi];
            map.add_observation(lm_id, kf_id, frame.features[*fi].uv);
            associations[*fi] = Some(lm_id);
        }

        // Temporal chain edge from the previous keyframe.
        if let Some(prev) = prev_kf {
            let prev_pose = map.keyframe(prev).unwrap().pose;
            let rel = SimTransform::from_pose(&(prev_pose.inverse() * pose));
            let _ = graph.add_temporal_edge(prev, kf_id, rel, self.temporal_information());
        }

        // Early adoption: match global landmarks into the fresh keyframe.
        if mode.global_reuse_enabled() {
            let reactivated = self.reactivate_early_adoption(map, kf_id, &mut associations);
            if reactivated > 0 {
                outcome.events.push(MapperEvent::Reactivated(reactivated));
            }
        }

        // Run the depth filters against the keyframe too, then promote
        // converged candidates.
        self.update_candidates(map, frame, &pose);
        self.activate_candidates(map);

        // Fresh candidates from unassociated features.
        self.spawn_candidates(map, kf_id, frame, &associations);

        // Local photometric bundle adjustment.
        let ba = local_photometric_ba(map, &self.cfg, self.tracking_cfg.huber_photometric);
        if ba.aborted {
            log::warn!("local BA aborted at keyframe {kf_id}");
        }
        outcome.refined_pose = Some(map.keyframe(kf_id).unwrap().pose);

        // Refresh the temporal measurement with post-BA poses.
        if let Some(prev) = prev_kf {
            let prev_pose = map.keyframe(prev).unwrap().pose;
            let cur_pose = map.keyframe(kf_id).unwrap().pose;
            graph.refresh_temporal_measurement(
                prev,
                kf_id,
                SimTransform::from_pose(&(prev_pose.inverse() * cur_pose)),
            );
        }
        graph.update_covisibility(kf_id, map);

        // Keyframe culling, then marginalization down to the window size.
        let culled = self.cull_keyframes(map, graph);
        if !culled.is_empty() {
            outcome.events.push(MapperEvent::Culled(culled));
        }
        while map.window().len() > self.cfg.window_size {
            if let Some(victim) = self.marginalize(map, graph) {
                outcome.events.push(MapperEvent::Marginalized(victim));
            } else {
                break;
            }
        }

        // Late fusion of active landmarks with matching global records.
        if mode.global_reuse_enabled() {
            let fused = self.reactivate_late_fusion(map, graph, kf_id);
            if fused > 0 {
                outcome.events.push(MapperEvent::Fused(fused));
            }
        }

        outcome.associations = associations;
        outcome
    }

    /// Global landmarks whose descriptor matches a feature of the new
    /// keyframe (searched in a window around their projection) re-enter the
    /// active map: fresh patch from the new keyframe, stored inverse depth
    /// and variance preserved exactly.
    fn reactivate_early_adoption(
        &self,
        map: &mut WorldMap,
        kf_id: KeyframeId,
        associations: &mut [Option<LandmarkId>],
    ) -> usize {
        let cam = map.cam;
        let (kf_pose, features) = {
            let kf = map.keyframe(kf_id).unwrap();
            (kf.pose, kf.features.clone())
        };
        let cam_from_world = kf_pose.inverse();

        // Bucket features for the radius search.
        let radius = self.cfg.reactivation_radius;
        let mut buckets: BTreeMap<(i64, i64), Vec<usize>> = BTreeMap::new();
        for (fi, f) in features.iter().enumerate() {
            let key = (
                (f.uv.x / radius).floor() as i64,
                (f.uv.y / radius).floor() as i64,
            );
            buckets.entry(key).or_default().push(fi);
        }

        let mut reactivated = 0;
        for lm_id in map.landmarks_with_status(LandmarkStatus::Global) {
            let (world, descriptor, host_pose, host_uv, idepth) = {
                let lm = map.landmark(lm_id).unwrap();
                let Some(world) = map.landmark_world(lm) else { continue };
                let host = map.keyframe(lm.host).unwrap();
                (world, lm.descriptor, host.pose, lm.host_uv(), lm.anchor.idepth)
            };
            let p_c = cam_from_world.transform(&world);
            if p_c.z <= cam.z_min {
                continue;
            }
            let Ok(uv) = cam.project(&p_c) else { continue };
            if !cam.contains(&uv, 3.0) {
                continue;
            }
            let cell = ((uv.x / radius).floor() as i64, (uv.y / radius).floor() as i64);
            let mut best: Option<(u32, usize)> = None;
            for dy in -1..=1 {
                for dx in -1..=1 {
                    let Some(list) = buckets.get(&(cell.0 + dx, cell.1 + dy)) else {
                        continue;
                    };
                    for &fi in list {
                        if associations[fi].is_some() {
                            continue;
                        }
                        if (features[fi].uv - uv).norm() > radius {
                            continue;
                        }
                        let d = descriptor.hamming(&features[fi].descriptor);
                        if d <= 64 && best.map(|(bd, _)| d < bd).unwrap_or(true) {
                            best = Some((d, fi));
                        }
                    }
                }
            }
            let Some((_, fi)) = best else { continue };

            // Fresh patch: the host pattern warped into the new keyframe.
            let cur_from_host = cam_from_world.compose(&host_pose);
            let img = map.keyframe(kf_id).unwrap().pyramid.as_ref().unwrap().level(0);
            let mut patch = [0.0f32; 8];
            let mut ok = true;
            for (k, (du, dv)) in PATCH_OFFSETS.iter().enumerate() {
                let uv_h = Vector2::new(host_uv.x + du, host_uv.y + dv);
                let Ok(x_h) = cam.backproject(&uv_h, idepth) else {
                    ok = false;
                    break;
                };
                let p = cur_from_host.transform(&x_h);
                if p.z <= cam.z_min {
                    ok = false;
                    break;
                }
                let Ok(uv_k) = cam.project(&p) else {
                    ok = false;
                    break;
                };
                if !img.in_bounds(uv_k.x, uv_k.y) {
                    ok = false;
                    break;
                }
                patch[k] = img.sample(uv_k.x, uv_k.y) as f32;
            }
            if !ok {
                continue;
            }
            let feature_uv = features[fi].uv;
            let lm = map.landmark_mut(lm_id).unwrap();
            lm.status = LandmarkStatus::Active;
            lm.patch = Some(patch);
            map.add_observation(lm_id, kf_id, feature_uv);
            associations[fi] = Some(lm_id);
            reactivated += 1;
        }
        reactivated
    }

    /// Candidates become active once the depth filter has converged.
    fn activate_candidates(&self, map: &mut WorldMap) {
        for id in map.landmarks_with_status(LandmarkStatus::Candidate) {
            let lm = map.landmark_mut(id).unwrap();
            let sigma_ratio = lm.anchor.idepth_variance.sqrt() / lm.anchor.idepth.max(1e-9);
            if lm.filter_updates >= self.cfg.promotion_min_updates
                && sigma_ratio < self.cfg.promotion_sigma_ratio
            {
                lm.status = LandmarkStatus::Active;
            }
        }
    }

    /// Seeds new candidate landmarks from unassociated features, strongest
    /// gradients first, initialized at the median active inverse depth with
    /// a wide variance.
    fn spawn_candidates(
        &self,
        map: &mut WorldMap,
        kf_id: KeyframeId,
        frame: &Frame,
        associations: &[Option<LandmarkId>],
    ) {
        let cam_from_world = map.keyframe(kf_id).unwrap().pose.inverse();
        let mut depths: Vec<f64> = Vec::new();
        for lm_id in map.landmarks_with_status(LandmarkStatus::Active) {
            let lm = map.landmark(lm_id).unwrap();
            if let Some(w) = map.landmark_world(lm) {
                let z = cam_from_world.transform(&w).z;
                if z > 0.1 {
                    depths.push(z);
                }
            }
        }
        depths.sort_by(|a, b| a.partial_cmp(b).unwrap());
        let median_depth = depths.get(depths.len() / 2).copied().unwrap_or(3.0);
        let init_idepth = 1.0 / median_depth;
        let init_var = (0.5 * init_idepth).powi(2);

        let mut order: Vec<usize> = (0..frame.features.len())
            .filter(|fi| associations[*fi].is_none())
            .collect();
        order.sort_by(|a, b| {
            frame.features[*b]
                .gradient_mag
                .partial_cmp(&frame.features[*a].gradient_mag)
                .unwrap()
                .then(a.cmp(b))
        });
        for fi in order.into_iter().take(self.cfg.candidates_per_keyframe) {
            let f = &frame.features[fi];
            let mut obs = BTreeMap::new();
            obs.insert(kf_id, f.uv);
            map.insert_landmark(Landmark {
                id: LandmarkId(0),
                host: kf_id,
                anchor: InverseDepthPoint::new([f.uv.x, f.uv.y], init_idepth, init_var),
                descriptor: f.descriptor,
                patch: Some(f.patch),
                observations: obs,
                status: LandmarkStatus::Candidate,
                filter_updates: 0,
                outlier_count: 0,
            });
        }
    }

    /// Marginalizes the oldest window keyframe: its exclusive landmarks go
    /// global (patches dropped), the Schur complement of its states lands in
    /// the prior over the remaining window poses, and the keyframe itself is
    /// frozen as `Marginalized`.
    pub fn marginalize(&self, map: &mut WorldMap, graph: &mut HybridGraph) -> Option<KeyframeId> {
        let window: Vec<KeyframeId> = map.window().to_vec();
        if window.len() <= self.cfg.window_size {
            return None;
        }
        let victim = window[0];
        let remaining: Vec<KeyframeId> = window[1..].to_vec();
        let newest = *window.last().unwrap();
        let cam = map.cam;

        // Partition the victim-hosted landmarks.
        let mut going_global: Vec<LandmarkId> = Vec::new();
        let mut staying: Vec<LandmarkId> = Vec::new();
        for lm_id in map.landmark_ids() {
            let lm = map.landmark(lm_id).unwrap();
            if lm.host != victim {
                continue;
            }
            match lm.status {
                LandmarkStatus::Active => {
                    if lm.observations.contains_key(&newest) {
                        staying.push(lm_id);
                    } else {
                        going_global.push(lm_id);
                    }
                }
                LandmarkStatus::Candidate => {
                    // Unconverged candidates anchored in the departing
                    // keyframe are dropped with it.
                    going_global.push(lm_id);
                }
                LandmarkStatus::Global => {}
            }
        }

        // Linearized system over [victim pose | remaining poses | exclusive
        // idepths], from the photometric residuals hosted in the victim.
        let n_poses = 1 + remaining.len();
        let going_active: Vec<LandmarkId> = going_global
            .iter()
            .filter(|id| map.landmark(**id).unwrap().status == LandmarkStatus::Active)
            .copied()
            .collect();
        let n = 6 * n_poses + going_active.len();
        let mut h = DMatrix::<f64>::zeros(n, n);
        let mut b = DVector::<f64>::zeros(n);
        let victim_pose_cw = map.keyframe(victim).unwrap().pose.inverse();
        let pose_index = |kf: KeyframeId| -> Option<usize> {
            if kf == victim {
                Some(0)
            } else {
                remaining.iter().position(|k| *k == kf).map(|i| i + 1)
            }
        };
        for (li, lm_id) in going_active.iter().enumerate() {
            let lm = map.landmark(*lm_id).unwrap();
            let Some(patch) = lm.patch else { continue };
            let host_uv = lm.host_uv();
            let id = lm.anchor.idepth.max(1e-4);
            for target in &remaining {
                if !lm.observations.contains_key(target) && lm.observations.len() > 1 {
                    continue;
                }
                let Some(target_kf) = map.keyframe(*target) else { continue };
                let Some(img) = target_kf.pyramid.as_ref().map(|p| p.level(0)) else {
                    continue;
                };
                let t_cw = target_kf.pose.inverse();
                let cur_from_host = t_cw.compose(&victim_pose_cw.inverse());
                let ti = pose_index(*target).unwrap();
                for (k, (du, dv)) in PATCH_OFFSETS.iter().enumerate() {
                    let uv_h = Vector2::new(host_uv.x + du, host_uv.y + dv);
                    let ray = cam.ray(&uv_h);
                    let x_h = ray / id;
                    let p_c = cur_from_host.transform(&x_h);
                    if p_c.z <= cam.z_min {
                        continue;
                    }
                    let Ok(uv) = cam.project(&p_c) else { continue };
                    if uv.x < 1.0
                        || uv.y < 1.0
                        || uv.x > (img.width() - 2) as f64
                        || uv.y > (img.height() - 2) as f64
                    {
                        continue;
                    }
                    let res = img.sample(uv.x, uv.y) - patch[k] as f64;
                    let (_, w) = huber(res, self.tracking_cfg.huber_photometric);
                    let (gx, gy) = img.sample_gradient(uv.x, uv.y);
                    let grad = nalgebra::Matrix1x2::new(gx, gy);
                    let j_point = grad * projection_jacobian(&cam, &p_c);
                    let j_target: Matrix1x6<f64> = j_point * point_pose_jacobian(&p_c);
                    let rot = cur_from_host.rotation().to_rotation_matrix();
                    let mut jh = nalgebra::Matrix3x6::zeros();
                    jh.fixed_view_mut::<3, 3>(0, 0).copy_from(&(-rot.matrix()));
                    jh.fixed_view_mut::<3, 3>(0, 3)
                        .copy_from(&(rot.matrix() * crate::geometry::skew(&x_h)));
                    let j_host: Matrix1x6<f64> = j_point * jh;
                    let j_id = (j_point * (cur_from_host.rotation() * (-ray / (id * id))))[(0, 0)];

                    let mut idx: Vec<(usize, f64)> = Vec::with_capacity(13);
                    for a in 0..6 {
                        idx.push((a, j_host[(0, a)]));
                        idx.push((6 * ti + a, j_target[(0, a)]));
                    }
                    idx.push((6 * n_poses + li, j_id));
                    for (ia, ja) in &idx {
                        b[*ia] -= w * ja * res;
                        for (ib, jb) in &idx {
                            h[(*ia, *ib)] += w * ja * jb;
                        }
                    }
                }
            }
        }

        // Fold the existing prior, re-expressed around the current poses.
        if !map.prior.is_empty() {
            let d = map.prior.offset(map);
            let g = &map.prior.h * &d + &map.prior.b;
            for (pi, kf_i) in map.prior.keyframes.iter().enumerate() {
                let Some(ii) = pose_index(*kf_i) else { continue };
                for a in 0..6 {
                    b[6 * ii + a] += g[6 * pi + a];
                    for (pj, kf_j) in map.prior.keyframes.iter().enumerate() {
                        if let Some(jj) = pose_index(*kf_j) {
                            for c in 0..6 {
                                h[(6 * ii + a, 6 * jj + c)] +=
                                    map.prior.h[(6 * pi + a, 6 * pj + c)];
                            }
                        }
                    }
                }
            }
        }

        // Schur out the victim pose and the departing idepths.
        let marg: Vec<usize> = (0..6).chain(6 * n_poses..n).collect();
        let (h_keep, b_keep, _) = schur_marginalize(&h, &b, &marg);

        // PSD guard.
        let sym = (&h_keep + h_keep.transpose()) * 0.5;
        let min_eig = sym
            .clone()
            .symmetric_eigen()
            .eigenvalues
            .iter()
            .cloned()
            .fold(f64::INFINITY, f64::min);
        let h_keep = if min_eig < -1e-9 {
            log::warn!("marginalization prior lost PSD (min eig {min_eig:.3e}); clamping");
            sym + DMatrix::identity(h_keep.nrows(), h_keep.ncols()) * (-min_eig + 1e-12)
        } else {
            sym
        };

        map.prior.keyframes = remaining.clone();
        map.prior.lin_points = remaining
            .iter()
            .map(|k| map.keyframe(*k).unwrap().pose.inverse())
            .collect();
        map.prior.h = h_keep;
        map.prior.b = b_keep;

        // State flips: landmarks first, then the keyframe.
        for lm_id in going_global {
            let lm = map.landmark_mut(lm_id).unwrap();
            if lm.status == LandmarkStatus::Candidate {
                map.remove_landmark(lm_id);
            } else {
                lm.status = LandmarkStatus::Global;
                lm.patch = None;
            }
        }
        let _ = staying;
        let popped = map.pop_window_oldest();
        debug_assert_eq!(popped, Some(victim));
        {
            let kf = map.keyframe_mut(victim).unwrap();
            kf.state = KeyframeState::Marginalized;
            kf.pyramid = None;
            kf.patches_present = false;
            for f in kf.features.iter_mut() {
                f.patch = [0.0; 8];
            }
        }
        graph.set_state(victim, KeyframeState::Marginalized);

        // Refresh the temporal chain measurements through the victim with
        // its final (locally optimized) pose.
        let victim_pose = map.keyframe(victim).unwrap().pose;
        if victim.0 > 0 {
            let prev = KeyframeId(victim.0 - 1);
            if let Some(prev_kf) = map.keyframe(prev) {
                graph.refresh_temporal_measurement(
                    prev,
                    victim,
                    SimTransform::from_pose(&(prev_kf.pose.inverse() * victim_pose)),
                );
            }
        }
        let next = KeyframeId(victim.0 + 1);
        if let Some(next_kf) = map.keyframe(next) {
            graph.refresh_temporal_measurement(
                victim,
                next,
                SimTransform::from_pose(&(victim_pose.inverse() * next_kf.pose)),
            );
        }

        Some(victim)
    }

    /// Marginalized keyframes whose observed landmarks are redundantly
    /// covered elsewhere are culled: pyramid and patches freed, pose kept as
    /// a temporal-chain control point. Active-window and loop-anchor
    /// keyframes are never culled.
    pub fn cull_keyframes(&self, map: &mut WorldMap, graph: &mut HybridGraph) -> Vec<KeyframeId> {
        let mut culled = Vec::new();
        let kf_ids: Vec<KeyframeId> = map.keyframes().map(|k| k.id).collect();
        for kf_id in kf_ids {
            {
                let kf = map.keyframe(kf_id).unwrap();
                if kf.state != KeyframeState::Marginalized || kf.loop_anchor {
                    continue;
                }
            }
            let observed: Vec<LandmarkId> = map.observed_landmarks(kf_id).collect();
            if observed.is_empty() {
                continue;
            }
            let redundant = observed
                .iter()
                .filter(|lm_id| {
                    map.landmark(**lm_id)
                        .map(|lm| {
                            lm.observations
                                .keys()
                                .filter(|k| **k != kf_id)
                                .count()
                                >= self.cfg.cull_min_observers
                        })
                        .unwrap_or(false)
                })
                .count();
            if (redundant as f64) / (observed.len() as f64) > self.cfg.cull_overlap {
                let kf = map.keyframe_mut(kf_id).unwrap();
                kf.state = KeyframeState::Culled;
                kf.features = Vec::new();
                kf.pyramid = None;
                kf.patches_present = false;
                graph.set_state(kf_id, KeyframeState::Culled);
                culled.push(kf_id);
            }
        }
        culled
    }

    /// Late fusion: active landmarks matched to a global record whose
    /// projected depth agrees within two sigma are merged; the global record
    /// retires into the active one.
    fn reactivate_late_fusion(
        &self,
        map: &mut WorldMap,
        graph: &mut HybridGraph,
        kf_id: KeyframeId,
    ) -> usize {
        let cam = map.cam;
        let kf_pose = map.keyframe(kf_id).unwrap().pose;
        let cam_from_world = kf_pose.inverse();

        // Active landmarks visible in the new keyframe, bucketed by
        // projection.
        struct ActiveEntry {
            id: LandmarkId,
            uv: Vector2<f64>,
        }
        let mut active: Vec<ActiveEntry> = Vec::new();
        for lm_id in map.landmarks_with_status(LandmarkStatus::Active) {
            let lm = map.landmark(lm_id).unwrap();
            let Some(world) = map.landmark_world(lm) else { continue };
            let p_c = cam_from_world.transform(&world);
            if p_c.z <= cam.z_min {
                continue;
            }
            let Ok(uv) = cam.project(&p_c) else { continue };
            if cam.contains(&uv, 2.0) {
                active.push(ActiveEntry { id: lm_id, uv });
            }
        }
        if active.is_empty() {
            return 0;
        }

        let mut fused = 0;
        let mut touched: BTreeSet<KeyframeId> = BTreeSet::new();
        for g_id in map.landmarks_with_status(LandmarkStatus::Global) {
            let (g_world, g_desc, g_anchor, g_host) = {
                let g = map.landmark(g_id).unwrap();
                let Some(w) = map.landmark_world(g) else { continue };
                (w, g.descriptor, g.anchor, g.host)
            };
            let p_c = cam_from_world.transform(&g_world);
            if p_c.z <= cam.z_min {
                continue;
            }
            let Ok(g_uv) = cam.project(&p_c) else { continue };
            if !cam.contains(&g_uv, 2.0) {
                continue;
            }
            let mut best: Option<(u32, usize)> = None;
            for (ai, a) in active.iter().enumerate() {
                if (a.uv - g_uv).norm() > self.cfg.reactivation_radius {
                    continue;
                }
                let lm = map.landmark(a.id).unwrap();
                let d = g_desc.hamming(&lm.descriptor);
                if d <= 64 && best.map(|(bd, _)| d < bd).unwrap_or(true) {
                    best = Some((d, ai));
                }
            }
            let Some((_, ai)) = best else { continue };
            let a_id = active[ai].id;
            if a_id == g_id {
                continue;
            }

            // Depth gate in the active landmark's host frame: the projected
            // global depth must sit within two sigma of the local depth.
            let (a_host_pose, a_anchor) = {
                let a = map.landmark(a_id).unwrap();
                (map.keyframe(a.host).unwrap().pose, a.anchor)
            };
            let g_in_a_host = a_host_pose.inverse().transform(&g_world);
            if g_in_a_host.z <= cam.z_min {
                continue;
            }
            let local_depth = 1.0 / a_anchor.idepth.max(1e-9);
            let sigma_d = a_anchor.idepth_variance.sqrt() / a_anchor.idepth.max(1e-9).powi(2);
            if (g_in_a_host.z - local_depth).abs() > 2.0 * sigma_d {
                continue;
            }

            // Transport the global inverse depth into the active host frame
            // and fuse.
            let g_idepth_local = 1.0 / g_in_a_host.z;
            let ratio = g_idepth_local / g_anchor.idepth.max(1e-9);
            let g_var_local = g_anchor.idepth_variance * ratio * ratio;
            if let Ok((mu, var)) = super::map::fuse_inverse_depth(
                (a_anchor.idepth, a_anchor.idepth_variance),
                (g_idepth_local, g_var_local.max(1e-12)),
            ) {
                {
                    let a = map.landmark_mut(a_id).unwrap();
                    a.anchor.idepth = mu;
                    a.anchor.idepth_variance = var;
                }
                for kf in map.landmark(g_id).unwrap().observations.keys() {
                    touched.insert(*kf);
                }
                map.merge_landmarks(a_id, g_id);
                let _ = g_host;
                fused += 1;
            }
        }
        if fused > 0 {
            touched.insert(kf_id);
            for kf in touched {
                graph.update_covisibility(kf, map);
            }
        }
        fused
    }
}

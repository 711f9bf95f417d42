//! Place recognition, Sim(3) loop error estimation, old-side correction,
//! Sim(3) pose-graph optimization, and the global inverse-depth bundle
//! adjustment that refines the result.

mod database;
mod global_ba;
mod pgo;
mod sim3_solve;
mod vocabulary;

pub use database::KeyframeDatabase;
pub use global_ba::{global_inverse_depth_ba, GlobalBaReport};
pub use pgo::{pose_graph_optimize, PgoEdge, PgoResult};
pub use sim3_solve::{estimate_sim3_horn, ransac_sim3};
pub use vocabulary::{build_vocabulary, Vocabulary};

use std::collections::{BTreeMap, BTreeSet};

use nalgebra::Vector3;
use serde::Serialize;
use thiserror::Error;

use crate::config::LoopConfig;
use crate::frontend::BinaryDescriptor;
use crate::geometry::SimTransform;
use crate::hybridgraph::{EdgeKind, HybridGraph};
use crate::mapping::{KeyframeId, LandmarkId, LandmarkStatus, WorldMap};

#[derive(Debug, Error)]
pub enum LoopError {
    #[error("vocabulary corpus too small: {got} descriptors, need {needed}")]
    CorpusTooSmall { got: usize, needed: usize },
    #[error("pose graph has no fixed keyframes")]
    NoFixedKeyframes,
    #[error("disconnected pose graph: {0}")]
    DisconnectedComponent(String),
}

/// A detected loop candidate with its 3D-3D matches.
#[derive(Debug, Clone)]
pub struct LoopCandidate {
    pub candidate: KeyframeId,
    pub current: KeyframeId,
    pub score: f64,
    /// (global landmark, active landmark, old-side world, current-side world)
    pub matches: Vec<(LandmarkId, LandmarkId, Vector3<f64>, Vector3<f64>)>,
}

/// Record of one applied loop closure, serialized into the event log.
#[derive(Debug, Clone, Serialize)]
pub struct LoopEvent {
    pub frame_index: usize,
    pub current_keyframe: u64,
    pub candidate_keyframe: u64,
    pub score: f64,
    pub inliers: usize,
    pub corrective_scale: f64,
    pub corrective_rotation_deg: f64,
    pub corrective_translation: [f64; 3],
    pub corrected_keyframes: usize,
    pub pgo_initial_chi2: f64,
    pub pgo_final_chi2: f64,
    pub global_ba_rmse_px: f64,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub pre_ate: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub post_ate: Option<f64>,
}

/// The loop-closure activity: owns the keyframe database and applies the
/// detection -> Sim(3) -> correction -> PGO -> global BA pipeline.
pub struct LoopCloser {
    cfg: LoopConfig,
    pgo_covis_min_weight: u32,
    pub database: KeyframeDatabase,
    events: Vec<LoopEvent>,
}

impl LoopCloser {
    pub fn new(cfg: LoopConfig, pgo_covis_min_weight: u32) -> Self {
        Self {
            cfg,
            pgo_covis_min_weight,
            database: KeyframeDatabase::new(),
            events: Vec::new(),
        }
    }

    pub fn events(&self) -> &[LoopEvent] {
        &self.events
    }

    /// Training hook: every fresh keyframe contributes descriptors until the
    /// vocabulary exists.
    pub fn observe_keyframe(&mut self, descriptors: &[BinaryDescriptor]) {
        self.database.observe_training(descriptors, &self.cfg);
    }

    /// Marginalized keyframes enter the queryable database.
    pub fn index_keyframe(&mut self, id: KeyframeId, descriptors: &[BinaryDescriptor]) {
        self.database.add_keyframe(id, descriptors);
    }

    /// Best-scoring database keyframe not co-visibility-connected to the
    /// query, subject to the absolute score floor and to beating every
    /// connected score (relative gate).
    pub fn detect_candidate(
        &self,
        map: &WorldMap,
        graph: &HybridGraph,
        current: KeyframeId,
    ) -> Option<(KeyframeId, f64)> {
        let kf = map.keyframe(current)?;
        let descriptors: Vec<BinaryDescriptor> =
            kf.features.iter().map(|f| f.descriptor).collect();
        let vector = self.database.query_vector(&descriptors)?;
        let scored = self.database.query(&vector);
        if scored.is_empty() {
            return None;
        }
        let mut best_connected: f64 = 0.0;
        let mut best_free: Option<(KeyframeId, f64)> = None;
        for (kf_id, score) in &scored {
            if *kf_id == current {
                continue;
            }
            if graph.covis_connected(*kf_id, current) {
                best_connected = best_connected.max(*score);
            } else if best_free.is_none() {
                best_free = Some((*kf_id, *score));
            }
        }
        let (cand, score) = best_free?;
        if score >= self.cfg.min_score && score > best_connected {
            Some((cand, score))
        } else {
            None
        }
    }

    /// 3D-3D descriptor matching between the landmarks observed in the two
    /// loop-end neighborhoods.
    fn gather_matches(
        &self,
        map: &WorldMap,
        old_side: &BTreeSet<KeyframeId>,
        new_side: &BTreeSet<KeyframeId>,
    ) -> Vec<(LandmarkId, LandmarkId, Vector3<f64>, Vector3<f64>)> {
        let collect = |kfs: &BTreeSet<KeyframeId>, want_global: bool| {
            let mut ids: BTreeSet<LandmarkId> = BTreeSet::new();
            for kf in kfs {
                for lm in map.observed_landmarks(*kf) {
                    ids.insert(lm);
                }
            }
            let mut out: Vec<(LandmarkId, BinaryDescriptor, Vector3<f64>)> = Vec::new();
            for id in ids {
                let Some(lm) = map.landmark(id) else { continue };
                let is_global = lm.status == LandmarkStatus::Global;
                if is_global != want_global {
                    continue;
                }
                let Some(world) = map.landmark_world(lm) else { continue };
                out.push((id, lm.descriptor, world));
            }
            out
        };
        let old = collect(old_side, true);
        let new = collect(new_side, false);
        if old.is_empty() || new.is_empty() {
            return Vec::new();
        }

        // Mutual best Hamming matching, no spatial constraint.
        let mut forward: Vec<Option<(usize, u32)>> = vec![None; old.len()];
        for (oi, (_, od, _)) in old.iter().enumerate() {
            let mut best = (u32::MAX, usize::MAX);
            for (ni, (_, nd, _)) in new.iter().enumerate() {
                let d = od.hamming(nd);
                if d < best.0 {
                    best = (d, ni);
                }
            }
            if best.0 <= 64 {
                forward[oi] = Some((best.1, best.0));
            }
        }
        let mut backward: Vec<Option<usize>> = vec![None; new.len()];
        for (ni, (_, nd, _)) in new.iter().enumerate() {
            let mut best = (u32::MAX, usize::MAX);
            for (oi, (_, od, _)) in old.iter().enumerate() {
                let d = nd.hamming(od);
                if d < best.0 {
                    best = (d, oi);
                }
            }
            if best.0 <= 64 {
                backward[ni] = Some(best.1);
            }
        }
        let mut out = Vec::new();
        for (oi, f) in forward.iter().enumerate() {
            if let Some((ni, _)) = f {
                if backward[*ni] == Some(oi) {
                    out.push((old[oi].0, new[*ni].0, old[oi].2, new[*ni].2));
                }
            }
        }
        out
    }

    /// Full loop-closure attempt for the newest keyframe. On success the map
    /// and graph are corrected in place and the event is logged. Rejected
    /// candidates leave everything untouched.
    #[allow(clippy::too_many_arguments)]
    pub fn try_close(
        &mut self,
        map: &mut WorldMap,
        graph: &mut HybridGraph,
        current: KeyframeId,
        frame_index: usize,
        huber_px: f64,
    ) -> Option<LoopEvent> {
        let (candidate, score) = self.detect_candidate(map, graph, current)?;

        // Initial 3D-3D matches between the immediate loop ends.
        let old_side: BTreeSet<KeyframeId> = [candidate].into_iter().collect();
        let new_side: BTreeSet<KeyframeId> = [current].into_iter().collect();
        let matches = self.gather_matches(map, &old_side, &new_side);
        if matches.len() < 3 {
            return None;
        }
        let threshold = self.cfg.ransac_inlier_fraction * self.cfg.scene_scale;
        let from: Vec<Vector3<f64>> = matches.iter().map(|m| m.2).collect();
        let to: Vec<Vector3<f64>> = matches.iter().map(|m| m.3).collect();
        let (mut corrective, inliers) = ransac_sim3(
            &from,
            &to,
            self.cfg.ransac_iterations,
            threshold,
            self.cfg.ransac_seed,
        )?;

        // Match expansion through the co-visibility neighborhoods of both
        // loop ends, gated by the current transform estimate.
        let mut old_expanded = old_side.clone();
        for n in graph.neighbors(candidate, Some(EdgeKind::Covisibility), 0).ok()? {
            old_expanded.insert(n);
        }
        let mut new_expanded = new_side.clone();
        for n in graph.neighbors(current, Some(EdgeKind::Covisibility), 0).ok()? {
            new_expanded.insert(n);
        }
        for w in map.window() {
            new_expanded.insert(*w);
        }
        let expanded = self.gather_matches(map, &old_expanded, &new_expanded);
        let gated: Vec<&(LandmarkId, LandmarkId, Vector3<f64>, Vector3<f64>)> = expanded
            .iter()
            .filter(|m| (corrective.transform(&m.2) - m.3).norm() < threshold)
            .collect();
        let final_matches: Vec<(LandmarkId, LandmarkId, Vector3<f64>, Vector3<f64>)> =
            if gated.len() >= inliers.len() {
                gated.into_iter().cloned().collect()
            } else {
                inliers.iter().map(|&i| matches[i].clone()).collect()
            };
        if final_matches.len() >= 3 {
            let p: Vec<Vector3<f64>> = final_matches.iter().map(|m| m.2).collect();
            let q: Vec<Vector3<f64>> = final_matches.iter().map(|m| m.3).collect();
            if let Ok(refined) = estimate_sim3_horn(&p, &q) {
                corrective = refined;
            }
        }
        let inlier_count = final_matches
            .iter()
            .filter(|m| (corrective.transform(&m.2) - m.3).norm() < threshold)
            .count();
        if inlier_count < self.cfg.min_loop_inliers {
            log::info!(
                "loop candidate {candidate} rejected: {inlier_count} inliers < {}",
                self.cfg.min_loop_inliers
            );
            return None;
        }

        // --- Accepted: correct the old side. ---
        let detection_window: Vec<KeyframeId> = map.window().to_vec();
        let corrected = correct_loop(map, graph, candidate, current, &corrective, &final_matches);

        // Fixed set for PGO and global BA: the corrected old side plus
        // everything from or newer than the active window at detection time.
        let window_floor = detection_window.first().map(|k| k.0).unwrap_or(0);
        let mut fixed: BTreeSet<KeyframeId> = corrected.iter().copied().collect();
        for kf in map.keyframes() {
            if kf.id.0 >= window_floor {
                fixed.insert(kf.id);
            }
        }

        // Pose-graph optimization over the hybrid constraints.
        let initial: BTreeMap<KeyframeId, SimTransform> = map
            .keyframes()
            .map(|k| (k.id, SimTransform::from_pose(&k.pose)))
            .collect();
        let mut edges: Vec<PgoEdge> = Vec::new();
        for (i, j, e) in graph.temporal_edges() {
            edges.push(PgoEdge {
                i,
                j,
                measurement: e.measurement,
                information: e.information,
            });
        }
        let covis_info = edges
            .first()
            .map(|e| e.information)
            .unwrap_or_else(crate::geometry::Matrix7::identity);
        for (i, j, e) in graph.covis_edges() {
            if e.weight >= self.pgo_covis_min_weight {
                edges.push(PgoEdge {
                    i,
                    j,
                    measurement: e.measurement,
                    information: covis_info,
                });
            }
        }
        let (pgo_initial, pgo_final) =
            match pose_graph_optimize(&initial, &edges, &fixed, self.cfg.pgo_iterations) {
                Ok(result) => {
                    apply_pgo_result(map, &result.poses, &fixed);
                    (result.initial_chi2, result.final_chi2)
                }
                Err(e) => {
                    log::warn!("PGO skipped: {e}");
                    (f64::NAN, f64::NAN)
                }
            };

        // Global inverse-depth BA refines what the PGO smoothed.
        let ba = global_inverse_depth_ba(map, &fixed, huber_px, self.cfg.global_ba_iterations);

        let rot_deg = corrective.rotation().angle().to_degrees();
        let t = corrective.translation();
        let event = LoopEvent {
            frame_index,
            current_keyframe: current.0,
            candidate_keyframe: candidate.0,
            score,
            inliers: inlier_count,
            corrective_scale: corrective.scale(),
            corrective_rotation_deg: rot_deg,
            corrective_translation: [t.x, t.y, t.z],
            corrected_keyframes: corrected.len(),
            pgo_initial_chi2: pgo_initial,
            pgo_final_chi2: pgo_final,
            global_ba_rmse_px: ba.final_rmse_px,
            pre_ate: None,
            post_ate: None,
        };
        self.events.push(event.clone());
        Some(event)
    }

    pub fn record_ate(&mut self, pre: f64, post: f64) {
        if let Some(last) = self.events.last_mut() {
            last.pre_ate = Some(pre);
            last.post_ate = Some(post);
        }
    }
}

/// Applies the corrective Sim(3) to the old side of the loop: the candidate
/// keyframe and its co-visibility neighborhood (excluding the active window
/// and anything newer). Corrected keyframes become loop anchors; the matched
/// old landmarks gain the new side's observations so the loop ends become
/// co-visibility-connected.
pub fn correct_loop(
    map: &mut WorldMap,
    graph: &mut HybridGraph,
    candidate: KeyframeId,
    current: KeyframeId,
    corrective: &SimTransform,
    matches: &[(LandmarkId, LandmarkId, Vector3<f64>, Vector3<f64>)],
) -> Vec<KeyframeId> {
    // Old-side keyframes: candidate + covis neighborhood, old side only.
    let window: BTreeSet<KeyframeId> = map.window().iter().copied().collect();
    let floor = window.iter().next().map(|k| k.0).unwrap_or(u64::MAX);
    let mut old_side: BTreeSet<KeyframeId> = [candidate].into_iter().collect();
    if let Ok(neighbors) = graph.neighbors(candidate, Some(EdgeKind::Covisibility), 0) {
        for n in neighbors {
            if n.0 < floor {
                old_side.insert(n);
            }
        }
    }

    let s = corrective.scale();
    for kf_id in &old_side {
        let Some(kf) = map.keyframe_mut(*kf_id) else { continue };
        // Sim(3) acting on an SE(3) pose: rotation composes, translation is
        // scaled and moved, and the scale is absorbed into the hosted
        // inverse depths.
        let new_rot = corrective.rotation() * kf.pose.rotation();
        let new_t = corrective.transform(&kf.pose.translation());
        kf.pose = crate::geometry::Pose::new(new_rot, new_t);
        kf.loop_anchor = true;
    }
    if let Some(kf) = map.keyframe_mut(current) {
        kf.loop_anchor = true;
    }
    // Hosted landmarks: world = s R x + t with the new pose absorbing
    // (R, t), so camera-frame points scale by s => idepth /= s.
    let lm_ids = map.landmark_ids();
    for lm_id in lm_ids {
        let lm = map.landmark(lm_id).unwrap();
        if old_side.contains(&lm.host) {
            let lm = map.landmark_mut(lm_id).unwrap();
            lm.anchor.idepth /= s;
            lm.anchor.idepth_variance /= s * s;
        }
    }

    // Join the loop ends: matched old landmarks inherit the current-side
    // observations of their duplicates.
    for (old_lm, new_lm, _, _) in matches {
        let new_obs: Vec<(KeyframeId, nalgebra::Vector2<f64>)> = map
            .landmark(*new_lm)
            .map(|lm| lm.observations.iter().map(|(k, v)| (*k, *v)).collect())
            .unwrap_or_default();
        for (kf, px) in new_obs {
            map.add_observation(*old_lm, kf, px);
        }
    }
    graph.update_covisibility(current, map);
    for kf in &old_side {
        graph.update_covisibility(*kf, map);
    }

    old_side.into_iter().collect()
}

/// Writes PGO results back: free keyframes take the rigid part of their
/// Sim(3) and their hosted landmarks absorb the scale into inverse depth.
pub fn apply_pgo_result(
    map: &mut WorldMap,
    poses: &BTreeMap<KeyframeId, SimTransform>,
    fixed: &BTreeSet<KeyframeId>,
) {
    let mut scales: BTreeMap<KeyframeId, f64> = BTreeMap::new();
    for (kf_id, sim) in poses {
        if fixed.contains(kf_id) {
            continue;
        }
        if let Some(kf) = map.keyframe_mut(*kf_id) {
            kf.pose = sim.to_pose();
            if (sim.scale() - 1.0).abs() > 1e-12 {
                scales.insert(*kf_id, sim.scale());
            }
        }
    }
    if scales.is_empty() {
        return;
    }
    for lm_id in map.landmark_ids() {
        let host = map.landmark(lm_id).unwrap().host;
        if let Some(s) = scales.get(&host) {
            let lm = map.landmark_mut(lm_id).unwrap();
            lm.anchor.idepth /= s;
            lm.anchor.idepth_variance /= s * s;
        }
    }
}

use std::collections::BTreeMap;

use nalgebra::{DMatrix, DVector, Matrix1x6, Vector2};

use crate::config::MappingConfig;
use crate::frontend::PATCH_OFFSETS;
use crate::geometry::{huber, Pose};
use crate::tracking::{point_pose_jacobian, projection_jacobian};

use super::landmark::LandmarkStatus;
use super::map::WorldMap;
use super::{KeyframeId, LandmarkId};

#[derive(Debug, Clone, Default)]
pub struct BaReport {
    pub iterations: usize,
    pub initial_energy: f64,
    pub final_energy: f64,
    pub aborted: bool,
}

/// One photometric observation inside the window system: landmark hosted in
/// `host`, measured in target keyframe `target`.
struct BaResidual {
    landmark: usize,
    target_state: Option<usize>,
    host_state: Option<usize>,
    /// Host-frame pattern rays (scaled by 1/idepth at evaluation).
    host_uv: Vector2<f64>,
    patch: [f32; 8],
    host_pose_fixed: Pose,
    target: KeyframeId,
}

struct BaProblem {
    /// Window keyframes that move (the first keyframe holds the gauge).
    state_kfs: Vec<KeyframeId>,
    landmark_ids: Vec<LandmarkId>,
    residuals: Vec<BaResidual>,
}

/// Local photometric bundle adjustment over the window keyframe poses and
/// the active landmark inverse depths, at pyramid level 0 only, with the
/// marginalization prior attached. The first window keyframe is held fixed.
///
/// Returns the refined poses and idepths written back into the map. The
/// energy is non-increasing over accepted steps; a non-finite energy aborts
/// the adjustment leaving the map untouched.
pub fn local_photometric_ba(
    map: &mut WorldMap,
    cfg: &MappingConfig,
    huber_gamma: f64,
) -> BaReport {
    let window: Vec<KeyframeId> = map.window().to_vec();
    if window.len() < 2 {
        return BaReport::default();
    }
    let cam = map.cam;

    // States: every window keyframe but the first; every active landmark
    // observed in at least one window target other than its host.
    let state_kfs: Vec<KeyframeId> = window[1..].to_vec();
    let state_index: BTreeMap<KeyframeId, usize> = state_kfs
        .iter()
        .enumerate()
        .map(|(i, k)| (*k, i))
        .collect();

    let mut landmark_ids: Vec<LandmarkId> = Vec::new();
    let mut residuals: Vec<BaResidual> = Vec::new();
    for lm_id in map.landmark_ids() {
        let lm = map.landmark(lm_id).unwrap();
        if lm.status != LandmarkStatus::Active {
            continue;
        }
        let Some(patch) = lm.patch else { continue };
        let Some(host) = map.keyframe(lm.host) else { continue };
        let host_pose = host.pose;
        let host_state = state_index.get(&lm.host).copied();
        let mut local: Vec<BaResidual> = Vec::new();
        for target in &window {
            if *target == lm.host {
                continue;
            }
            if !lm.observations.contains_key(target)
                && lm.observations.len() > 1
            {
                // Prefer confirmed observations; fall back to pure geometry
                // for landmarks that only have their host yet.
                continue;
            }
            local.push(BaResidual {
                landmark: landmark_ids.len(),
                target_state: state_index.get(target).copied(),
                host_state,
                host_uv: lm.host_uv(),
                patch,
                host_pose_fixed: host_pose,
                target: *target,
            });
        }
        if !local.is_empty() {
            landmark_ids.push(lm_id);
            residuals.append(&mut local);
        }
    }
    if landmark_ids.is_empty() {
        return BaReport::default();
    }
    let problem = BaProblem {
        state_kfs,
        landmark_ids,
        residuals,
    };

    // Working copies: camera-from-world poses per window keyframe and
    // idepths per landmark.
    let mut poses_cw: BTreeMap<KeyframeId, Pose> = window
        .iter()
        .map(|k| (*k, map.keyframe(*k).unwrap().pose.inverse()))
        .collect();
    let mut idepths: Vec<f64> = problem
        .landmark_ids
        .iter()
        .map(|id| map.landmark(*id).unwrap().anchor.idepth)
        .collect();

    let np = 6 * problem.state_kfs.len();
    let nl = problem.landmark_ids.len();
    let mut lambda = 1e-4;
    let mut report = BaReport::default();

    let eval_energy = |poses: &BTreeMap<KeyframeId, Pose>, ids: &[f64]| -> f64 {
        let mut e = 0.0;
        for r in &problem.residuals {
            let Some(img) = map
                .keyframe(r.target)
                .and_then(|k| k.pyramid.as_ref())
                .map(|p| p.level(0))
            else {
                continue;
            };
            let t_cw = poses[&r.target];
            let host_cw = r
                .host_state
                .map(|_| poses[&problem.state_kfs[r.host_state.unwrap()]])
                .unwrap_or_else(|| r.host_pose_fixed.inverse());
            let cur_from_host = t_cw.compose(&host_cw.inverse());
            let id = ids[r.landmark].max(1e-4);
            for (k, (du, dv)) in PATCH_OFFSETS.iter().enumerate() {
                let uv_h = Vector2::new(r.host_uv.x + du, r.host_uv.y + dv);
                let x_h = cam.ray(&uv_h) / id;
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
                let res = img.sample(uv.x, uv.y) - r.patch[k] as f64;
                e += huber(res, huber_gamma).0;
            }
        }
        // Marginalization prior energy.
        if !map.prior.is_empty() {
            let d = prior_offset(map, poses);
            e += 0.5 * (d.transpose() * &map.prior.h * &d)[(0, 0)] + map.prior.b.dot(&d);
        }
        e
    };

    report.initial_energy = eval_energy(&poses_cw, &idepths);
    if !report.initial_energy.is_finite() {
        log::warn!("local BA: non-finite initial energy, aborting");
        report.aborted = true;
        return report;
    }
    let mut energy = report.initial_energy;

    for iter in 0..cfg.ba_iterations {
        report.iterations = iter + 1;
        // Assemble the normal equations with Schur elimination of idepths.
        let mut h_pp = DMatrix::<f64>::zeros(np, np);
        let mut b_p = DVector::<f64>::zeros(np);
        let mut h_ll = vec![0.0f64; nl];
        let mut b_l = vec![0.0f64; nl];
        let mut h_pl: Vec<Vec<(usize, [f64; 6])>> = vec![Vec::new(); nl];

        for r in &problem.residuals {
            let Some(img) = map
                .keyframe(r.target)
                .and_then(|k| k.pyramid.as_ref())
                .map(|p| p.level(0))
            else {
                continue;
            };
            let t_cw = poses_cw[&r.target];
            let host_wc = r
                .host_state
                .map(|hs| poses_cw[&problem.state_kfs[hs]].inverse())
                .unwrap_or(r.host_pose_fixed);
            let cur_from_host = t_cw.compose(&host_wc);
            let id = idepths[r.landmark].max(1e-4);
            for (k, (du, dv)) in PATCH_OFFSETS.iter().enumerate() {
                let uv_h = Vector2::new(r.host_uv.x + du, r.host_uv.y + dv);
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
                let res = img.sample(uv.x, uv.y) - r.patch[k] as f64;
                let (_, w) = huber(res, huber_gamma);
                let (gx, gy) = img.sample_gradient(uv.x, uv.y);
                let grad = nalgebra::Matrix1x2::new(gx, gy);
                let j_point = grad * projection_jacobian(&cam, &p_c);

                let j_target: Option<Matrix1x6<f64>> = r
                    .target_state
                    .map(|_| j_point * point_pose_jacobian(&p_c));
                let j_host: Option<Matrix1x6<f64>> = r.host_state.map(|_| {
                    let rot = cur_from_host.rotation().to_rotation_matrix();
                    let mut jh = nalgebra::Matrix3x6::zeros();
                    jh.fixed_view_mut::<3, 3>(0, 0)
                        .copy_from(&(-rot.matrix()));
                    jh.fixed_view_mut::<3, 3>(0, 3)
                        .copy_from(&(rot.matrix() * crate::geometry::skew(&x_h)));
                    j_point * jh
                });
                let dxh_did = -ray / (id * id);
                let j_id = (j_point * (cur_from_host.rotation() * dxh_did))[(0, 0)];

                // Scatter into the block system.
                let li = r.landmark;
                h_ll[li] += w * j_id * j_id;
                b_l[li] -= w * j_id * res;
                let mut scatter = |state: usize, j: &Matrix1x6<f64>| {
                    for a in 0..6 {
                        b_p[6 * state + a] -= w * j[(0, a)] * res;
                        for b in 0..6 {
                            h_pp[(6 * state + a, 6 * state + b)] += w * j[(0, a)] * j[(0, b)];
                        }
                    }
                };
                if let (Some(ts), Some(jt)) = (r.target_state, j_target.as_ref()) {
                    scatter(ts, jt);
                    let mut row = [0.0f64; 6];
                    for a in 0..6 {
                        row[a] = w * jt[(0, a)] * j_id;
                    }
                    h_pl[li].push((ts, row));
                }
                if let (Some(hs), Some(jh)) = (r.host_state, j_host.as_ref()) {
                    scatter(hs, jh);
                    let mut row = [0.0f64; 6];
                    for a in 0..6 {
                        row[a] = w * jh[(0, a)] * j_id;
                    }
                    h_pl[li].push((hs, row));
                }
                if let (Some(ts), Some(jt), Some(hs), Some(jh)) =
                    (r.target_state, j_target.as_ref(), r.host_state, j_host.as_ref())
                {
                    for a in 0..6 {
                        for b in 0..6 {
                            let v = w * jt[(0, a)] * jh[(0, b)];
                            h_pp[(6 * ts + a, 6 * hs + b)] += v;
                            h_pp[(6 * hs + b, 6 * ts + a)] += v;
                        }
                    }
                }
            }
        }

        // Prior contribution on the pose blocks.
        if !map.prior.is_empty() {
            let d = prior_offset(map, &poses_cw);
            let grad = &map.prior.h * &d + &map.prior.b;
            for (pi, pkf) in map.prior.keyframes.iter().enumerate() {
                let Some(&si) = problem
                    .state_kfs
                    .iter()
                    .enumerate()
                    .find(|(_, k)| *k == pkf)
                    .map(|(i, _)| i)
                    .as_ref()
                else {
                    continue;
                };
                for a in 0..6 {
                    b_p[6 * si + a] -= grad[6 * pi + a];
                    for (pj, pkf2) in map.prior.keyframes.iter().enumerate() {
                        if let Some((sj, _)) = problem
                            .state_kfs
                            .iter()
                            .enumerate()
                            .find(|(_, k)| *k == pkf2)
                        {
                            for b in 0..6 {
                                h_pp[(6 * si + a, 6 * sj + b)] +=
                                    map.prior.h[(6 * pi + a, 6 * pj + b)];
                            }
                        }
                    }
                }
            }
        }

        // Schur complement: eliminate idepths (diagonal block).
        let mut h_s = h_pp.clone();
        let mut b_s = b_p.clone();
        let mut hll_inv = vec![0.0f64; nl];
        for li in 0..nl {
            let hll = h_ll[li] + lambda * h_ll[li].max(1e-12);
            if hll <= 1e-12 {
                continue;
            }
            let inv = 1.0 / hll;
            hll_inv[li] = inv;
            // Accumulate the per-landmark pose coupling first.
            let mut acc: BTreeMap<usize, [f64; 6]> = BTreeMap::new();
            for (state, row) in &h_pl[li] {
                let e = acc.entry(*state).or_insert([0.0; 6]);
                for a in 0..6 {
                    e[a] += row[a];
                }
            }
            for (si, rowi) in &acc {
                for a in 0..6 {
                    b_s[6 * si + a] -= rowi[a] * inv * b_l[li];
                    for (sj, rowj) in &acc {
                        for b in 0..6 {
                            h_s[(6 * si + a, 6 * sj + b)] -= rowi[a] * inv * rowj[b];
                        }
                    }
                }
            }
            h_pl[li] = acc.into_iter().collect();
        }
        for i in 0..np {
            h_s[(i, i)] += lambda * h_pp[(i, i)].max(1e-12);
        }

        let Some(delta_p) = h_s.clone().cholesky().map(|c| c.solve(&b_s)) else {
            lambda *= 10.0;
            continue;
        };

        // Back-substitute idepth updates.
        let mut delta_l = vec![0.0f64; nl];
        for li in 0..nl {
            if hll_inv[li] == 0.0 {
                continue;
            }
            let mut coupling = 0.0;
            for (state, row) in &h_pl[li] {
                for a in 0..6 {
                    coupling += row[a] * delta_p[6 * state + a];
                }
            }
            delta_l[li] = hll_inv[li] * (b_l[li] - coupling);
        }

        // Candidate state.
        let mut poses_try = poses_cw.clone();
        for (si, kf) in problem.state_kfs.iter().enumerate() {
            let d = nalgebra::Vector6::from_iterator((0..6).map(|a| delta_p[6 * si + a]));
            poses_try.insert(*kf, Pose::exp(&d).compose(&poses_cw[kf]));
        }
        let idepths_try: Vec<f64> = idepths
            .iter()
            .zip(delta_l.iter())
            .map(|(id, d)| (id + d).max(1e-4))
            .collect();

        let e_try = eval_energy(&poses_try, &idepths_try);
        if !e_try.is_finite() {
            log::warn!("local BA: non-finite energy during step, aborting");
            report.aborted = true;
            return report;
        }
        if e_try <= energy {
            let step = delta_p.norm();
            poses_cw = poses_try;
            idepths = idepths_try;
            let decrease = (energy - e_try) / energy.max(1e-300);
            energy = e_try;
            lambda = (lambda * 0.5).max(1e-9);
            if step < 1e-8 || decrease < 1e-10 {
                break;
            }
        } else {
            lambda *= 10.0;
            if lambda > 1e6 {
                break;
            }
        }
    }

    // Write back.
    for kf in &problem.state_kfs {
        let pose_wc = poses_cw[kf].inverse();
        map.keyframe_mut(*kf).unwrap().pose = pose_wc;
    }
    for (li, lm_id) in problem.landmark_ids.iter().enumerate() {
        map.landmark_mut(*lm_id).unwrap().anchor.idepth = idepths[li];
    }
    report.final_energy = energy;
    report
}

fn prior_offset(map: &WorldMap, poses_cw: &BTreeMap<KeyframeId, Pose>) -> DVector<f64> {
    let mut d = DVector::zeros(map.prior.dim());
    for (i, (kf, lin)) in map
        .prior
        .keyframes
        .iter()
        .zip(map.prior.lin_points.iter())
        .enumerate()
    {
        let cur = poses_cw
            .get(kf)
            .copied()
            .unwrap_or_else(|| map.keyframe(*kf).unwrap().pose.inverse());
        let delta = (cur * lin.inverse())
            .log()
            .unwrap_or_else(|_| nalgebra::Vector6::zeros());
        d.rows_mut(6 * i, 6).copy_from(&delta);
    }
    d
}

use nalgebra::{Vector2, Vector3};

use crate::config::MappingConfig;
use crate::frontend::PATCH_OFFSETS;
use crate::geometry::{CameraModel, Pose};
use crate::img::Image;

use super::landmark::Landmark;
use super::map::fuse_inverse_depth;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum DepthFilterOutcome {
    /// Posterior updated; variance decreased.
    Updated,
    /// Epipolar segment degenerate (near-zero baseline) or off-image; state
    /// unchanged.
    Skipped,
    /// No photometric match under the SSD threshold; outlier counter bumped.
    NoMatch,
    /// Outlier counter exceeded the limit; the candidate should be dropped.
    Exhausted,
}

/// Inverse depth solved from one epipolar observation: given the host ray
/// `r` rotated into the frame and the frame translation `t`, the projection
/// of `r/id + t` equals the observed coordinate. Linear in `id`; the better
/// conditioned image axis is used.
fn idepth_from_observation(
    cam: &CameraModel,
    rotated_ray: &Vector3<f64>,
    t: &Vector3<f64>,
    uv: &Vector2<f64>,
) -> Option<f64> {
    let a_u = (uv.x - cam.cx) / cam.fx;
    let a_v = (uv.y - cam.cy) / cam.fy;
    let denom_u = a_u * t.z - t.x;
    let denom_v = a_v * t.z - t.y;
    let (num, den) = if denom_u.abs() > denom_v.abs() {
        (rotated_ray.x - a_u * rotated_ray.z, denom_u)
    } else {
        (rotated_ray.y - a_v * rotated_ray.z, denom_v)
    };
    if den.abs() < 1e-12 {
        return None;
    }
    let id = num / den;
    if id.is_finite() && id > 0.0 {
        Some(id)
    } else {
        None
    }
}

fn patch_ssd(img: &Image, center: &Vector2<f64>, patch: &[f32; 8]) -> Option<f64> {
    let mut ssd = 0.0;
    for (k, (du, dv)) in PATCH_OFFSETS.iter().enumerate() {
        let u = center.x + du;
        let v = center.y + dv;
        if !img.in_bounds(u, v) {
            return None;
        }
        let d = img.sample(u, v) - patch[k] as f64;
        ssd += d * d;
    }
    Some(ssd / PATCH_OFFSETS.len() as f64)
}

/// One epipolar-search update of a candidate landmark against a new frame.
///
/// The segment bounded by `idepth +- 2 sigma` is searched for the best patch
/// SSD; the match is converted to an inverse-depth observation with
/// geometrically propagated variance and fused into the candidate.
pub fn update_depth_filter(
    lm: &mut Landmark,
    host_pose: &Pose,
    frame_image: &Image,
    frame_pose: &Pose,
    cam: &CameraModel,
    cfg: &MappingConfig,
) -> DepthFilterOutcome {
    let Some(patch) = lm.patch else {
        return DepthFilterOutcome::Skipped;
    };
    let frame_from_host = frame_pose.inverse().compose(host_pose);
    let ray = cam.ray(&lm.host_uv());
    let rotated_ray = frame_from_host.rotation() * ray;
    let t = frame_from_host.translation();

    let sigma = lm.anchor.idepth_variance.sqrt();
    let id_lo = (lm.anchor.idepth - 2.0 * sigma).max(1.0 / 80.0);
    let id_hi = (lm.anchor.idepth + 2.0 * sigma).min(1.0 / 0.05);
    if id_lo >= id_hi {
        return DepthFilterOutcome::Skipped;
    }
    let project_at = |id: f64| -> Option<Vector2<f64>> {
        let p = rotated_ray / id + t;
        if p.z <= cam.z_min {
            return None;
        }
        let uv = cam.project(&p).ok()?;
        if cam.contains(&uv, 3.0) {
            Some(uv)
        } else {
            None
        }
    };
    let (Some(px_lo), Some(px_hi)) = (project_at(id_lo), project_at(id_hi)) else {
        return DepthFilterOutcome::Skipped;
    };
    let segment = px_hi - px_lo;
    let length = segment.norm();
    if length < 0.5 {
        // Zero-baseline geometry: the segment collapses to a point.
        return DepthFilterOutcome::Skipped;
    }
    let dir = segment / length;
    let steps = ((length / 0.7).ceil() as usize).clamp(2, 240);

    let mut best: Option<(f64, usize, Vector2<f64>)> = None;
    let mut ssds = vec![f64::INFINITY; steps + 1];
    for i in 0..=steps {
        let pos = px_lo + segment * (i as f64 / steps as f64);
        if let Some(ssd) = patch_ssd(frame_image, &pos, &patch) {
            ssds[i] = ssd;
            if best.as_ref().map(|(b, _, _)| ssd < *b).unwrap_or(true) {
                best = Some((ssd, i, pos));
            }
        }
    }
    let Some((best_ssd, best_i, best_pos)) = best else {
        return bump_outlier(lm, cfg);
    };
    if best_ssd > cfg.epipolar_ssd_threshold {
        return bump_outlier(lm, cfg);
    }

    // Parabolic subpixel refinement along the segment.
    let step_px = length / steps as f64;
    let mut matched = best_pos;
    if best_i > 0 && best_i < steps && ssds[best_i - 1].is_finite() && ssds[best_i + 1].is_finite()
    {
        let denom = ssds[best_i - 1] - 2.0 * ssds[best_i] + ssds[best_i + 1];
        if denom.abs() > 1e-12 {
            let delta = (0.5 * (ssds[best_i - 1] - ssds[best_i + 1]) / denom).clamp(-0.5, 0.5);
            matched += dir * (delta * step_px);
        }
    }

    let Some(id_obs) = idepth_from_observation(cam, &rotated_ray, &t, &matched) else {
        return bump_outlier(lm, cfg);
    };
    // Variance from the pixel noise pushed through the same triangulation.
    let sigma_px = cfg.epipolar_pixel_sigma;
    let id_plus = idepth_from_observation(cam, &rotated_ray, &t, &(matched + dir * sigma_px));
    let id_minus = idepth_from_observation(cam, &rotated_ray, &t, &(matched - dir * sigma_px));
    let spread = match (id_plus, id_minus) {
        (Some(p), Some(m)) => ((p - id_obs).abs()).max((m - id_obs).abs()),
        (Some(p), None) => (p - id_obs).abs(),
        (None, Some(m)) => (m - id_obs).abs(),
        (None, None) => return bump_outlier(lm, cfg),
    };
    let var_obs = (spread * spread).max(1e-10);

    match fuse_inverse_depth(
        (lm.anchor.idepth, lm.anchor.idepth_variance),
        (id_obs, var_obs),
    ) {
        Ok((mu, var)) => {
            lm.anchor.idepth = mu;
            lm.anchor.idepth_variance = var;
            lm.filter_updates += 1;
            lm.outlier_count = 0;
            DepthFilterOutcome::Updated
        }
        Err(_) => bump_outlier(lm, cfg),
    }
}

fn bump_outlier(lm: &mut Landmark, cfg: &MappingConfig) -> DepthFilterOutcome {
    lm.outlier_count += 1;
    if lm.outlier_count > cfg.candidate_outlier_limit {
        DepthFilterOutcome::Exhausted
    } else {
        DepthFilterOutcome::NoMatch
    }
}

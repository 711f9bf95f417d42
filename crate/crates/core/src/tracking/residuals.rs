use nalgebra::{Matrix2x6, Matrix3, Vector2, Vector3, Vector6};

use crate::frontend::{BinaryDescriptor, PATCH_OFFSETS};
use crate::geometry::{huber, CameraModel, Pose};
use crate::img::Image;
use crate::mapping::LandmarkId;

/// Everything tracking needs to know about one active landmark; snapshots
/// are built by the map owner and read immutably here.
#[derive(Debug, Clone)]
pub struct WindowPoint {
    pub id: LandmarkId,
    /// World-from-camera pose of the host keyframe.
    pub host_pose: Pose,
    pub anchor_uv: Vector2<f64>,
    pub idepth: f64,
    pub idepth_variance: f64,
    pub patch: [f32; 8],
    pub descriptor: BinaryDescriptor,
    pub world: Vector3<f64>,
}

#[derive(Debug, Clone, Default)]
pub struct WindowSnapshot {
    pub points: Vec<WindowPoint>,
}

/// d(projection)/d(camera point) for the pinhole model.
pub fn projection_jacobian(cam: &CameraModel, p: &Vector3<f64>) -> nalgebra::Matrix2x3<f64> {
    let iz = 1.0 / p.z;
    nalgebra::Matrix2x3::new(
        cam.fx * iz,
        0.0,
        -cam.fx * p.x * iz * iz,
        0.0,
        cam.fy * iz,
        -cam.fy * p.y * iz * iz,
    )
}

/// d(camera point)/d(left-multiplicative se(3) perturbation of the
/// camera-from-world pose): `[I | -skew(p_c)]`.
pub fn point_pose_jacobian(p_c: &Vector3<f64>) -> nalgebra::Matrix3x6<f64> {
    let mut j = nalgebra::Matrix3x6::zeros();
    j.fixed_view_mut::<3, 3>(0, 0).copy_from(&Matrix3::identity());
    j.fixed_view_mut::<3, 3>(0, 3)
        .copy_from(&(-crate::geometry::skew(p_c)));
    j
}

/// One photometric sample: residual plus its pose Jacobian.
pub struct PhotometricSample {
    pub point_index: usize,
    pub residual: f64,
    pub jacobian: Vector6<f64>,
    /// d r / d (gain, bias) when affine brightness is estimated.
    pub brightness_jacobian: [f64; 2],
}

/// Photometric residuals of a window point against the current image at a
/// pyramid level. At level 0 the full 8-point pattern is evaluated; coarser
/// levels use the central sample only (pooling preserves the mean
/// intensity, so the host value stays comparable).
#[allow(clippy::too_many_arguments)]
pub fn photometric_residuals(
    point_index: usize,
    point: &WindowPoint,
    cam0: &CameraModel,
    cam_l: &CameraModel,
    img_l: &Image,
    cam_from_world: &Pose,
    brightness: (f64, f64),
    level: usize,
    out: &mut Vec<PhotometricSample>,
) -> usize {
    let host_from_world = point.host_pose.inverse();
    let world_from_host = point.host_pose;
    let cur_from_host = cam_from_world.compose(&world_from_host);
    let _ = host_from_world;
    let (gain, bias) = brightness;
    let offsets: &[(f64, f64)] = if level == 0 {
        &PATCH_OFFSETS
    } else {
        &PATCH_OFFSETS[4..5]
    };
    let patch_base: usize = if level == 0 { 0 } else { 4 };
    let mut produced = 0;
    for (k, (du, dv)) in offsets.iter().enumerate() {
        let host_px = Vector2::new(point.anchor_uv.x + du, point.anchor_uv.y + dv);
        let Ok(x_h) = cam0.backproject(&host_px, point.idepth) else {
            continue;
        };
        let p_c = cur_from_host.transform(&x_h);
        if p_c.z <= cam_l.z_min {
            continue;
        }
        let Ok(uv) = cam_l.project(&p_c) else { continue };
        if uv.x < 1.0
            || uv.y < 1.0
            || uv.x > (img_l.width() - 2) as f64
            || uv.y > (img_l.height() - 2) as f64
        {
            continue;
        }
        let host_value = point.patch[patch_base + k] as f64;
        let predicted = gain * host_value + bias;
        let residual = img_l.sample(uv.x, uv.y) - predicted;
        let (gx, gy) = img_l.sample_gradient(uv.x, uv.y);
        let grad = nalgebra::Matrix1x2::new(gx, gy);
        let j = (grad * projection_jacobian(cam_l, &p_c) * point_pose_jacobian(&p_c)).transpose();
        out.push(PhotometricSample {
            point_index,
            residual,
            jacobian: j,
            brightness_jacobian: [-host_value, -1.0],
        });
        produced += 1;
    }
    produced
}

/// One geometric match: 2D reprojection residual and pose Jacobian.
pub struct GeometricSample {
    pub point_index: usize,
    pub residual: Vector2<f64>,
    pub jacobian: Matrix2x6<f64>,
}

pub fn geometric_residual(
    point_index: usize,
    world: &Vector3<f64>,
    observed: &Vector2<f64>,
    cam: &CameraModel,
    cam_from_world: &Pose,
) -> Option<GeometricSample> {
    let p_c = cam_from_world.transform(world);
    if p_c.z <= cam.z_min {
        return None;
    }
    let uv = cam.project(&p_c).ok()?;
    Some(GeometricSample {
        point_index,
        residual: uv - observed,
        jacobian: projection_jacobian(cam, &p_c) * point_pose_jacobian(&p_c),
    })
}

/// Robust 3D-2D Gauss-Newton pose solve (camera-from-world), used by the
/// indirect pre-alignment step and by relocalization.
///
/// Returns the refined pose, the per-observation inlier flags at
/// `inlier_px`, and the inlier count.
pub fn robust_pnp(
    observations: &[(Vector3<f64>, Vector2<f64>)],
    cam: &CameraModel,
    init_cam_from_world: &Pose,
    huber_px: f64,
    inlier_px: f64,
    iterations: usize,
) -> (Pose, Vec<bool>, usize) {
    let mut pose = *init_cam_from_world;
    let mut lambda = 1e-4;
    let mut last_energy = f64::INFINITY;
    for _ in 0..iterations {
        let mut h = nalgebra::Matrix6::<f64>::zeros();
        let mut b = Vector6::<f64>::zeros();
        let mut e = 0.0;
        let mut n = 0usize;
        for (world, obs) in observations {
            let Some(sample) = geometric_residual(0, world, obs, cam, &pose) else {
                continue;
            };
            let norm = sample.residual.norm();
            let (cost, w) = huber(norm, huber_px);
            e += cost;
            n += 1;
            let jw = sample.jacobian.transpose() * w;
            h += jw * sample.jacobian;
            b -= jw * sample.residual;
        }
        if n < 3 || !e.is_finite() {
            break;
        }
        let mut damped = h;
        for i in 0..6 {
            damped[(i, i)] += lambda * h[(i, i)].max(1e-12);
        }
        let Some(delta) = damped.cholesky().map(|c| c.solve(&b)) else {
            break;
        };
        let candidate = Pose::exp(&delta).compose(&pose);
        let mut e_new = 0.0;
        for (world, obs) in observations {
            if let Some(s) = geometric_residual(0, world, obs, cam, &candidate) {
                e_new += huber(s.residual.norm(), huber_px).0;
            }
        }
        if e_new < e {
            pose = candidate;
            lambda = (lambda * 0.5).max(1e-9);
            let converged = delta.norm() < 1e-10 || (last_energy - e_new).abs() < 1e-14;
            last_energy = e_new;
            if converged {
                break;
            }
        } else {
            lambda *= 10.0;
            if lambda > 1e8 {
                break;
            }
        }
    }
    let mut inliers = Vec::with_capacity(observations.len());
    let mut count = 0usize;
    for (world, obs) in observations {
        let ok = geometric_residual(0, world, obs, cam, &pose)
            .map(|s| s.residual.norm() < inlier_px)
            .unwrap_or(false);
        inliers.push(ok);
        count += ok as usize;
    }
    (pose, inliers, count)
}

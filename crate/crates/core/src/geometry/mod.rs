//! Lie-group math (SO(3)/SE(3)/Sim(3)), the pinhole camera model, and the
//! robust-norm primitives shared by every optimizer in the crate.
//!
//! Tangent vectors are ordered `(translation, rotation[, scale])` everywhere:
//! a 6-vector `(rho, phi)` for SE(3) and a 7-vector `(rho, phi, sigma)` for
//! Sim(3), with `phi` an axis-angle rotation and `sigma = ln(scale)`.

mod camera;
mod robust;
mod se3;
mod sim3;

pub use camera::CameraModel;
pub use robust::huber;
pub use se3::Pose;
pub use sim3::{
    sim3_ad, sim3_inv_right_jacobian, sim3_umeyama, Matrix7, SimTransform, Vector7,
};

use nalgebra::{Matrix3, Vector3};
use thiserror::Error;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum GeometryError {
    #[error("behind camera: z = {z} <= z_min = {z_min}")]
    BehindCamera { z: f64, z_min: f64 },
    #[error("point at infinity: inverse depth {idepth} <= 0")]
    PointAtInfinity { idepth: f64 },
    #[error("near-singular log: rotation angle {angle} too close to pi")]
    NearSingularLog { angle: f64 },
    #[error("degenerate point configuration: {0}")]
    Degenerate(String),
}

/// Host-anchored inverse-depth parametrization of a landmark.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct InverseDepthPoint {
    /// Pixel coordinates in the host keyframe.
    pub host_uv: [f64; 2],
    /// Inverse depth in 1/m; 0 encodes a point at infinity.
    pub idepth: f64,
    /// Variance of the inverse depth, (1/m)^2.
    pub idepth_variance: f64,
}

impl InverseDepthPoint {
    pub fn new(host_uv: [f64; 2], idepth: f64, idepth_variance: f64) -> Self {
        debug_assert!(idepth >= 0.0);
        debug_assert!(idepth_variance > 0.0);
        Self {
            host_uv,
            idepth,
            idepth_variance,
        }
    }
}

pub fn skew(v: &Vector3<f64>) -> Matrix3<f64> {
    Matrix3::new(0.0, -v.z, v.y, v.z, 0.0, -v.x, -v.y, v.x, 0.0)
}

/// Evaluates `sum_{n>=0} M^n / (n+1)!  =  integral_0^1 exp(u M) du`.
///
/// This is the "V" matrix of SE(3) for `M = skew(phi)` and the translation
/// mixer of Sim(3) for `M = sigma I + skew(phi)`. The series converges fast
/// for the rotation magnitudes permitted by `log_map` (angle < pi).
pub(crate) fn exp_integral_series(m: &Matrix3<f64>) -> Matrix3<f64> {
    let mut term = Matrix3::identity();
    let mut sum = term;
    for n in 1..=40 {
        term = term * m / (n as f64 + 1.0);
        sum += term;
        if term.norm() < 1e-18 {
            break;
        }
    }
    sum
}

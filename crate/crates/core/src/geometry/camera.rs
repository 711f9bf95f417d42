use nalgebra::{Vector2, Vector3};
use serde::{Deserialize, Serialize};

use super::GeometryError;

/// Calibrated pinhole camera with zero distortion.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CameraModel {
    pub fx: f64,
    pub fy: f64,
    pub cx: f64,
    pub cy: f64,
    pub width: usize,
    pub height: usize,
    /// Points with camera-frame z below this are treated as behind the camera.
    pub z_min: f64,
}

impl CameraModel {
    pub fn new(fx: f64, fy: f64, cx: f64, cy: f64, width: usize, height: usize) -> Self {
        assert!(fx > 0.0 && fy > 0.0);
        assert!(cx >= 0.0 && cx < width as f64);
        assert!(cy >= 0.0 && cy < height as f64);
        Self {
            fx,
            fy,
            cx,
            cy,
            width,
            height,
            z_min: 0.01,
        }
    }

    /// Intrinsics of pyramid level `l` under 2x2 mean pooling, where level-0
    /// pixel centers sit at integer coordinates: `u_l = (u_0 - 0.5) / 2^l + ...`
    /// applied per halving step.
    pub fn at_level(&self, level: usize) -> CameraModel {
        let mut cam = *self;
        for _ in 0..level {
            cam = CameraModel {
                fx: cam.fx / 2.0,
                fy: cam.fy / 2.0,
                cx: (cam.cx - 0.5) / 2.0,
                cy: (cam.cy - 0.5) / 2.0,
                width: cam.width.div_ceil(2),
                height: cam.height.div_ceil(2),
                z_min: cam.z_min,
            };
        }
        cam
    }

    pub fn project(&self, p: &Vector3<f64>) -> Result<Vector2<f64>, GeometryError> {
        if p.z <= self.z_min {
            return Err(GeometryError::BehindCamera {
                z: p.z,
                z_min: self.z_min,
            });
        }
        Ok(Vector2::new(
            self.fx * p.x / p.z + self.cx,
            self.fy * p.y / p.z + self.cy,
        ))
    }

    pub fn backproject(&self, uv: &Vector2<f64>, idepth: f64) -> Result<Vector3<f64>, GeometryError> {
        if idepth <= 0.0 {
            return Err(GeometryError::PointAtInfinity { idepth });
        }
        Ok(self.ray(uv) / idepth)
    }

    /// Unit-depth ray through the pixel: `((u - cx)/fx, (v - cy)/fy, 1)`.
    pub fn ray(&self, uv: &Vector2<f64>) -> Vector3<f64> {
        Vector3::new((uv.x - self.cx) / self.fx, (uv.y - self.cy) / self.fy, 1.0)
    }

    pub fn contains(&self, uv: &Vector2<f64>, margin: f64) -> bool {
        uv.x >= margin
            && uv.y >= margin
            && uv.x <= self.width as f64 - 1.0 - margin
            && uv.y <= self.height as f64 - 1.0 - margin
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn cam() -> CameraModel {
        CameraModel::new(100.0, 100.0, 160.0, 120.0, 320, 240)
    }

    #[test]
    fn on_axis_point_projects_to_principal_point() {
        let uv = cam().project(&Vector3::new(0.0, 0.0, 2.0)).unwrap();
        assert_relative_eq!(uv, Vector2::new(160.0, 120.0), epsilon = 1e-12);
    }

    #[test]
    fn pinhole_formula() {
        let uv = cam().project(&Vector3::new(1.0, 0.0, 2.0)).unwrap();
        assert_relative_eq!(uv, Vector2::new(210.0, 120.0), epsilon = 1e-12);
    }

    #[test]
    fn behind_camera_errors() {
        assert!(matches!(
            cam().project(&Vector3::new(0.0, 0.0, -1.0)),
            Err(GeometryError::BehindCamera { .. })
        ));
    }

    #[test]
    fn backproject_known_point() {
        let p = cam()
            .backproject(&Vector2::new(160.0, 120.0), 0.5)
            .unwrap();
        assert_relative_eq!(p, Vector3::new(0.0, 0.0, 2.0), epsilon = 1e-12);
    }

    #[test]
    fn zero_idepth_errors() {
        assert!(matches!(
            cam().backproject(&Vector2::new(10.0, 10.0), 0.0),
            Err(GeometryError::PointAtInfinity { .. })
        ));
    }

    #[test]
    fn project_backproject_round_trip() {
        let cam = cam();
        let mut rng = ChaCha8Rng::seed_from_u64(99);
        for _ in 0..100 {
            let uv = Vector2::new(
                rng.random_range(0.0..319.0),
                rng.random_range(0.0..239.0),
            );
            let idepth = rng.random_range(0.02..2.0);
            let p = cam.backproject(&uv, idepth).unwrap();
            let back = cam.project(&p).unwrap();
            assert_relative_eq!(back, uv, epsilon = 1e-9);
        }
    }
}

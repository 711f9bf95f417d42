use nalgebra::{Matrix3, Matrix6, UnitQuaternion, Vector3, Vector6};
use serde::{Deserialize, Serialize};

use super::{exp_integral_series, skew, GeometryError};

/// Maximum rotation angle accepted by `log`; beyond this the logarithm is
/// numerically unstable.
const LOG_ANGLE_LIMIT: f64 = std::f64::consts::PI - 1e-6;

/// A rigid transform in SE(3): `x -> R x + t`.
///
/// The rotation is stored as a unit quaternion and renormalized on every
/// construction so that composition chains stay orthonormal.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Pose {
    rotation: UnitQuaternion<f64>,
    translation: Vector3<f64>,
}

impl Pose {
    pub fn identity() -> Self {
        Self {
            rotation: UnitQuaternion::identity(),
            translation: Vector3::zeros(),
        }
    }

    pub fn new(rotation: UnitQuaternion<f64>, translation: Vector3<f64>) -> Self {
        Self {
            rotation: UnitQuaternion::new_normalize(rotation.into_inner()),
            translation,
        }
    }

    pub fn from_translation(translation: Vector3<f64>) -> Self {
        Self::new(UnitQuaternion::identity(), translation)
    }

    pub fn rotation(&self) -> UnitQuaternion<f64> {
        self.rotation
    }

    pub fn rotation_matrix(&self) -> Matrix3<f64> {
        self.rotation.to_rotation_matrix().into_inner()
    }

    pub fn translation(&self) -> Vector3<f64> {
        self.translation
    }

    pub fn transform(&self, p: &Vector3<f64>) -> Vector3<f64> {
        self.rotation * p + self.translation
    }

    pub fn compose(&self, other: &Pose) -> Pose {
        Pose::new(
            self.rotation * other.rotation,
            self.rotation * other.translation + self.translation,
        )
    }

    pub fn inverse(&self) -> Pose {
        let inv_rot = self.rotation.inverse();
        Pose::new(inv_rot, -(inv_rot * self.translation))
    }

    /// Exponential map from a `(rho, phi)` tangent.
    pub fn exp(tangent: &Vector6<f64>) -> Pose {
        let rho = Vector3::new(tangent[0], tangent[1], tangent[2]);
        let phi = Vector3::new(tangent[3], tangent[4], tangent[5]);
        let rotation = UnitQuaternion::from_scaled_axis(phi);
        let v = exp_integral_series(&skew(&phi));
        Pose::new(rotation, v * rho)
    }

    /// Logarithmic map to a `(rho, phi)` tangent.
    ///
    /// Fails when the rotation angle is within 1e-6 of pi, where the
    /// axis-angle extraction loses the axis sign.
    pub fn log(&self) -> Result<Vector6<f64>, GeometryError> {
        let angle = self.rotation.angle();
        if angle >= LOG_ANGLE_LIMIT {
            return Err(GeometryError::NearSingularLog { angle });
        }
        let phi = self.rotation.scaled_axis();
        let v = exp_integral_series(&skew(&phi));
        let rho = v
            .lu()
            .solve(&self.translation)
            .expect("V matrix is invertible for angle < pi");
        let mut out = Vector6::zeros();
        out.fixed_rows_mut::<3>(0).copy_from(&rho);
        out.fixed_rows_mut::<3>(3).copy_from(&phi);
        Ok(out)
    }

    /// Adjoint matrix mapping tangents across `g exp(xi) g^-1 = exp(Adj_g xi)`.
    pub fn adjoint(&self) -> Matrix6<f64> {
        let r = self.rotation_matrix();
        let mut adj = Matrix6::zeros();
        adj.fixed_view_mut::<3, 3>(0, 0).copy_from(&r);
        adj.fixed_view_mut::<3, 3>(0, 3)
            .copy_from(&(skew(&self.translation) * r));
        adj.fixed_view_mut::<3, 3>(3, 3).copy_from(&r);
        adj
    }
}

impl std::ops::Mul for Pose {
    type Output = Pose;
    fn mul(self, rhs: Pose) -> Pose {
        self.compose(&rhs)
    }
}

impl std::ops::Mul<&Pose> for &Pose {
    type Output = Pose;
    fn mul(self, rhs: &Pose) -> Pose {
        self.compose(rhs)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random_tangent(rng: &mut ChaCha8Rng, scale: f64) -> Vector6<f64> {
        Vector6::from_fn(|_, _| rng.random_range(-scale..scale))
    }

    #[test]
    fn exp_of_zero_is_identity() {
        let p = Pose::exp(&Vector6::zeros());
        assert_relative_eq!(p.translation().norm(), 0.0, epsilon = 1e-15);
        assert_relative_eq!(p.rotation().angle(), 0.0, epsilon = 1e-15);
    }

    #[test]
    fn quarter_turn_about_z() {
        let mut t = Vector6::zeros();
        t[5] = std::f64::consts::FRAC_PI_2;
        let p = Pose::exp(&t);
        let v = p.transform(&Vector3::new(1.0, 0.0, 0.0));
        assert_relative_eq!(v, Vector3::new(0.0, 1.0, 0.0), epsilon = 1e-12);
    }

    #[test]
    fn log_of_identity_is_zero() {
        assert_relative_eq!(Pose::identity().log().unwrap().norm(), 0.0, epsilon = 1e-15);
    }

    #[test]
    fn log_of_pure_translation() {
        let p = Pose::from_translation(Vector3::new(1.0, 2.0, 3.0));
        let t = p.log().unwrap();
        assert_relative_eq!(
            t,
            Vector6::new(1.0, 2.0, 3.0, 0.0, 0.0, 0.0),
            epsilon = 1e-12
        );
    }

    #[test]
    fn log_exp_round_trip() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        for _ in 0..100 {
            let t = random_tangent(&mut rng, 0.4);
            let back = Pose::exp(&t).log().unwrap();
            assert_relative_eq!(back, t, epsilon = 1e-9);
        }
    }

    #[test]
    fn log_near_pi_errors() {
        let phi = Vector3::new(0.0, 0.0, std::f64::consts::PI - 1e-9);
        let p = Pose::new(UnitQuaternion::from_scaled_axis(phi), Vector3::zeros());
        assert!(matches!(
            p.log(),
            Err(GeometryError::NearSingularLog { .. })
        ));
    }

    #[test]
    fn group_axioms() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        for _ in 0..50 {
            let a = Pose::exp(&random_tangent(&mut rng, 1.0));
            let b = Pose::exp(&random_tangent(&mut rng, 1.0));
            let c = Pose::exp(&random_tangent(&mut rng, 1.0));
            let lhs = (a * b) * c;
            let rhs = a * (b * c);
            assert_relative_eq!(lhs.translation(), rhs.translation(), epsilon = 1e-9);
            assert_relative_eq!(
                lhs.rotation_matrix(),
                rhs.rotation_matrix(),
                epsilon = 1e-9
            );
            let id = a * a.inverse();
            assert_relative_eq!(id.translation().norm(), 0.0, epsilon = 1e-9);
            assert_relative_eq!(id.rotation().angle(), 0.0, epsilon = 1e-9);
        }
    }

    #[test]
    fn rotation_stays_orthonormal() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let mut p = Pose::identity();
        for _ in 0..2000 {
            p = p * Pose::exp(&random_tangent(&mut rng, 0.05));
        }
        let r = p.rotation_matrix();
        let err = (r.transpose() * r - Matrix3::identity()).norm();
        assert!(err <= 1e-9, "orthonormality drift {err}");
    }

    #[test]
    fn adjoint_matches_conjugation() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        for _ in 0..20 {
            let g = Pose::exp(&random_tangent(&mut rng, 0.8));
            let xi = random_tangent(&mut rng, 0.2);
            let lhs = (g * Pose::exp(&xi) * g.inverse()).log().unwrap();
            let rhs = g.adjoint() * xi;
            assert_relative_eq!(lhs, rhs, epsilon = 1e-9);
        }
    }
}

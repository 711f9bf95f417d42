use nalgebra::{Matrix3, SMatrix, SVector, UnitQuaternion, Vector3};
use serde::{Deserialize, Serialize};

use super::{exp_integral_series, skew, GeometryError, Pose};

pub type Vector7 = SVector<f64, 7>;
pub type Matrix7 = SMatrix<f64, 7, 7>;

const LOG_ANGLE_LIMIT: f64 = std::f64::consts::PI - 1e-6;

/// A similarity transform in Sim(3): `x -> s R x + t`.
///
/// Used for loop-closure correction, pose-graph optimization, and trajectory
/// alignment, where monocular scale drift must be expressed explicitly.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SimTransform {
    scale: f64,
    rotation: UnitQuaternion<f64>,
    translation: Vector3<f64>,
}

impl SimTransform {
    pub fn identity() -> Self {
        Self {
            scale: 1.0,
            rotation: UnitQuaternion::identity(),
            translation: Vector3::zeros(),
        }
    }

    pub fn new(scale: f64, rotation: UnitQuaternion<f64>, translation: Vector3<f64>) -> Self {
        assert!(scale > 0.0, "Sim(3) scale must be positive, got {scale}");
        Self {
            scale,
            rotation: UnitQuaternion::new_normalize(rotation.into_inner()),
            translation,
        }
    }

    pub fn from_pose(pose: &Pose) -> Self {
        Self::new(1.0, pose.rotation(), pose.translation())
    }

    /// Drops the scale into the translation, returning the rigid part.
    /// The caller is responsible for rescaling any structure attached to the
    /// frame (inverse depths scale by `s`).
    pub fn to_pose(&self) -> Pose {
        Pose::new(self.rotation, self.translation)
    }

    pub fn scale(&self) -> f64 {
        self.scale
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
        self.scale * (self.rotation * p) + self.translation
    }

    pub fn compose(&self, other: &SimTransform) -> SimTransform {
        SimTransform::new(
            self.scale * other.scale,
            self.rotation * other.rotation,
            self.scale * (self.rotation * other.translation) + self.translation,
        )
    }

    pub fn inverse(&self) -> SimTransform {
        let inv_rot = self.rotation.inverse();
        let inv_scale = 1.0 / self.scale;
        SimTransform::new(inv_scale, inv_rot, -(inv_scale * (inv_rot * self.translation)))
    }

    /// Exponential map from a `(rho, phi, sigma)` tangent.
    pub fn exp(tangent: &Vector7) -> SimTransform {
        let rho = Vector3::new(tangent[0], tangent[1], tangent[2]);
        let phi = Vector3::new(tangent[3], tangent[4], tangent[5]);
        let sigma = tangent[6];
        let rotation = UnitQuaternion::from_scaled_axis(phi);
        // t = W rho with W = integral_0^1 e^{u sigma} exp(u skew(phi)) du;
        // sigma I commutes with skew(phi) so both collapse into one series.
        let w = exp_integral_series(&(Matrix3::identity() * sigma + skew(&phi)));
        SimTransform::new(sigma.exp(), rotation, w * rho)
    }

    pub fn log(&self) -> Result<Vector7, GeometryError> {
        let angle = self.rotation.angle();
        if angle >= LOG_ANGLE_LIMIT {
            return Err(GeometryError::NearSingularLog { angle });
        }
        let phi = self.rotation.scaled_axis();
        let sigma = self.scale.ln();
        let w = exp_integral_series(&(Matrix3::identity() * sigma + skew(&phi)));
        let rho = w
            .lu()
            .solve(&self.translation)
            .expect("W matrix is invertible for angle < pi");
        let mut out = Vector7::zeros();
        out.fixed_rows_mut::<3>(0).copy_from(&rho);
        out.fixed_rows_mut::<3>(3).copy_from(&phi);
        out[6] = sigma;
        Ok(out)
    }

    /// Adjoint matrix of the group element (tangent order `rho, phi, sigma`).
    pub fn adjoint(&self) -> Matrix7 {
        let r = self.rotation_matrix();
        let mut adj = Matrix7::zeros();
        adj.fixed_view_mut::<3, 3>(0, 0).copy_from(&(self.scale * r));
        adj.fixed_view_mut::<3, 3>(0, 3)
            .copy_from(&(skew(&self.translation) * r));
        adj.fixed_view_mut::<3, 1>(0, 6)
            .copy_from(&(-self.translation));
        adj.fixed_view_mut::<3, 3>(3, 3).copy_from(&r);
        adj[(6, 6)] = 1.0;
        adj
    }
}

impl std::ops::Mul for SimTransform {
    type Output = SimTransform;
    fn mul(self, rhs: SimTransform) -> SimTransform {
        self.compose(&rhs)
    }
}

/// Little adjoint `ad(xi)` of sim(3): `ad(xi1) xi2 = [xi1, xi2]`.
pub fn sim3_ad(xi: &Vector7) -> Matrix7 {
    let rho = Vector3::new(xi[0], xi[1], xi[2]);
    let phi = Vector3::new(xi[3], xi[4], xi[5]);
    let sigma = xi[6];
    let mut ad = Matrix7::zeros();
    ad.fixed_view_mut::<3, 3>(0, 0)
        .copy_from(&(skew(&phi) + Matrix3::identity() * sigma));
    ad.fixed_view_mut::<3, 3>(0, 3).copy_from(&skew(&rho));
    ad.fixed_view_mut::<3, 1>(0, 6).copy_from(&(-rho));
    ad.fixed_view_mut::<3, 3>(3, 3).copy_from(&skew(&phi));
    ad
}

// Bernoulli numbers over factorials, B_n^+ / n!, indexed by n. Odd entries
// above 1 vanish.
const BERNOULLI_OVER_FACTORIAL: [(usize, f64); 8] = [
    (0, 1.0),
    (1, 0.5),
    (2, 1.0 / 12.0),
    (4, -1.0 / 720.0),
    (6, 1.0 / 30_240.0),
    (8, -1.0 / 1_209_600.0),
    (10, 1.0 / 47_900_160.0),
    (12, -691.0 / 1_307_674_368_000.0),
];

/// Inverse right Jacobian of Sim(3) at tangent `xi`:
/// `d/d eps log(exp(xi) exp(eps)) = inv_right_jacobian(xi) eps`.
///
/// Evaluated through the Bernoulli series in `ad(xi)`, accurate to well below
/// 1e-9 for the tangent magnitudes seen in pose-graph residuals.
pub fn sim3_inv_right_jacobian(xi: &Vector7) -> Matrix7 {
    let ad = sim3_ad(xi);
    let mut power = Matrix7::identity();
    let mut sum = Matrix7::zeros();
    let mut next = 0;
    for n in 0..=12 {
        if BERNOULLI_OVER_FACTORIAL[next].0 == n {
            sum += power * BERNOULLI_OVER_FACTORIAL[next].1;
            next += 1;
            if next == BERNOULLI_OVER_FACTORIAL.len() {
                break;
            }
        }
        power *= ad;
    }
    sum
}

/// Closed-form least-squares similarity `(s, R, t)` minimizing
/// `sum_i || s R p_i + t - q_i ||^2` (absolute orientation with scale).
///
/// Exact on noiseless consistent input; errors on fewer than three pairs or
/// a collinear/degenerate source set.
pub fn sim3_umeyama(
    from: &[Vector3<f64>],
    to: &[Vector3<f64>],
) -> Result<SimTransform, GeometryError> {
    if from.len() != to.len() || from.len() < 3 {
        return Err(GeometryError::Degenerate(format!(
            "need >= 3 point pairs, got {}",
            from.len().min(to.len())
        )));
    }
    let n = from.len() as f64;
    let mean_p: Vector3<f64> = from.iter().sum::<Vector3<f64>>() / n;
    let mean_q: Vector3<f64> = to.iter().sum::<Vector3<f64>>() / n;

    let mut cov = Matrix3::zeros();
    let mut var_p = 0.0;
    for (p, q) in from.iter().zip(to.iter()) {
        let dp = p - mean_p;
        let dq = q - mean_q;
        cov += dq * dp.transpose();
        var_p += dp.norm_squared();
    }
    cov /= n;
    var_p /= n;
    if var_p < 1e-18 {
        return Err(GeometryError::Degenerate(
            "source points are coincident".into(),
        ));
    }

    let svd = cov.svd(true, true);
    let u = svd.u.ok_or_else(|| GeometryError::Degenerate("svd failed".into()))?;
    let v_t = svd
        .v_t
        .ok_or_else(|| GeometryError::Degenerate("svd failed".into()))?;
    // Rank 1 covariance means the points are collinear: rotation about the
    // line is unobservable.
    if svd.singular_values[1] < 1e-12 * svd.singular_values[0].max(1e-300) {
        return Err(GeometryError::Degenerate(
            "source points are collinear".into(),
        ));
    }
    let mut d = Matrix3::identity();
    if (u.determinant() * v_t.determinant()) < 0.0 {
        d[(2, 2)] = -1.0;
    }
    let r = u * d * v_t;
    let scale = (svd.singular_values.dot(&d.diagonal())) / var_p;
    if !(scale > 0.0) {
        return Err(GeometryError::Degenerate(format!(
            "non-positive recovered scale {scale}"
        )));
    }
    let rotation = UnitQuaternion::from_matrix(&r);
    let t = mean_q - scale * (rotation * mean_p);
    Ok(SimTransform::new(scale, rotation, t))
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random_tangent(rng: &mut ChaCha8Rng, scale: f64) -> Vector7 {
        Vector7::from_fn(|_, _| rng.random_range(-scale..scale))
    }

    #[test]
    fn exp_of_zero_is_identity() {
        let g = SimTransform::exp(&Vector7::zeros());
        assert_relative_eq!(g.scale(), 1.0, epsilon = 1e-15);
        assert_relative_eq!(g.translation().norm(), 0.0, epsilon = 1e-15);
    }

    #[test]
    fn log_of_pure_scale() {
        let g = SimTransform::new(
            std::f64::consts::E,
            UnitQuaternion::identity(),
            Vector3::zeros(),
        );
        let t = g.log().unwrap();
        assert_relative_eq!(t[6], 1.0, epsilon = 1e-12);
        assert_relative_eq!(t.fixed_rows::<6>(0).norm(), 0.0, epsilon = 1e-12);
    }

    #[test]
    fn log_exp_round_trip() {
        let mut rng = ChaCha8Rng::seed_from_u64(21);
        for _ in 0..100 {
            let t = random_tangent(&mut rng, 0.5);
            let back = SimTransform::exp(&t).log().unwrap();
            assert_relative_eq!(back, t, epsilon = 1e-9);
        }
    }

    #[test]
    fn action_and_inverse() {
        let mut rng = ChaCha8Rng::seed_from_u64(23);
        for _ in 0..50 {
            let g = SimTransform::exp(&random_tangent(&mut rng, 0.7));
            let p = Vector3::from_fn(|_, _| rng.random_range(-5.0..5.0));
            let q = g.transform(&p);
            assert_relative_eq!(g.inverse().transform(&q), p, epsilon = 1e-9);
            let id = g * g.inverse();
            assert_relative_eq!(id.scale(), 1.0, epsilon = 1e-9);
            assert_relative_eq!(id.translation().norm(), 0.0, epsilon = 1e-9);
        }
    }

    #[test]
    fn adjoint_matches_conjugation() {
        let mut rng = ChaCha8Rng::seed_from_u64(29);
        for _ in 0..20 {
            let g = SimTransform::exp(&random_tangent(&mut rng, 0.6));
            let xi = random_tangent(&mut rng, 0.2);
            let lhs = (g * SimTransform::exp(&xi) * g.inverse()).log().unwrap();
            let rhs = g.adjoint() * xi;
            assert_relative_eq!(lhs, rhs, epsilon = 1e-9);
        }
    }

    #[test]
    fn inv_right_jacobian_matches_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(31);
        for _ in 0..30 {
            let xi = random_tangent(&mut rng, 0.4);
            let j = sim3_inv_right_jacobian(&xi);
            let g = SimTransform::exp(&xi);
            let h = 1e-6;
            for col in 0..7 {
                let mut dp = Vector7::zeros();
                dp[col] = h;
                let plus = (g * SimTransform::exp(&dp)).log().unwrap();
                let minus = (g * SimTransform::exp(&(-dp))).log().unwrap();
                let fd = (plus - minus) / (2.0 * h);
                assert_relative_eq!(j.column(col).into_owned(), fd, epsilon = 1e-6);
            }
        }
    }

    #[test]
    fn umeyama_identity_on_equal_sets() {
        let mut rng = ChaCha8Rng::seed_from_u64(37);
        let pts: Vec<Vector3<f64>> = (0..20)
            .map(|_| Vector3::from_fn(|_, _| rng.random_range(-2.0..2.0)))
            .collect();
        let g = sim3_umeyama(&pts, &pts).unwrap();
        assert_relative_eq!(g.scale(), 1.0, epsilon = 1e-12);
        assert_relative_eq!(g.translation().norm(), 0.0, epsilon = 1e-12);
    }

    #[test]
    fn umeyama_recovers_constructed_transform() {
        let mut rng = ChaCha8Rng::seed_from_u64(41);
        let gt = SimTransform::new(
            2.0,
            UnitQuaternion::from_scaled_axis(Vector3::new(0.0, 0.0, std::f64::consts::FRAC_PI_2)),
            Vector3::new(1.0, 0.0, 0.0),
        );
        let pts: Vec<Vector3<f64>> = (0..20)
            .map(|_| Vector3::from_fn(|_, _| rng.random_range(-2.0..2.0)))
            .collect();
        let moved: Vec<Vector3<f64>> = pts.iter().map(|p| gt.transform(p)).collect();
        let est = sim3_umeyama(&pts, &moved).unwrap();
        assert_relative_eq!(est.scale(), 2.0, epsilon = 1e-9);
        assert_relative_eq!(est.translation(), gt.translation(), epsilon = 1e-9);
        assert_relative_eq!(
            est.rotation_matrix(),
            gt.rotation_matrix(),
            epsilon = 1e-9
        );
    }

    #[test]
    fn umeyama_rejects_collinear_points() {
        let pts: Vec<Vector3<f64>> = (0..5)
            .map(|i| Vector3::new(i as f64, 2.0 * i as f64, -0.5 * i as f64))
            .collect();
        assert!(matches!(
            sim3_umeyama(&pts, &pts),
            Err(GeometryError::Degenerate(_))
        ));
    }
}

use nalgebra::Vector3;

use crate::geometry::{sim3_umeyama, GeometryError, Pose, SimTransform};

/// Associates two timed pose lists by nearest timestamp within half the
/// median frame period, returning paired translations.
pub fn associate(
    estimate: &[(f64, Pose)],
    ground_truth: &[(f64, Pose)],
) -> Vec<(Vector3<f64>, Vector3<f64>)> {
    if estimate.is_empty() || ground_truth.is_empty() {
        return Vec::new();
    }
    let mut period = f64::INFINITY;
    for w in ground_truth.windows(2) {
        period = period.min(w[1].0 - w[0].0);
    }
    let tol = if period.is_finite() { period * 0.5 } else { 0.5 };
    let mut out = Vec::new();
    let mut gi = 0usize;
    for (t, pose) in estimate {
        while gi + 1 < ground_truth.len()
            && (ground_truth[gi + 1].0 - t).abs() <= (ground_truth[gi].0 - t).abs()
        {
            gi += 1;
        }
        if (ground_truth[gi].0 - t).abs() <= tol {
            out.push((pose.translation(), ground_truth[gi].1.translation()));
        }
    }
    out
}

/// Closed-form Sim(3) aligning the estimate onto the ground truth
/// (Horn/Umeyama over associated translations). Errors below 3 pairs.
pub fn align_trajectories_sim3(
    estimate: &[(f64, Pose)],
    ground_truth: &[(f64, Pose)],
) -> Result<SimTransform, GeometryError> {
    let pairs = associate(estimate, ground_truth);
    if pairs.len() < 3 {
        return Err(GeometryError::Degenerate(format!(
            "need >= 3 associated pose pairs, got {}",
            pairs.len()
        )));
    }
    let from: Vec<Vector3<f64>> = pairs.iter().map(|p| p.0).collect();
    let to: Vec<Vector3<f64>> = pairs.iter().map(|p| p.1).collect();
    sim3_umeyama(&from, &to)
}

/// RMSE of translational residuals after applying the alignment.
pub fn compute_ate(
    alignment: &SimTransform,
    estimate: &[(f64, Pose)],
    ground_truth: &[(f64, Pose)],
) -> (f64, Vec<f64>) {
    let pairs = associate(estimate, ground_truth);
    let errors: Vec<f64> = pairs
        .iter()
        .map(|(e, g)| (alignment.transform(e) - g).norm())
        .collect();
    if errors.is_empty() {
        return (0.0, errors);
    }
    let rmse = (errors.iter().map(|e| e * e).sum::<f64>() / errors.len() as f64).sqrt();
    (rmse, errors)
}

/// Convenience: align then score.
pub fn aligned_ate(
    estimate: &[(f64, Pose)],
    ground_truth: &[(f64, Pose)],
) -> Result<f64, GeometryError> {
    let alignment = align_trajectories_sim3(estimate, ground_truth)?;
    Ok(compute_ate(&alignment, estimate, ground_truth).0)
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;
    use nalgebra::UnitQuaternion;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn trajectory(n: usize, seed: u64) -> Vec<(f64, Pose)> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        (0..n)
            .map(|i| {
                let t = i as f64 * 0.05;
                let pos = Vector3::new(
                    (i as f64 * 0.1).sin() + rng.random_range(-0.01..0.01),
                    i as f64 * 0.03,
                    rng.random_range(-0.2..0.2),
                );
                (t, Pose::new(UnitQuaternion::identity(), pos))
            })
            .collect()
    }

    #[test]
    fn identical_trajectories_align_to_identity_with_zero_ate() {
        let gt = trajectory(50, 1);
        let a = align_trajectories_sim3(&gt, &gt).unwrap();
        assert_relative_eq!(a.scale(), 1.0, epsilon = 1e-9);
        assert_relative_eq!(a.translation().norm(), 0.0, epsilon = 1e-9);
        let (rmse, _) = compute_ate(&a, &gt, &gt);
        assert_relative_eq!(rmse, 0.0, epsilon = 1e-12);
    }

    #[test]
    fn doubled_scale_is_inverted() {
        let gt = trajectory(50, 2);
        let est: Vec<(f64, Pose)> = gt
            .iter()
            .map(|(t, p)| (*t, Pose::new(p.rotation(), p.translation() * 2.0)))
            .collect();
        let a = align_trajectories_sim3(&est, &gt).unwrap();
        assert_relative_eq!(a.scale(), 0.5, epsilon = 1e-9);
        let (rmse, _) = compute_ate(&a, &est, &gt);
        assert_relative_eq!(rmse, 0.0, epsilon = 1e-9);
    }

    #[test]
    fn rotated_estimate_recovers_rotation() {
        let gt = trajectory(40, 3);
        let rot = UnitQuaternion::from_scaled_axis(Vector3::new(0.0, 0.0, 30f64.to_radians()));
        let est: Vec<(f64, Pose)> = gt
            .iter()
            .map(|(t, p)| (*t, Pose::new(p.rotation(), rot * p.translation())))
            .collect();
        let a = align_trajectories_sim3(&est, &gt).unwrap();
        assert_relative_eq!(
            (a.rotation() * rot).angle(),
            0.0,
            epsilon = 1e-9
        );
    }

    #[test]
    fn too_few_pairs_error() {
        let gt = trajectory(2, 4);
        assert!(align_trajectories_sim3(&gt, &gt).is_err());
    }

    #[test]
    fn antisymmetric_residuals_give_their_magnitude() {
        // Alignment is the identity when the pairs are already centered and
        // the residuals are antisymmetric: rmse = |e|.
        let a = SimTransform::identity();
        let gt = vec![
            (0.0, Pose::from_translation(Vector3::new(1.0, 0.0, 0.0))),
            (1.0, Pose::from_translation(Vector3::new(-1.0, 0.0, 0.0))),
        ];
        let est = vec![
            (0.0, Pose::from_translation(Vector3::new(1.0, 0.1, 0.0))),
            (1.0, Pose::from_translation(Vector3::new(-1.0, -0.1, 0.0))),
        ];
        let (rmse, errs) = compute_ate(&a, &est, &gt);
        assert_eq!(errs.len(), 2);
        assert_relative_eq!(rmse, 0.1, epsilon = 1e-12);
    }
}

/// Logistic utility steering the joint optimization:
/// `K = 5 e^{-2l} / (1 + e^{(30 - N_g)/4})`
/// where `l` is the pyramid level being optimized and `N_g` the current
/// inlier geometric match count. Monotone increasing in `N_g`, decreasing in
/// `l`, bounded in (0, 5).
pub fn utility_weight(level: usize, n_g_inliers: usize) -> f64 {
    let l = level as f64;
    let n = n_g_inliers as f64;
    5.0 * (-2.0 * l).exp() / (1.0 + ((30.0 - n) / 4.0).exp())
}

/// Per-landmark weights damping landmarks with large depth variance:
/// `w_i = (1/sigma_i^2) / max_j (1/sigma_j^2)`. The best-known landmark gets
/// weight exactly 1.
pub fn depth_variance_weights(variances: &[f64]) -> Vec<f64> {
    debug_assert!(variances.iter().all(|&v| v > 0.0));
    let min_var = variances.iter().cloned().fold(f64::INFINITY, f64::min);
    variances.iter().map(|&v| min_var / v).collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;

    #[test]
    fn logistic_midpoint() {
        assert_relative_eq!(utility_weight(0, 30), 2.5, epsilon = 1e-12);
    }

    #[test]
    fn saturates_at_five() {
        assert_relative_eq!(utility_weight(0, 1_000_000), 5.0, epsilon = 1e-9);
    }

    #[test]
    fn level_three_midpoint() {
        assert_relative_eq!(
            utility_weight(3, 30),
            2.5 * (-6.0f64).exp(),
            epsilon = 1e-12
        );
        assert_relative_eq!(utility_weight(3, 30), 6.196_880_4e-3, epsilon = 1e-8);
    }

    #[test]
    fn monotone_in_matches_and_levels() {
        for l in 0..6 {
            for n in 0..120 {
                assert!(utility_weight(l, n + 1) >= utility_weight(l, n));
                assert_relative_eq!(
                    utility_weight(l + 1, n),
                    utility_weight(l, n) * (-2.0f64).exp(),
                    epsilon = 1e-12
                );
            }
        }
    }

    #[test]
    fn equal_variances_get_unit_weights() {
        let w = depth_variance_weights(&[0.3, 0.3, 0.3]);
        assert!(w.iter().all(|&x| (x - 1.0).abs() < 1e-12));
    }

    #[test]
    fn hand_evaluated_pair() {
        let w = depth_variance_weights(&[0.01, 0.04]);
        assert_relative_eq!(w[0], 1.0);
        assert_relative_eq!(w[1], 0.25);
    }

    #[test]
    fn single_landmark_gets_unit_weight() {
        assert_relative_eq!(depth_variance_weights(&[0.7])[0], 1.0);
    }
}

/// Huber norm: returns `(cost, weight)` for a scalar residual.
///
/// Quadratic inside `|r| <= gamma`, linear outside; the weight is the usual
/// IRLS factor so that `weight * r` is the effective gradient contribution.
pub fn huber(residual: f64, gamma: f64) -> (f64, f64) {
    debug_assert!(gamma > 0.0);
    let a = residual.abs();
    if a <= gamma {
        (0.5 * residual * residual, 1.0)
    } else {
        (gamma * (a - 0.5 * gamma), gamma / a)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;

    #[test]
    fn quadratic_region() {
        let (cost, weight) = huber(0.5, 1.0);
        assert_relative_eq!(cost, 0.125);
        assert_relative_eq!(weight, 1.0);
    }

    #[test]
    fn linear_region() {
        let (cost, weight) = huber(2.0, 1.0);
        assert_relative_eq!(cost, 1.5);
        assert_relative_eq!(weight, 0.5);
    }

    #[test]
    fn branches_agree_at_gamma() {
        let gamma = 0.73;
        let (c_in, w_in) = huber(gamma, gamma);
        let (c_out, w_out) = huber(gamma + 1e-12, gamma);
        assert_relative_eq!(c_in, c_out, epsilon = 1e-10);
        assert_relative_eq!(w_in, w_out, epsilon = 1e-10);
        assert_relative_eq!(c_in, 0.5 * gamma * gamma, epsilon = 1e-12);
    }

    #[test]
    fn cost_is_continuous_and_monotone() {
        let gamma = 1.0;
        let mut prev = 0.0;
        for i in 0..400 {
            let r = i as f64 * 0.01;
            let (c, _) = huber(r, gamma);
            assert!(c >= prev);
            prev = c;
        }
    }
}

use nalgebra::{DMatrix, DVector};

/// Schur complement marginalization of a Gauss-Newton system
/// `H dx = -b` (energy `0.5 dx^T H dx + b^T dx`).
///
/// Rows/columns listed in `marg` are eliminated; the returned `(H', b')` is
/// the exact quadratic over the kept variables (listed in their original
/// relative order). A singular marginal block is regularized with 1e-8 on
/// the diagonal and a warning is logged.
pub fn schur_marginalize(
    h: &DMatrix<f64>,
    b: &DVector<f64>,
    marg: &[usize],
) -> (DMatrix<f64>, DVector<f64>, Vec<usize>) {
    let n = h.nrows();
    assert_eq!(h.ncols(), n);
    assert_eq!(b.len(), n);
    let marg_set: std::collections::BTreeSet<usize> = marg.iter().copied().collect();
    let keep: Vec<usize> = (0..n).filter(|i| !marg_set.contains(i)).collect();
    let m = marg_set.len();
    let k = keep.len();

    let mut h_mm = DMatrix::zeros(m, m);
    let mut h_km = DMatrix::zeros(k, m);
    let mut h_kk = DMatrix::zeros(k, k);
    let mut b_m = DVector::zeros(m);
    let mut b_k = DVector::zeros(k);
    let marg_vec: Vec<usize> = marg_set.iter().copied().collect();
    for (i, &mi) in marg_vec.iter().enumerate() {
        b_m[i] = b[mi];
        for (j, &mj) in marg_vec.iter().enumerate() {
            h_mm[(i, j)] = h[(mi, mj)];
        }
    }
    for (i, &ki) in keep.iter().enumerate() {
        b_k[i] = b[ki];
        for (j, &kj) in keep.iter().enumerate() {
            h_kk[(i, j)] = h[(ki, kj)];
        }
        for (j, &mj) in marg_vec.iter().enumerate() {
            h_km[(i, j)] = h[(ki, mj)];
        }
    }

    let h_mm_inv = match h_mm.clone().cholesky() {
        Some(chol) => chol.inverse(),
        None => {
            log::warn!("singular block during Schur marginalization; regularizing");
            let reg = &h_mm + DMatrix::identity(m, m) * 1e-8;
            match reg.clone().cholesky() {
                Some(c) => c.inverse(),
                None => reg.lu().try_inverse().expect("regularized block invertible"),
            }
        }
    };

    let h_keep = &h_kk - &h_km * &h_mm_inv * h_km.transpose();
    let b_keep = b_k - h_km * h_mm_inv * b_m;
    // Symmetrize against round-off drift.
    let h_keep = (&h_keep + h_keep.transpose()) * 0.5;
    (h_keep, b_keep, keep)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random_spd(n: usize, rng: &mut ChaCha8Rng) -> DMatrix<f64> {
        let a = DMatrix::from_fn(n, n, |_, _| rng.random_range(-1.0..1.0));
        &a * a.transpose() + DMatrix::identity(n, n) * (n as f64)
    }

    /// Linear-Gaussian oracle: on a toy problem shaped like 3 poses (3 dof
    /// each) + 4 landmarks (1 dof each), solving the full dense system and
    /// restricting to the kept states must equal marginalize-then-solve.
    #[test]
    fn solve_then_marginalize_equals_marginalize_then_solve() {
        let mut rng = ChaCha8Rng::seed_from_u64(2024);
        for _ in 0..20 {
            let n = 3 * 3 + 4;
            let h = random_spd(n, &mut rng);
            let b = DVector::from_fn(n, |_, _| rng.random_range(-1.0..1.0));

            // Marginalize the first pose block and landmarks 0 and 2.
            let marg = vec![0usize, 1, 2, 9, 11];
            let (h2, b2, keep) = schur_marginalize(&h, &b, &marg);

            let full = h.clone().cholesky().unwrap().solve(&(-&b));
            let reduced = h2.cholesky().unwrap().solve(&(-&b2));
            for (i, &ki) in keep.iter().enumerate() {
                assert!(
                    (full[ki] - reduced[i]).abs() < 1e-6,
                    "state {ki}: {} vs {}",
                    full[ki],
                    reduced[i]
                );
            }
        }
    }

    #[test]
    fn empty_marginal_set_is_identity() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let h = random_spd(5, &mut rng);
        let b = DVector::from_fn(5, |_, _| rng.random_range(-1.0..1.0));
        let (h2, b2, keep) = schur_marginalize(&h, &b, &[]);
        assert_eq!(keep, vec![0, 1, 2, 3, 4]);
        assert!((&h2 - &h).norm() < 1e-12);
        assert!((&b2 - &b).norm() < 1e-12);
    }

    #[test]
    fn singular_block_is_regularized() {
        // Marginal block is exactly zero: regularization path must not panic
        // and must keep the kept block intact.
        let mut h = DMatrix::zeros(3, 3);
        h[(1, 1)] = 2.0;
        h[(2, 2)] = 3.0;
        let b = DVector::from_vec(vec![0.0, 1.0, 1.0]);
        let (h2, _, keep) = schur_marginalize(&h, &b, &[0]);
        assert_eq!(keep, vec![1, 2]);
        assert!((h2[(0, 0)] - 2.0).abs() < 1e-9);
        assert!((h2[(1, 1)] - 3.0).abs() < 1e-9);
    }
}

use std::collections::{BTreeMap, BTreeSet, VecDeque};

use crate::geometry::{sim3_inv_right_jacobian, Matrix7, SimTransform, Vector7};
use crate::mapping::KeyframeId;

use super::LoopError;

/// One relative-pose constraint: residual `log(S_ij * S_j^-1 * S_i)`, zero
/// when `S_i^-1 * S_j` equals the measurement.
#[derive(Debug, Clone)]
pub struct PgoEdge {
    pub i: KeyframeId,
    pub j: KeyframeId,
    pub measurement: SimTransform,
    pub information: Matrix7,
}

#[derive(Debug, Clone)]
pub struct PgoResult {
    pub poses: BTreeMap<KeyframeId, SimTransform>,
    pub initial_chi2: f64,
    pub final_chi2: f64,
    pub iterations: usize,
}

/// Symmetric positive-definite solver over a profile (skyline) matrix. Rows
/// keep every entry from their first structural nonzero to the diagonal;
/// pose graphs that are chains plus a few loop edges factor in near-linear
/// time this way.
struct SkylineCholesky {
    profile: Vec<usize>,
    rows: Vec<Vec<f64>>,
}

impl SkylineCholesky {
    /// `profile[i]` = first column with a structural entry in row `i`.
    fn factor(dim: usize, profile: &[usize], get: impl Fn(usize, usize) -> f64) -> Option<Self> {
        let mut rows: Vec<Vec<f64>> = (0..dim)
            .map(|i| (profile[i]..=i).map(|j| get(i, j)).collect())
            .collect();
        for i in 0..dim {
            let pi = profile[i];
            for j in pi..=i {
                let pj = profile[j];
                let start = pi.max(pj);
                let mut sum = rows[i][j - pi];
                for k in start..j {
                    sum -= rows[i][k - pi] * rows[j][k - pj];
                }
                if j < i {
                    let djj = rows[j][j - pj];
                    if djj.abs() < 1e-300 {
                        return None;
                    }
                    rows[i][j - pi] = sum / djj;
                } else {
                    if sum <= 0.0 {
                        return None;
                    }
                    rows[i][j - pi] = sum.sqrt();
                }
            }
        }
        Some(Self {
            profile: profile.to_vec(),
            rows,
        })
    }

    fn solve(&self, b: &[f64]) -> Vec<f64> {
        let n = b.len();
        let mut y = vec![0.0; n];
        for i in 0..n {
            let pi = self.profile[i];
            let mut sum = b[i];
            for k in pi..i {
                sum -= self.rows[i][k - pi] * y[k];
            }
            y[i] = sum / self.rows[i][i - pi];
        }
        let mut x = vec![0.0; n];
        for i in (0..n).rev() {
            let mut sum = y[i];
            for j in (i + 1)..n {
                let pj = self.profile[j];
                if i >= pj {
                    sum -= self.rows[j][i - pj] * x[j];
                }
            }
            x[i] = sum / self.rows[i][i - self.profile[i]];
        }
        x
    }
}

fn edge_residual(edge: &PgoEdge, si: &SimTransform, sj: &SimTransform) -> Option<Vector7> {
    (edge.measurement * sj.inverse() * *si).log().ok()
}

/// Levenberg-damped least squares over per-keyframe Sim(3) states.
///
/// `fixed` keyframes stay bit-identical; every connected component must
/// contain at least one fixed node. Total chi^2 is non-increasing across
/// accepted iterations.
pub fn pose_graph_optimize(
    initial: &BTreeMap<KeyframeId, SimTransform>,
    edges: &[PgoEdge],
    fixed: &BTreeSet<KeyframeId>,
    max_iterations: usize,
) -> Result<PgoResult, LoopError> {
    if fixed.is_empty() {
        return Err(LoopError::NoFixedKeyframes);
    }
    // Connectivity: BFS from the fixed set over the edge list.
    let mut adjacency: BTreeMap<KeyframeId, Vec<KeyframeId>> = BTreeMap::new();
    for e in edges {
        adjacency.entry(e.i).or_default().push(e.j);
        adjacency.entry(e.j).or_default().push(e.i);
    }
    let mut reached: BTreeSet<KeyframeId> = fixed.clone();
    let mut queue: VecDeque<KeyframeId> = fixed.iter().copied().collect();
    while let Some(k) = queue.pop_front() {
        for n in adjacency.get(&k).into_iter().flatten() {
            if reached.insert(*n) {
                queue.push_back(*n);
            }
        }
    }
    let unreachable: Vec<KeyframeId> = initial
        .keys()
        .filter(|k| !reached.contains(k))
        .copied()
        .collect();
    if !unreachable.is_empty() {
        return Err(LoopError::DisconnectedComponent(format!(
            "{} keyframes unreachable from any fixed node (first: {})",
            unreachable.len(),
            unreachable[0]
        )));
    }

    let free: Vec<KeyframeId> = initial
        .keys()
        .filter(|k| !fixed.contains(k))
        .copied()
        .collect();
    let index: BTreeMap<KeyframeId, usize> =
        free.iter().enumerate().map(|(i, k)| (*k, i)).collect();
    let dim = 7 * free.len();

    let mut poses = initial.clone();
    let chi2_of = |poses: &BTreeMap<KeyframeId, SimTransform>| -> f64 {
        edges
            .iter()
            .filter_map(|e| {
                let r = edge_residual(e, &poses[&e.i], &poses[&e.j])?;
                Some((r.transpose() * e.information * r)[(0, 0)])
            })
            .sum()
    };
    let initial_chi2 = chi2_of(&poses);
    let mut chi2 = initial_chi2;
    let mut lambda = 1e-6;
    let mut iterations = 0;

    if dim == 0 {
        return Ok(PgoResult {
            poses,
            initial_chi2,
            final_chi2: chi2,
            iterations,
        });
    }

    // Skyline profile: for each scalar row, the lowest-index coupled column.
    let mut first_col: Vec<usize> = (0..free.len()).collect();
    for e in edges {
        if let (Some(&bi), Some(&bj)) = (index.get(&e.i), index.get(&e.j)) {
            let lo = bi.min(bj);
            first_col[bi] = first_col[bi].min(lo);
            first_col[bj] = first_col[bj].min(lo);
        }
    }

    for _ in 0..max_iterations {
        iterations += 1;
        // Assemble the normal equations in block-sparse form.
        let mut diag: Vec<Matrix7> = vec![Matrix7::zeros(); free.len()];
        let mut off: BTreeMap<(usize, usize), Matrix7> = BTreeMap::new();
        let mut grad: Vec<Vector7> = vec![Vector7::zeros(); free.len()];

        for e in edges {
            let si = poses[&e.i];
            let sj = poses[&e.j];
            let Some(r) = edge_residual(e, &si, &sj) else { continue };
            let jr_inv = sim3_inv_right_jacobian(&r);
            let ji = jr_inv;
            let jj = -jr_inv * (si.inverse() * sj).adjoint();
            let fi = index.get(&e.i).copied();
            let fj = index.get(&e.j).copied();
            if let Some(bi) = fi {
                diag[bi] += ji.transpose() * e.information * ji;
                grad[bi] -= ji.transpose() * e.information * r;
            }
            if let Some(bj) = fj {
                diag[bj] += jj.transpose() * e.information * jj;
                grad[bj] -= jj.transpose() * e.information * r;
            }
            if let (Some(bi), Some(bj)) = (fi, fj) {
                let (lo, hi, jl, jh) = if bi <= bj {
                    (bi, bj, ji, jj)
                } else {
                    (bj, bi, jj, ji)
                };
                *off.entry((hi, lo)).or_insert_with(Matrix7::zeros) +=
                    jh.transpose() * e.information * jl;
            }
        }

        let damped_get = |row: usize, col: usize| -> f64 {
            let (br, ir) = (row / 7, row % 7);
            let (bc, ic) = (col / 7, col % 7);
            if br == bc {
                let mut v = diag[br][(ir, ic)];
                if ir == ic {
                    v += lambda * diag[br][(ir, ir)].max(1e-12);
                }
                v
            } else if br > bc {
                off.get(&(br, bc)).map(|m| m[(ir, ic)]).unwrap_or(0.0)
            } else {
                off.get(&(bc, br)).map(|m| m[(ic, ir)]).unwrap_or(0.0)
            }
        };
        let profile: Vec<usize> = (0..dim).map(|row| 7 * first_col[row / 7]).collect();
        let Some(chol) = SkylineCholesky::factor(dim, &profile, damped_get) else {
            lambda *= 10.0;
            continue;
        };
        let b: Vec<f64> = (0..dim).map(|i| grad[i / 7][i % 7]).collect();
        let delta = chol.solve(&b);

        let mut candidate = poses.clone();
        for (bi, kf) in free.iter().enumerate() {
            let d = Vector7::from_iterator((0..7).map(|a| delta[7 * bi + a]));
            candidate.insert(*kf, poses[kf] * SimTransform::exp(&d));
        }
        let chi2_new = chi2_of(&candidate);
        if chi2_new.is_finite() && chi2_new <= chi2 {
            let step: f64 = delta.iter().map(|d| d * d).sum::<f64>().sqrt();
            poses = candidate;
            let decrease = chi2 - chi2_new;
            chi2 = chi2_new;
            lambda = (lambda * 0.5).max(1e-12);
            if step < 1e-10 || decrease < 1e-12 * chi2.max(1.0) {
                break;
            }
        } else {
            lambda *= 10.0;
            if lambda > 1e10 {
                break;
            }
        }
    }

    Ok(PgoResult {
        poses,
        initial_chi2,
        final_chi2: chi2,
        iterations,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;
    use nalgebra::DVector;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn info_identity() -> Matrix7 {
        Matrix7::identity()
    }

    #[test]
    fn zero_residual_graph_is_a_fixed_point() {
        let mut poses = BTreeMap::new();
        let mut edges = Vec::new();
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let mut cur = SimTransform::identity();
        for i in 0..6u64 {
            poses.insert(KeyframeId(i), cur);
            if i < 5 {
                let step = SimTransform::exp(&Vector7::from_fn(|_, _| rng.random_range(-0.2..0.2)));
                edges.push(PgoEdge {
                    i: KeyframeId(i),
                    j: KeyframeId(i + 1),
                    measurement: step,
                    information: info_identity(),
                });
                cur = cur * step;
            }
        }
        let fixed: BTreeSet<KeyframeId> = [KeyframeId(0)].into_iter().collect();
        let result = pose_graph_optimize(&poses, &edges, &fixed, 20).unwrap();
        assert!(result.initial_chi2 < 1e-18);
        assert!(result.final_chi2 <= result.initial_chi2 + 1e-18);
        for (k, p) in &result.poses {
            assert_relative_eq!(
                (poses[k].inverse() * *p).log().unwrap().norm(),
                0.0,
                epsilon = 1e-9
            );
        }
    }

    #[test]
    fn disconnected_component_is_reported() {
        let mut poses = BTreeMap::new();
        for i in 0..4u64 {
            poses.insert(KeyframeId(i), SimTransform::identity());
        }
        let edges = vec![PgoEdge {
            i: KeyframeId(0),
            j: KeyframeId(1),
            measurement: SimTransform::identity(),
            information: info_identity(),
        }];
        let fixed: BTreeSet<KeyframeId> = [KeyframeId(0)].into_iter().collect();
        let err = pose_graph_optimize(&poses, &edges, &fixed, 5).unwrap_err();
        assert!(matches!(err, LoopError::DisconnectedComponent(_)));
    }

    /// Brute-force oracle: dense Levenberg-Marquardt with numerical
    /// Jacobians over the stacked tangents of the free poses.
    fn brute_force(
        initial: &BTreeMap<KeyframeId, SimTransform>,
        edges: &[PgoEdge],
        fixed: &BTreeSet<KeyframeId>,
    ) -> BTreeMap<KeyframeId, SimTransform> {
        let free: Vec<KeyframeId> = initial.keys().filter(|k| !fixed.contains(k)).copied().collect();
        let mut poses = initial.clone();
        let whitened = |poses: &BTreeMap<KeyframeId, SimTransform>| -> DVector<f64> {
            let mut r = DVector::zeros(7 * edges.len());
            for (ei, e) in edges.iter().enumerate() {
                let res = (e.measurement * poses[&e.j].inverse() * poses[&e.i])
                    .log()
                    .unwrap();
                let white = e.information.cholesky().unwrap().l().transpose() * res;
                r.rows_mut(7 * ei, 7).copy_from(&white);
            }
            r
        };
        let apply = |poses: &BTreeMap<KeyframeId, SimTransform>, dx: &DVector<f64>| {
            let mut out = poses.clone();
            for (fi, kf) in free.iter().enumerate() {
                let d = Vector7::from_iterator((0..7).map(|a| dx[7 * fi + a]));
                out.insert(*kf, poses[kf] * SimTransform::exp(&d));
            }
            out
        };
        let mut lambda = 1e-6;
        for _ in 0..200 {
            let r0 = whitened(&poses);
            let n = 7 * free.len();
            let mut jac = nalgebra::DMatrix::zeros(r0.len(), n);
            let h = 1e-7;
            for c in 0..n {
                let mut dx = DVector::zeros(n);
                dx[c] = h;
                let rp = whitened(&apply(&poses, &dx));
                dx[c] = -h;
                let rm = whitened(&apply(&poses, &dx));
                jac.set_column(c, &((rp - rm) / (2.0 * h)));
            }
            let jt = jac.transpose();
            let mut a = &jt * &jac;
            for i in 0..n {
                a[(i, i)] += lambda * a[(i, i)].max(1e-12);
            }
            let g = &jt * &r0;
            let Some(dx) = a.cholesky().map(|c| c.solve(&(-&g))) else {
                lambda *= 10.0;
                continue;
            };
            let cand = apply(&poses, &dx);
            let c_new = whitened(&cand).norm_squared();
            if c_new <= r0.norm_squared() {
                poses = cand;
                lambda = (lambda * 0.5).max(1e-12);
                if dx.norm() < 1e-12 {
                    break;
                }
            } else {
                lambda *= 10.0;
            }
        }
        poses
    }

    #[test]
    fn chain_with_loop_edge_matches_brute_force() {
        let mut rng = ChaCha8Rng::seed_from_u64(17);
        for trial in 0..3 {
            let mut gt = BTreeMap::new();
            let mut cur = SimTransform::identity();
            let n = 4 + trial;
            for i in 0..n as u64 {
                gt.insert(KeyframeId(i), cur);
                cur = cur
                    * SimTransform::exp(&Vector7::from_fn(|_, _| rng.random_range(-0.3..0.3)));
            }
            let mut edges = Vec::new();
            for i in 0..(n - 1) as u64 {
                let m = gt[&KeyframeId(i)].inverse() * gt[&KeyframeId(i + 1)];
                edges.push(PgoEdge {
                    i: KeyframeId(i),
                    j: KeyframeId(i + 1),
                    measurement: m,
                    information: info_identity(),
                });
            }
            // Loop edge closing first to last.
            let m = gt[&KeyframeId(0)].inverse() * gt[&KeyframeId(n as u64 - 1)];
            edges.push(PgoEdge {
                i: KeyframeId(0),
                j: KeyframeId(n as u64 - 1),
                measurement: m,
                information: info_identity(),
            });

            // Drifted initialization.
            let mut init = gt.clone();
            for i in 1..n as u64 {
                let noise =
                    SimTransform::exp(&Vector7::from_fn(|_, _| rng.random_range(-0.05..0.05)));
                init.insert(KeyframeId(i), gt[&KeyframeId(i)] * noise);
            }
            let fixed: BTreeSet<KeyframeId> = [KeyframeId(0)].into_iter().collect();
            let ours = pose_graph_optimize(&init, &edges, &fixed, 60).unwrap();
            let brute = brute_force(&init, &edges, &fixed);
            for k in init.keys() {
                let diff = (ours.poses[k].inverse() * brute[k]).log().unwrap().norm();
                assert!(diff < 1e-6, "trial {trial} {k}: solutions differ by {diff}");
            }
            assert!(ours.final_chi2 <= ours.initial_chi2);
        }
    }

    #[test]
    fn skyline_matches_dense_solve() {
        let mut rng = ChaCha8Rng::seed_from_u64(23);
        // Random SPD with chain + one long-range coupling.
        let n = 40;
        let mut a = nalgebra::DMatrix::<f64>::zeros(n, n);
        for i in 0..n {
            a[(i, i)] = rng.random_range(2.0..4.0);
            if i + 1 < n {
                let v = rng.random_range(-0.5..0.5);
                a[(i, i + 1)] = v;
                a[(i + 1, i)] = v;
            }
        }
        let v = rng.random_range(-0.5..0.5);
        a[(2, n - 3)] = v;
        a[(n - 3, 2)] = v;
        let b: Vec<f64> = (0..n).map(|_| rng.random_range(-1.0..1.0)).collect();
        let mut profile: Vec<usize> = (0..n).map(|i| i.saturating_sub(1)).collect();
        profile[n - 3] = 2;
        let chol = SkylineCholesky::factor(n, &profile, |r, c| a[(r, c)]).unwrap();
        let x = chol.solve(&b);
        let dense = a
            .cholesky()
            .unwrap()
            .solve(&DVector::from_column_slice(&b));
        for i in 0..n {
            assert_relative_eq!(x[i], dense[i], epsilon = 1e-9);
        }
    }
}

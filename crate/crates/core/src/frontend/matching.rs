use nalgebra::Vector2;

use crate::config::FrontendConfig;

use super::Feature;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct FeatureMatch {
    pub query: usize,
    pub reference: usize,
    pub hamming: u32,
}

struct Grid {
    cell: f64,
    cols: usize,
    buckets: Vec<Vec<usize>>,
}

impl Grid {
    fn build(points: &[Vector2<f64>], cell: f64) -> Self {
        let cols = 1 + points
            .iter()
            .map(|p| (p.x.max(0.0) / cell) as usize)
            .max()
            .unwrap_or(0);
        let rows = 1 + points
            .iter()
            .map(|p| (p.y.max(0.0) / cell) as usize)
            .max()
            .unwrap_or(0);
        let mut buckets = vec![Vec::new(); cols * rows];
        for (i, p) in points.iter().enumerate() {
            let cx = (p.x.max(0.0) / cell) as usize;
            let cy = (p.y.max(0.0) / cell) as usize;
            buckets[cy * cols + cx].push(i);
        }
        Self { cell, cols, buckets }
    }

    fn near(&self, p: &Vector2<f64>) -> impl Iterator<Item = usize> + '_ {
        let cx = (p.x.max(0.0) / self.cell) as i64;
        let cy = (p.y.max(0.0) / self.cell) as i64;
        let rows = self.buckets.len() / self.cols.max(1);
        let cols = self.cols as i64;
        (-1..=1)
            .flat_map(move |dy| (-1..=1).map(move |dx| (cx + dx, cy + dy)))
            .filter(move |&(x, y)| x >= 0 && y >= 0 && x < cols && y < (rows as i64))
            .flat_map(move |(x, y)| self.buckets[y as usize * self.cols + x as usize].iter().copied())
    }
}

/// Best and second-best Hamming distances among `candidates`, ties broken by
/// the lower index so the result is deterministic.
fn best_two(
    desc: &super::BinaryDescriptor,
    candidates: impl Iterator<Item = usize>,
    others: &[Feature],
) -> Option<(usize, u32, u32)> {
    let mut best: Option<(u32, usize)> = None;
    let mut second = u32::MAX;
    for idx in candidates {
        let d = desc.hamming(&others[idx].descriptor);
        match best {
            None => best = Some((d, idx)),
            Some((bd, bi)) => {
                if d < bd || (d == bd && idx < bi) {
                    second = second.min(bd);
                    best = Some((d, idx));
                } else {
                    second = second.min(d);
                }
            }
        }
    }
    best.map(|(d, i)| (i, d, second))
}

fn ratio_ok(best: u32, second: u32, ratio: f64) -> bool {
    second == u32::MAX || (best as f64) <= ratio * (second as f64)
}

/// Mutual-best Hamming matching where each query searches around an
/// externally supplied center (e.g. a motion-predicted pixel) instead of its
/// own location.
pub fn match_with_centers(
    query: &[Feature],
    centers: &[Vector2<f64>],
    reference: &[Feature],
    radius: Option<f64>,
    cfg: &FrontendConfig,
) -> Vec<FeatureMatch> {
    assert_eq!(query.len(), centers.len());
    if query.is_empty() || reference.is_empty() {
        return Vec::new();
    }
    let t_h = cfg.hamming_threshold;
    let ratio = cfg.match_ratio;

    let ref_points: Vec<Vector2<f64>> = reference.iter().map(|f| f.uv).collect();
    let grids = radius.map(|r| {
        (
            Grid::build(&ref_points, r.max(1.0)),
            Grid::build(centers, r.max(1.0)),
        )
    });

    let within = |a: &Vector2<f64>, b: &Vector2<f64>| match radius {
        Some(r) => (a - b).norm() <= r,
        None => true,
    };

    // Forward: query -> best reference.
    let mut forward: Vec<Option<(usize, u32)>> = vec![None; query.len()];
    for (qi, q) in query.iter().enumerate() {
        let found = match &grids {
            Some((ref_grid, _)) => best_two(
                &q.descriptor,
                ref_grid
                    .near(&centers[qi])
                    .filter(|&ri| within(&centers[qi], &reference[ri].uv)),
                reference,
            ),
            None => best_two(&q.descriptor, 0..reference.len(), reference),
        };
        if let Some((ri, best, second)) = found {
            if best <= t_h && ratio_ok(best, second, ratio) {
                forward[qi] = Some((ri, best));
            }
        }
    }

    // Backward: reference -> best query (searching query centers).
    let mut backward: Vec<Option<(usize, u32)>> = vec![None; reference.len()];
    for (ri, r) in reference.iter().enumerate() {
        let found = match &grids {
            Some((_, center_grid)) => best_two(
                &r.descriptor,
                center_grid
                    .near(&r.uv)
                    .filter(|&qi| within(&centers[qi], &r.uv)),
                query,
            ),
            None => best_two(&r.descriptor, 0..query.len(), query),
        };
        if let Some((qi, best, second)) = found {
            if best <= t_h && ratio_ok(best, second, ratio) {
                backward[ri] = Some((qi, best));
            }
        }
    }

    let mut out = Vec::new();
    for (qi, fwd) in forward.iter().enumerate() {
        if let Some((ri, hamming)) = fwd {
            if let Some((back_qi, _)) = backward[*ri] {
                if back_qi == qi {
                    out.push(FeatureMatch {
                        query: qi,
                        reference: *ri,
                        hamming: *hamming,
                    });
                }
            }
        }
    }
    out
}

/// Mutual-best matching between two feature sets; when `search_radius` is
/// given, candidates are restricted to references within that distance of
/// the query's own pixel.
pub fn match_features(
    query: &[Feature],
    reference: &[Feature],
    search_radius: Option<f64>,
    cfg: &FrontendConfig,
) -> Vec<FeatureMatch> {
    let centers: Vec<Vector2<f64>> = query.iter().map(|f| f.uv).collect();
    match_with_centers(query, &centers, reference, search_radius, cfg)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::frontend::{BinaryDescriptor, FeatureKind};

    fn feature(uv: (f64, f64), words: [u64; 4]) -> Feature {
        Feature {
            uv: Vector2::new(uv.0, uv.1),
            kind: FeatureKind::Corner,
            descriptor: BinaryDescriptor(words),
            patch: [0.0; 8],
            gradient_mag: 1.0,
        }
    }

    fn distinct_descriptor(i: u64) -> [u64; 4] {
        // Spread bits far apart so distances between different features are
        // large.
        [i * 0x0101_0101, !(i * 0x1111), i.rotate_left(17), i.wrapping_mul(0x9E37)]
    }

    #[test]
    fn identical_lists_match_identity() {
        let feats: Vec<Feature> = (0..20)
            .map(|i| feature((i as f64 * 10.0, 5.0), distinct_descriptor(i + 1)))
            .collect();
        let matches = match_features(&feats, &feats, None, &FrontendConfig::default());
        assert_eq!(matches.len(), 20);
        for m in matches {
            assert_eq!(m.query, m.reference);
            assert_eq!(m.hamming, 0);
        }
    }

    #[test]
    fn distance_above_threshold_is_rejected() {
        let a = vec![feature((0.0, 0.0), [0; 4])];
        let b = vec![feature((0.0, 0.0), [u64::MAX; 4])];
        assert!(match_features(&a, &b, None, &FrontendConfig::default()).is_empty());
    }

    #[test]
    fn radius_excludes_distant_identical_descriptor() {
        let a = vec![feature((0.0, 0.0), [42; 4])];
        let b = vec![feature((100.0, 0.0), [42; 4])];
        assert!(match_features(&a, &b, Some(20.0), &FrontendConfig::default()).is_empty());
        assert_eq!(
            match_features(&a, &b, Some(150.0), &FrontendConfig::default()).len(),
            1
        );
    }

    #[test]
    fn matching_is_symmetric() {
        let mut a = Vec::new();
        let mut b = Vec::new();
        for i in 0..30u64 {
            a.push(feature((i as f64 * 7.0, 3.0), distinct_descriptor(i + 1)));
            // b has the same descriptors slightly perturbed plus some noise
            // features.
            let mut words = distinct_descriptor(i + 1);
            words[0] ^= 1 << (i % 60);
            b.push(feature((i as f64 * 7.0 + 1.0, 3.5), words));
        }
        for i in 0..10u64 {
            b.push(feature((200.0 + i as f64, 50.0), distinct_descriptor(100 + i)));
        }
        let cfg = FrontendConfig::default();
        let ab = match_features(&a, &b, None, &cfg);
        let ba = match_features(&b, &a, None, &cfg);
        let mut ab_pairs: Vec<(usize, usize)> = ab.iter().map(|m| (m.query, m.reference)).collect();
        let mut ba_pairs: Vec<(usize, usize)> = ba.iter().map(|m| (m.reference, m.query)).collect();
        ab_pairs.sort_unstable();
        ba_pairs.sort_unstable();
        assert_eq!(ab_pairs, ba_pairs);
        assert!(!ab_pairs.is_empty());
    }
}

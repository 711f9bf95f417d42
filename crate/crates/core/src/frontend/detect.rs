use nalgebra::Vector2;

use crate::config::FrontendConfig;
use crate::img::Image;

use super::descriptor::{extract_descriptor, extract_patch, FEATURE_BORDER};
use super::{Feature, FeatureKind, ImagePyramid};

/// FAST circle of radius 3 (16 pixels, clockwise from 12 o'clock).
const CIRCLE: [(i32, i32); 16] = [
    (0, -3),
    (1, -3),
    (2, -2),
    (3, -1),
    (3, 0),
    (3, 1),
    (2, 2),
    (1, 3),
    (0, 3),
    (-1, 3),
    (-2, 2),
    (-3, 1),
    (-3, 0),
    (-3, -1),
    (-3, -2),
    (-3, -3),
];

const ARC_LENGTH: usize = 9;

/// Sobel gradient magnitude per pixel (zero on the 1-px border).
pub fn sobel_magnitude(img: &Image) -> Vec<f32> {
    let w = img.width();
    let h = img.height();
    let mut mag = vec![0.0f32; w * h];
    for y in 1..h - 1 {
        for x in 1..w - 1 {
            let gx = (img.get(x + 1, y - 1) + 2.0 * img.get(x + 1, y) + img.get(x + 1, y + 1))
                - (img.get(x - 1, y - 1) + 2.0 * img.get(x - 1, y) + img.get(x - 1, y + 1));
            let gy = (img.get(x - 1, y + 1) + 2.0 * img.get(x, y + 1) + img.get(x + 1, y + 1))
                - (img.get(x - 1, y - 1) + 2.0 * img.get(x, y - 1) + img.get(x + 1, y - 1));
            mag[y * w + x] = (gx * gx + gy * gy).sqrt() * 0.125;
        }
    }
    mag
}

/// Segment test: does a contiguous arc of >= 9 circle pixels sit entirely
/// above `c + t` or below `c - t`? Returns the absolute-difference score of
/// the qualifying set, or None.
fn segment_test(img: &Image, x: usize, y: usize, t: f32) -> Option<f32> {
    let c = img.get(x, y);
    let mut diffs = [0.0f32; 16];
    for (i, (dx, dy)) in CIRCLE.iter().enumerate() {
        diffs[i] = img.get((x as i32 + dx) as usize, (y as i32 + dy) as usize) - c;
    }
    // Compass-point pre-test: an arc of 9 always covers two consecutive
    // compass points.
    let bright_compass = [0, 4, 8, 12].iter().filter(|&&i| diffs[i] > t).count();
    let dark_compass = [0, 4, 8, 12].iter().filter(|&&i| diffs[i] < -t).count();
    if bright_compass < 2 && dark_compass < 2 {
        return None;
    }
    for (sign, pass) in [(1.0f32, bright_compass), (-1.0f32, dark_compass)] {
        if pass < 2 {
            continue;
        }
        let mut run = 0usize;
        let mut best_run = 0usize;
        for i in 0..32 {
            if sign * diffs[i % 16] > t {
                run += 1;
                best_run = best_run.max(run);
                if best_run >= 16 {
                    break;
                }
            } else {
                run = 0;
            }
        }
        if best_run >= ARC_LENGTH {
            let score: f32 = diffs
                .iter()
                .filter(|&&d| sign * d > t)
                .map(|d| d.abs() - t)
                .sum();
            return Some(score);
        }
    }
    None
}

/// Gradient-orthogonality subpixel refinement: solves for the point where
/// every neighborhood gradient is perpendicular to its offset from the
/// corner, `sum w G (x* - p) = 0` with `G = grad grad^T`.
fn refine_corner(img: &Image, x: usize, y: usize) -> Vector2<f64> {
    let mut pt = Vector2::new(x as f64, y as f64);
    for _ in 0..3 {
        let mut a = nalgebra::Matrix2::<f64>::zeros();
        let mut b = Vector2::<f64>::zeros();
        for dy in -3i32..=3 {
            for dx in -3i32..=3 {
                let u = pt.x + dx as f64;
                let v = pt.y + dy as f64;
                if u < 1.0
                    || v < 1.0
                    || u > (img.width() - 2) as f64
                    || v > (img.height() - 2) as f64
                {
                    continue;
                }
                let gx = (img.sample(u + 1.0, v) - img.sample(u - 1.0, v)) * 0.5;
                let gy = (img.sample(u, v + 1.0) - img.sample(u, v - 1.0)) * 0.5;
                let g = nalgebra::Matrix2::new(gx * gx, gx * gy, gx * gy, gy * gy);
                a += g;
                b += g * Vector2::new(u, v);
            }
        }
        let Some(solved) = a.lu().solve(&b) else { break };
        let step = solved - pt;
        if step.norm() > 2.0 {
            // Diverging fit; keep the integer location.
            return Vector2::new(x as f64, y as f64);
        }
        pt = solved;
        if step.norm() < 1e-3 {
            break;
        }
    }
    let max_shift = 1.5;
    if (pt.x - x as f64).abs() > max_shift || (pt.y - y as f64).abs() > max_shift {
        Vector2::new(x as f64, y as f64)
    } else {
        pt
    }
}

fn median_and_mad(values: &mut [f32]) -> (f32, f32) {
    if values.is_empty() {
        return (0.0, 0.0);
    }
    values.sort_by(|a, b| a.partial_cmp(b).unwrap());
    let median = values[values.len() / 2];
    let mut dev: Vec<f32> = values.iter().map(|v| (v - median).abs()).collect();
    dev.sort_by(|a, b| a.partial_cmp(b).unwrap());
    (median, dev[dev.len() / 2])
}

/// Stateful detector; the FAST threshold adapts across frames to keep the
/// corner count near its share of the feature budget.
#[derive(Debug, Clone)]
pub struct FeatureDetector {
    cfg: FrontendConfig,
    fast_threshold: f64,
}

impl FeatureDetector {
    pub fn new(cfg: FrontendConfig) -> Self {
        let fast_threshold = cfg.fast_threshold;
        Self {
            cfg,
            fast_threshold,
        }
    }

    pub fn fast_threshold(&self) -> f64 {
        self.fast_threshold
    }

    /// Extracts up to `target_count` features from level 0 of the pyramid:
    /// FAST corners first (subpixel-refined), then gradient pixels above a
    /// per-cell median + k*MAD cutoff, spatially capped per grid cell. Every
    /// feature gets both descriptor forms.
    pub fn detect(&mut self, pyramid: &ImagePyramid, target_count: usize) -> Vec<Feature> {
        assert!(target_count > 0);
        let img = pyramid.level(0);
        let w = img.width();
        let h = img.height();
        let border = FEATURE_BORDER;
        if w <= 2 * border || h <= 2 * border {
            return Vec::new();
        }
        let smoothed = img.smoothed();
        let grad = sobel_magnitude(img);

        let grid = self.cfg.grid.max(1);
        let cell_cap = target_count / (grid * grid) + self.cfg.cell_slack;
        let cell_w = (w as f64 / grid as f64).ceil() as usize;
        let cell_h = (h as f64 / grid as f64).ceil() as usize;
        let cell_of = |x: usize, y: usize| (y / cell_h) * grid + x / cell_w;

        // FAST corners with 3x3 non-maximal suppression on the score map.
        let t = self.fast_threshold as f32;
        let mut score = vec![0.0f32; w * h];
        for y in border..h - border {
            for x in border..w - border {
                if let Some(s) = segment_test(img, x, y, t) {
                    score[y * w + x] = s;
                }
            }
        }
        let mut corners: Vec<(f32, usize, usize)> = Vec::new();
        for y in border..h - border {
            for x in border..w - border {
                let s = score[y * w + x];
                if s <= 0.0 {
                    continue;
                }
                let mut is_max = true;
                'nms: for dy in -1i32..=1 {
                    for dx in -1i32..=1 {
                        if (dx, dy) == (0, 0) {
                            continue;
                        }
                        let n = score[(y as i32 + dy) as usize * w + (x as i32 + dx) as usize];
                        if n > s || (n == s && (dy < 0 || (dy == 0 && dx < 0))) {
                            is_max = false;
                            break 'nms;
                        }
                    }
                }
                if is_max {
                    corners.push((s, x, y));
                }
            }
        }
        let raw_corner_count = corners.len();
        corners.sort_by(|a, b| b.0.partial_cmp(&a.0).unwrap().then(a.1.cmp(&b.1)).then(a.2.cmp(&b.2)));

        let mut cell_counts = vec![0usize; grid * grid];
        let mut occupied = vec![false; w * h];
        let mut features: Vec<Feature> = Vec::new();

        for (_, x, y) in corners {
            if features.len() >= target_count {
                break;
            }
            let uv = refine_corner(img, x, y);
            let cell = cell_of(
                (uv.x.max(0.0) as usize).min(w - 1),
                (uv.y.max(0.0) as usize).min(h - 1),
            );
            if cell_counts[cell] >= cell_cap {
                continue;
            }
            features.push(Feature {
                uv,
                kind: FeatureKind::Corner,
                descriptor: extract_descriptor(&smoothed, &uv),
                patch: extract_patch(img, &uv),
                gradient_mag: grad[y * w + x] as f64,
            });
            cell_counts[cell] += 1;
            occupied[y * w + x] = true;
        }

        // Track the corner share of the budget for the next frame.
        let corner_target = (target_count as f64 * self.cfg.corner_share).max(1.0);
        if (raw_corner_count as f64) < 0.8 * corner_target {
            self.fast_threshold =
                (self.fast_threshold * 0.7).max(self.cfg.fast_threshold_min);
        } else if (raw_corner_count as f64) > 1.2 * corner_target {
            self.fast_threshold =
                (self.fast_threshold * 1.3).min(self.cfg.fast_threshold_max);
        }

        // Gradient features fill the remaining budget: per-cell dynamic
        // cutoff at median + k * MAD so the threshold tracks local contrast.
        let k = self.cfg.gradient_mad_factor as f32;
        for cy in 0..grid {
            for cx in 0..grid {
                let cell = cy * grid + cx;
                if cell_counts[cell] >= cell_cap {
                    continue;
                }
                let x0 = (cx * cell_w).max(border);
                let y0 = (cy * cell_h).max(border);
                let x1 = ((cx + 1) * cell_w).min(w - border);
                let y1 = ((cy + 1) * cell_h).min(h - border);
                if x0 >= x1 || y0 >= y1 {
                    continue;
                }
                let mut mags: Vec<f32> = Vec::with_capacity((x1 - x0) * (y1 - y0));
                for y in y0..y1 {
                    for x in x0..x1 {
                        mags.push(grad[y * w + x]);
                    }
                }
                let (median, mad) = median_and_mad(&mut mags);
                let cutoff = (median + k * mad).max(1e-6);
                let mut candidates: Vec<(f32, usize, usize)> = Vec::new();
                for y in y0..y1 {
                    for x in x0..x1 {
                        let m = grad[y * w + x];
                        if m > cutoff && !occupied[y * w + x] {
                            // Local maximum along both axes keeps gradient
                            // picks off flat ramps.
                            if m >= grad[y * w + x - 1]
                                && m >= grad[y * w + x + 1]
                                && m >= grad[(y - 1) * w + x]
                                && m >= grad[(y + 1) * w + x]
                            {
                                candidates.push((m, x, y));
                            }
                        }
                    }
                }
                candidates.sort_by(|a, b| {
                    b.0.partial_cmp(&a.0).unwrap().then(a.1.cmp(&b.1)).then(a.2.cmp(&b.2))
                });
                for (m, x, y) in candidates {
                    if features.len() >= target_count || cell_counts[cell] >= cell_cap {
                        break;
                    }
                    // Keep a 2-px exclusion zone around existing features.
                    let mut clear = true;
                    'zone: for dy in -2i32..=2 {
                        for dx in -2i32..=2 {
                            let nx = x as i32 + dx;
                            let ny = y as i32 + dy;
                            if nx >= 0
                                && ny >= 0
                                && (nx as usize) < w
                                && (ny as usize) < h
                                && occupied[ny as usize * w + nx as usize]
                            {
                                clear = false;
                                break 'zone;
                            }
                        }
                    }
                    if !clear {
                        continue;
                    }
                    let uv = Vector2::new(x as f64, y as f64);
                    features.push(Feature {
                        uv,
                        kind: FeatureKind::Gradient,
                        descriptor: extract_descriptor(&smoothed, &uv),
                        patch: extract_patch(img, &uv),
                        gradient_mag: m as f64,
                    });
                    cell_counts[cell] += 1;
                    occupied[y * w + x] = true;
                }
            }
        }
        features
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::frontend::build_pyramid;

    fn detect_on(img: &Image, target: usize) -> Vec<Feature> {
        let pyr = build_pyramid(img, 3).unwrap();
        FeatureDetector::new(FrontendConfig::default()).detect(&pyr, target)
    }

    #[test]
    fn uniform_image_yields_no_features() {
        let img = Image::from_data(320, 240, vec![0.5; 320 * 240]);
        assert!(detect_on(&img, 800).is_empty());
    }

    #[test]
    fn white_square_corners_are_found() {
        let mut img = Image::new(320, 240);
        for y in 100..140 {
            for x in 150..190 {
                img.set(x, y, 1.0);
            }
        }
        let feats = detect_on(&img, 800);
        let corners: Vec<&Feature> = feats
            .iter()
            .filter(|f| f.kind == FeatureKind::Corner)
            .collect();
        // Brute-force expectation: the four square corners.
        let expected = [
            (150.0, 100.0),
            (189.0, 100.0),
            (150.0, 139.0),
            (189.0, 139.0),
        ];
        for (ex, ey) in expected {
            let hit = corners
                .iter()
                .any(|f| (f.uv.x - ex).abs() <= 1.0 && (f.uv.y - ey).abs() <= 1.0);
            assert!(hit, "no corner near ({ex},{ey}); got {corners:?}");
        }
    }

    #[test]
    fn every_feature_has_both_descriptors() {
        let data: Vec<f32> = (0..320 * 240)
            .map(|i| (((i * 2654435761usize) % 991) as f32) / 991.0)
            .collect();
        let img = Image::from_data(320, 240, data);
        let feats = detect_on(&img, 400);
        assert!(!feats.is_empty());
        for f in &feats {
            assert!(f.patch.iter().all(|v| v.is_finite()));
            // Random texture: a descriptor with all-equal comparisons would
            // be suspicious.
            assert!(f.descriptor.hamming(&super::super::BinaryDescriptor::zero()) > 0);
        }
    }

    #[test]
    fn per_cell_cap_is_respected() {
        let data: Vec<f32> = (0..320 * 240)
            .map(|i| (((i * 2654435761usize) % 991) as f32) / 991.0)
            .collect();
        let img = Image::from_data(320, 240, data);
        let cfg = FrontendConfig::default();
        let target = 800;
        let feats = detect_on(&img, target);
        assert!(feats.len() <= target);
        let grid = cfg.grid;
        let cell_w = (320.0 / grid as f64).ceil() as usize;
        let cell_h = (240.0 / grid as f64).ceil() as usize;
        let cap = target / (grid * grid) + cfg.cell_slack;
        let mut counts = vec![0usize; grid * grid];
        for f in &feats {
            let cell = (f.uv.y as usize / cell_h) * grid + f.uv.x as usize / cell_w;
            counts[cell] += 1;
        }
        assert!(counts.iter().all(|&c| c <= cap));
    }

    #[test]
    fn halved_contrast_keeps_most_gradient_features() {
        let data: Vec<f32> = (0..320 * 240)
            .map(|i| (((i * 2654435761usize) % 991) as f32) / 991.0)
            .collect();
        let img = Image::from_data(320, 240, data.clone());
        let half = Image::from_data(
            320,
            240,
            data.iter().map(|v| 0.5 + (v - 0.5) * 0.5).collect(),
        );
        let full_grad = detect_on(&img, 800)
            .iter()
            .filter(|f| f.kind == FeatureKind::Gradient)
            .count();
        let half_grad = detect_on(&half, 800)
            .iter()
            .filter(|f| f.kind == FeatureKind::Gradient)
            .count();
        assert!(
            half_grad as f64 >= 0.7 * full_grad as f64,
            "gradient features dropped from {full_grad} to {half_grad}"
        );
    }
}

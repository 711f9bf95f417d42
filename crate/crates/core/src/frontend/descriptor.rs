use std::sync::OnceLock;

use nalgebra::Vector2;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::img::Image;

/// 256-bit binary descriptor stored as four words.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct BinaryDescriptor(pub [u64; 4]);

impl BinaryDescriptor {
    pub const BITS: u32 = 256;

    pub fn hamming(&self, other: &BinaryDescriptor) -> u32 {
        self.0
            .iter()
            .zip(other.0.iter())
            .map(|(a, b)| (a ^ b).count_ones())
            .sum()
    }

    pub fn zero() -> Self {
        BinaryDescriptor([0; 4])
    }
}

/// The 8-point residual pattern sampled around every feature; the same
/// spread DSO uses, minus the outermost point.
pub const PATCH_OFFSETS: [(f64, f64); 8] = [
    (0.0, -2.0),
    (-1.0, -1.0),
    (1.0, -1.0),
    (-2.0, 0.0),
    (0.0, 0.0),
    (2.0, 0.0),
    (-1.0, 1.0),
    (0.0, 2.0),
];

/// Border (px) a feature must keep from the image edge so descriptor and
/// patch sampling stay in bounds.
pub const FEATURE_BORDER: usize = 16;

const PATTERN_RADIUS: i32 = 15;
const PATTERN_SEED: u64 = 0x00B5_EED0_42;

fn comparison_pattern() -> &'static [(i32, i32, i32, i32); 256] {
    static PATTERN: OnceLock<[(i32, i32, i32, i32); 256]> = OnceLock::new();
    PATTERN.get_or_init(|| {
        let mut rng = ChaCha8Rng::seed_from_u64(PATTERN_SEED);
        let mut out = [(0, 0, 0, 0); 256];
        for slot in out.iter_mut() {
            loop {
                let p = (
                    rng.random_range(-PATTERN_RADIUS..=PATTERN_RADIUS),
                    rng.random_range(-PATTERN_RADIUS..=PATTERN_RADIUS),
                    rng.random_range(-PATTERN_RADIUS..=PATTERN_RADIUS),
                    rng.random_range(-PATTERN_RADIUS..=PATTERN_RADIUS),
                );
                if (p.0, p.1) != (p.2, p.3) {
                    *slot = p;
                    break;
                }
            }
        }
        out
    })
}

/// 256 seeded intensity comparisons in a 31x31 window around the feature.
/// `img` should be pre-smoothed; the pattern is fixed for the process
/// lifetime so descriptors are comparable across frames and runs.
pub fn extract_descriptor(img: &Image, uv: &Vector2<f64>) -> BinaryDescriptor {
    let cx = uv.x.round() as i32;
    let cy = uv.y.round() as i32;
    let mut words = [0u64; 4];
    for (bit, (x1, y1, x2, y2)) in comparison_pattern().iter().enumerate() {
        let a = img.get((cx + x1) as usize, (cy + y1) as usize);
        let b = img.get((cx + x2) as usize, (cy + y2) as usize);
        if a < b {
            words[bit / 64] |= 1u64 << (bit % 64);
        }
    }
    BinaryDescriptor(words)
}

/// Bilinear samples of the 8-point pattern around `uv`.
pub fn extract_patch(img: &Image, uv: &Vector2<f64>) -> [f32; 8] {
    let mut patch = [0.0f32; 8];
    for (k, (du, dv)) in PATCH_OFFSETS.iter().enumerate() {
        patch[k] = img.sample(uv.x + du, uv.y + dv) as f32;
    }
    patch
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn hamming_distance_counts_bits() {
        let a = BinaryDescriptor([0b1011, 0, 0, 0]);
        let b = BinaryDescriptor([0b0010, 0, 1, 0]);
        assert_eq!(a.hamming(&b), 3);
        assert_eq!(a.hamming(&a), 0);
    }

    #[test]
    fn descriptor_is_stable_for_same_input() {
        let data: Vec<f32> = (0..64 * 64).map(|i| ((i * 131) % 97) as f32 / 97.0).collect();
        let img = Image::from_data(64, 64, data);
        let uv = Vector2::new(32.0, 32.0);
        assert_eq!(extract_descriptor(&img, &uv), extract_descriptor(&img, &uv));
    }

    #[test]
    fn pattern_stays_inside_window() {
        for &(x1, y1, x2, y2) in comparison_pattern().iter() {
            for v in [x1, y1, x2, y2] {
                assert!(v.abs() <= PATTERN_RADIUS);
            }
        }
    }
}

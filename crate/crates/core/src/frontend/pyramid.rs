use crate::img::Image;

use super::FrontendError;

/// Mean-pooled image pyramid; level 0 is the input image.
#[derive(Debug, Clone)]
pub struct ImagePyramid {
    levels: Vec<Image>,
}

impl ImagePyramid {
    pub fn levels(&self) -> &[Image] {
        &self.levels
    }

    pub fn level(&self, l: usize) -> &Image {
        &self.levels[l]
    }

    pub fn n_levels(&self) -> usize {
        self.levels.len()
    }

    pub fn memory_bytes(&self) -> usize {
        self.levels.iter().map(|l| l.memory_bytes()).sum()
    }
}

fn pool(src: &Image) -> Image {
    let w = src.width().div_ceil(2);
    let h = src.height().div_ceil(2);
    let mut out = Image::new(w, h);
    for y in 0..h {
        for x in 0..w {
            let x0 = 2 * x;
            let y0 = 2 * y;
            let x1 = (x0 + 1).min(src.width() - 1);
            let y1 = (y0 + 1).min(src.height() - 1);
            let v = 0.25
                * (src.get(x0, y0) + src.get(x1, y0) + src.get(x0, y1) + src.get(x1, y1));
            out.set(x, y, v);
        }
    }
    out
}

/// Builds an `n_levels` pyramid by repeated 2x2 mean pooling.
pub fn build_pyramid(image: &Image, n_levels: usize) -> Result<ImagePyramid, FrontendError> {
    if n_levels == 0 {
        return Err(FrontendError::NoLevels);
    }
    if image.width() == 0 || image.height() == 0 {
        return Err(FrontendError::EmptyImage);
    }
    let mut levels = Vec::with_capacity(n_levels);
    levels.push(image.clone());
    for l in 1..n_levels {
        let next = pool(&levels[l - 1]);
        if next.width() < 8 || next.height() < 8 {
            return Err(FrontendError::PyramidTooDeep {
                level: l,
                w: next.width(),
                h: next.height(),
            });
        }
        levels.push(next);
    }
    Ok(ImagePyramid { levels })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn constant_image_stays_constant() {
        let img = Image::from_data(16, 16, vec![0.5; 256]);
        let pyr = build_pyramid(&img, 2).unwrap();
        assert!(pyr.level(1).data().iter().all(|&v| (v - 0.5).abs() < 1e-7));
    }

    #[test]
    fn level_sizes_halve() {
        let img = Image::new(320, 240);
        let pyr = build_pyramid(&img, 3).unwrap();
        assert_eq!((pyr.level(0).width(), pyr.level(0).height()), (320, 240));
        assert_eq!((pyr.level(1).width(), pyr.level(1).height()), (160, 120));
        assert_eq!((pyr.level(2).width(), pyr.level(2).height()), (80, 60));
    }

    #[test]
    fn pooling_preserves_mean_on_even_dims() {
        let data: Vec<f32> = (0..320 * 240).map(|i| ((i * 97) % 251) as f32 / 251.0).collect();
        let img = Image::from_data(320, 240, data);
        let pyr = build_pyramid(&img, 3).unwrap();
        assert!((pyr.level(0).mean() - pyr.level(1).mean()).abs() < 1e-6);
        assert!((pyr.level(1).mean() - pyr.level(2).mean()).abs() < 1e-6);
    }

    #[test]
    fn too_deep_pyramid_errors() {
        let img = Image::new(32, 32);
        assert!(matches!(
            build_pyramid(&img, 4),
            Err(FrontendError::PyramidTooDeep { .. })
        ));
    }
}

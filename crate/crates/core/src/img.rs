//! Grayscale intensity grid with bilinear sampling.
//!
//! Intensities are nominally in [0, 1] but sampling does not clamp, so tests
//! may feed contrast-scaled images through the same code paths.

use std::io::Write;
use std::path::Path;

#[derive(Debug, Clone, PartialEq)]
pub struct Image {
    width: usize,
    height: usize,
    data: Vec<f32>,
}

impl Image {
    pub fn new(width: usize, height: usize) -> Self {
        Self {
            width,
            height,
            data: vec![0.0; width * height],
        }
    }

    pub fn from_data(width: usize, height: usize, data: Vec<f32>) -> Self {
        assert_eq!(data.len(), width * height);
        Self {
            width,
            height,
            data,
        }
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn data(&self) -> &[f32] {
        &self.data
    }

    #[inline]
    pub fn get(&self, x: usize, y: usize) -> f32 {
        self.data[y * self.width + x]
    }

    #[inline]
    pub fn set(&mut self, x: usize, y: usize, v: f32) {
        self.data[y * self.width + x] = v;
    }

    pub fn mean(&self) -> f64 {
        self.data.iter().map(|&v| v as f64).sum::<f64>() / self.data.len() as f64
    }

    /// True when the bilinear footprint of `(u, v)` lies inside the grid.
    #[inline]
    pub fn in_bounds(&self, u: f64, v: f64) -> bool {
        u >= 0.0 && v >= 0.0 && u <= (self.width - 1) as f64 && v <= (self.height - 1) as f64
    }

    /// Bilinear sample at continuous pixel coordinates (pixel centers at
    /// integer coordinates). Caller must keep `(u, v)` in bounds.
    #[inline]
    pub fn sample(&self, u: f64, v: f64) -> f64 {
        let x0 = (u.floor() as usize).min(self.width - 2);
        let y0 = (v.floor() as usize).min(self.height - 2);
        let a = u - x0 as f64;
        let b = v - y0 as f64;
        let i00 = self.get(x0, y0) as f64;
        let i10 = self.get(x0 + 1, y0) as f64;
        let i01 = self.get(x0, y0 + 1) as f64;
        let i11 = self.get(x0 + 1, y0 + 1) as f64;
        (1.0 - a) * (1.0 - b) * i00 + a * (1.0 - b) * i10 + (1.0 - a) * b * i01 + a * b * i11
    }

    /// Exact gradient of the bilinear interpolant at `(u, v)`.
    #[inline]
    pub fn sample_gradient(&self, u: f64, v: f64) -> (f64, f64) {
        let x0 = (u.floor() as usize).min(self.width - 2);
        let y0 = (v.floor() as usize).min(self.height - 2);
        let a = u - x0 as f64;
        let b = v - y0 as f64;
        let i00 = self.get(x0, y0) as f64;
        let i10 = self.get(x0 + 1, y0) as f64;
        let i01 = self.get(x0, y0 + 1) as f64;
        let i11 = self.get(x0 + 1, y0 + 1) as f64;
        let du = (1.0 - b) * (i10 - i00) + b * (i11 - i01);
        let dv = (1.0 - a) * (i01 - i00) + a * (i11 - i10);
        (du, dv)
    }

    /// Separable 3-tap [1 2 1]/4 smoothing, used before binary descriptor
    /// sampling.
    pub fn smoothed(&self) -> Image {
        let mut tmp = vec![0.0f32; self.data.len()];
        for y in 0..self.height {
            for x in 0..self.width {
                let xm = x.saturating_sub(1);
                let xp = (x + 1).min(self.width - 1);
                tmp[y * self.width + x] =
                    0.25 * self.get(xm, y) + 0.5 * self.get(x, y) + 0.25 * self.get(xp, y);
            }
        }
        let mut out = vec![0.0f32; self.data.len()];
        for y in 0..self.height {
            let ym = y.saturating_sub(1);
            let yp = (y + 1).min(self.height - 1);
            for x in 0..self.width {
                out[y * self.width + x] = 0.25 * tmp[ym * self.width + x]
                    + 0.5 * tmp[y * self.width + x]
                    + 0.25 * tmp[yp * self.width + x];
            }
        }
        Image::from_data(self.width, self.height, out)
    }

    /// Writes the image as binary PGM (P5, 8-bit), clamping to [0, 1].
    pub fn write_pgm(&self, path: &Path) -> std::io::Result<()> {
        let mut file = std::io::BufWriter::new(std::fs::File::create(path)?);
        write!(file, "P5\n{} {}\n255\n", self.width, self.height)?;
        let bytes: Vec<u8> = self
            .data
            .iter()
            .map(|&v| (v.clamp(0.0, 1.0) * 255.0).round() as u8)
            .collect();
        file.write_all(&bytes)?;
        Ok(())
    }

    /// Approximate heap footprint in bytes, for the memory-cost reports.
    pub fn memory_bytes(&self) -> usize {
        self.data.len() * std::mem::size_of::<f32>()
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;

    #[test]
    fn bilinear_interpolates_linearly() {
        let mut img = Image::new(4, 4);
        for y in 0..4 {
            for x in 0..4 {
                img.set(x, y, x as f32 * 0.1 + y as f32 * 0.05);
            }
        }
        assert_relative_eq!(img.sample(1.5, 2.0), 0.15 + 0.1, epsilon = 1e-6);
        let (du, dv) = img.sample_gradient(1.3, 2.7);
        assert_relative_eq!(du, 0.1, epsilon = 1e-6);
        assert_relative_eq!(dv, 0.05, epsilon = 1e-6);
    }

    #[test]
    fn gradient_matches_finite_differences_inside_cell() {
        let data: Vec<f32> = (0..25).map(|i| ((i * 37 % 11) as f32) / 11.0).collect();
        let img = Image::from_data(5, 5, data);
        let (u, v) = (2.3, 1.6);
        let h = 1e-7;
        let (du, dv) = img.sample_gradient(u, v);
        let fdu = (img.sample(u + h, v) - img.sample(u - h, v)) / (2.0 * h);
        let fdv = (img.sample(u, v + h) - img.sample(u, v - h)) / (2.0 * h);
        assert_relative_eq!(du, fdu, epsilon = 1e-5);
        assert_relative_eq!(dv, fdv, epsilon = 1e-5);
    }
}

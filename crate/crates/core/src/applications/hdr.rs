//! Linear-radiance images with strictly positive values.

use std::path::Path;

use super::{luminance, ApplicationError};

/// Channel-major 3×H×W linear radiance.
#[derive(Debug, Clone, PartialEq)]
pub struct HdrImage {
    height: usize,
    width: usize,
    data: Vec<f64>,
}

impl HdrImage {
    pub fn new(height: usize, width: usize, data: Vec<f64>) -> Result<Self, ApplicationError> {
        // Reuse the raster shape checks.
        crate::image::Image::new(height, width, vec![0.0; data.len()])?;
        if let Some(i) = data.iter().position(|v| !(v.is_finite() && *v > 0.0)) {
            let p = i % (height * width);
            return Err(ApplicationError::NonPositive {
                y: p / width,
                x: p % width,
                value: data[i],
            });
        }
        Ok(Self { height, width, data })
    }

    pub fn from_fn(
        height: usize,
        width: usize,
        mut f: impl FnMut(usize, usize, usize) -> f64,
    ) -> Result<Self, ApplicationError> {
        let mut data = Vec::with_capacity(3 * height * width);
        for c in 0..3 {
            for y in 0..height {
                for x in 0..width {
                    data.push(f(c, y, x));
                }
            }
        }
        Self::new(height, width, data)
    }

    pub fn dims(&self) -> (usize, usize) {
        (self.height, self.width)
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn get(&self, c: usize, y: usize, x: usize) -> f64 {
        self.data[(c * self.height + y) * self.width + x]
    }

    /// Row-major per-pixel luminance.
    pub fn luminance(&self) -> Vec<f64> {
        let (h, w) = self.dims();
        (0..h * w)
            .map(|i| luminance([0, 1, 2].map(|c| self.get(c, i / w, i % w))))
            .collect()
    }

    /// Ratio of the brightest to the dimmest luminance.
    pub fn dynamic_range(&self) -> f64 {
        let lum = self.luminance();
        let hi = lum.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let lo = lum.iter().copied().fold(f64::INFINITY, f64::min);
        hi / lo
    }

    pub fn flip_horizontal(&self) -> Self {
        let (h, w) = self.dims();
        Self::from_fn(h, w, |c, y, x| self.get(c, y, w - 1 - x)).expect("same values")
    }

    /// Reads a Radiance `.hdr` file.
    pub fn load(path: &Path) -> Result<Self, ApplicationError> {
        let err = |message: String| ApplicationError::Hdr {
            path: path.display().to_string(),
            message,
        };
        let img = image::open(path).map_err(|e| err(e.to_string()))?.to_rgb32f();
        let (w, h) = (img.width() as usize, img.height() as usize);
        Self::from_fn(h, w, |c, y, x| img.get_pixel(x as u32, y as u32).0[c] as f64)
    }

    /// Writes a Radiance `.hdr` file (32-bit float precision).
    pub fn save(&self, path: &Path) -> Result<(), ApplicationError> {
        let (h, w) = self.dims();
        let img = image::Rgb32FImage::from_fn(w as u32, h as u32, |x, y| {
            image::Rgb([0, 1, 2].map(|c| self.get(c, y as usize, x as usize) as f32))
        });
        image::DynamicImage::ImageRgb32F(img)
            .save_with_format(path, image::ImageFormat::Hdr)
            .map_err(|e| ApplicationError::Hdr {
                path: path.display().to_string(),
                message: e.to_string(),
            })
    }
}

//! Three-channel planar raster with values in `[0, 1]`.

use std::path::Path;

use thiserror::Error;

use crate::tensor::Tensor;

#[derive(Debug, Error)]
pub enum ImageError {
    #[error("{path}: {source}")]
    Decode {
        path: String,
        #[source]
        source: image::ImageError,
    },
    #[error("{path}: {source}")]
    Encode {
        path: String,
        #[source]
        source: image::ImageError,
    },
    #[error("image data of length {found} does not fit 3×{height}×{width}")]
    Length { height: usize, width: usize, found: usize },
    #[error("image dimensions must be positive, got {height}×{width}")]
    Empty { height: usize, width: usize },
    #[error("expected a 1×3×H×W tensor, found {0:?}")]
    TensorShape(Vec<usize>),
}

/// RGB image stored channel-major (3×H×W), the same layout as one sample of
/// an N×C×H×W activation tensor.
#[derive(Debug, Clone, PartialEq)]
pub struct Image {
    height: usize,
    width: usize,
    data: Vec<f64>,
}

impl Image {
    pub const CHANNELS: usize = 3;

    pub fn new(height: usize, width: usize, data: Vec<f64>) -> Result<Self, ImageError> {
        if height == 0 || width == 0 {
            return Err(ImageError::Empty { height, width });
        }
        if data.len() != Self::CHANNELS * height * width {
            return Err(ImageError::Length {
                height,
                width,
                found: data.len(),
            });
        }
        Ok(Self { height, width, data })
    }

    pub fn filled(height: usize, width: usize, rgb: [f64; 3]) -> Self {
        Self::from_fn(height, width, |c, _, _| rgb[c])
    }

    pub fn from_fn(height: usize, width: usize, mut f: impl FnMut(usize, usize, usize) -> f64) -> Self {
        assert!(height > 0 && width > 0);
        let mut data = Vec::with_capacity(Self::CHANNELS * height * width);
        for c in 0..Self::CHANNELS {
            for y in 0..height {
                for x in 0..width {
                    data.push(f(c, y, x));
                }
            }
        }
        Self { height, width, data }
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn dims(&self) -> (usize, usize) {
        (self.height, self.width)
    }

    pub fn pixel_count(&self) -> usize {
        self.height * self.width
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    #[inline]
    pub fn get(&self, c: usize, y: usize, x: usize) -> f64 {
        self.data[(c * self.height + y) * self.width + x]
    }

    #[inline]
    pub fn set(&mut self, c: usize, y: usize, x: usize, v: f64) {
        self.data[(c * self.height + y) * self.width + x] = v;
    }

    pub fn channel(&self, c: usize) -> &[f64] {
        let n = self.pixel_count();
        &self.data[c * n..(c + 1) * n]
    }

    pub fn map(&self, f: impl Fn(f64) -> f64) -> Self {
        Self {
            height: self.height,
            width: self.width,
            data: self.data.iter().map(|&v| f(v)).collect(),
        }
    }

    pub fn clamp_unit(&self) -> Self {
        self.map(|v| v.clamp(0.0, 1.0))
    }

    pub fn flip_horizontal(&self) -> Self {
        let w = self.width;
        Self::from_fn(self.height, w, |c, y, x| self.get(c, y, w - 1 - x))
    }

    /// Panics if the window leaves the image.
    pub fn crop(&self, top: usize, left: usize, height: usize, width: usize) -> Self {
        assert!(top + height <= self.height && left + width <= self.width);
        Self::from_fn(height, width, |c, y, x| self.get(c, top + y, left + x))
    }

    pub fn to_tensor(&self) -> Tensor {
        Tensor::new(vec![1, 3, self.height, self.width], self.data.clone()).expect("valid dims")
    }

    pub fn from_tensor(t: &Tensor) -> Result<Self, ImageError> {
        match t.shape() {
            &[1, 3, h, w] => Self::new(h, w, t.data().to_vec()),
            s => Err(ImageError::TensorShape(s.to_vec())),
        }
    }

    /// Stacks equally sized images into an N×3×H×W tensor.
    pub fn stack(images: &[Image]) -> Tensor {
        assert!(!images.is_empty());
        let (h, w) = images[0].dims();
        let mut data = Vec::with_capacity(images.len() * 3 * h * w);
        for img in images {
            assert_eq!(img.dims(), (h, w), "stacked images must share dimensions");
            data.extend_from_slice(&img.data);
        }
        Tensor::new(vec![images.len(), 3, h, w], data).expect("valid dims")
    }

    /// Decodes any format the `image` crate understands, converting to 8-bit
    /// RGB first so stored datasets round-trip exactly.
    pub fn load(path: &Path) -> Result<Self, ImageError> {
        let decoded = image::open(path).map_err(|source| ImageError::Decode {
            path: path.display().to_string(),
            source,
        })?;
        let rgb = decoded.to_rgb8();
        let (w, h) = (rgb.width() as usize, rgb.height() as usize);
        Ok(Self::from_fn(h, w, |c, y, x| {
            rgb.get_pixel(x as u32, y as u32).0[c] as f64 / 255.0
        }))
    }

    pub fn to_rgb8(&self) -> image::RgbImage {
        image::RgbImage::from_fn(self.width as u32, self.height as u32, |x, y| {
            let px = |c| quantize(self.get(c, y as usize, x as usize));
            image::Rgb([px(0), px(1), px(2)])
        })
    }

    /// Writes an 8-bit lossless PNG.
    pub fn save_png(&self, path: &Path) -> Result<(), ImageError> {
        self.to_rgb8()
            .save_with_format(path, image::ImageFormat::Png)
            .map_err(|source| ImageError::Encode {
                path: path.display().to_string(),
                source,
            })
    }

    /// Rounds every value to the nearest 8-bit level.
    pub fn quantized(&self) -> Self {
        self.map(|v| quantize(v) as f64 / 255.0)
    }
}

pub fn quantize(v: f64) -> u8 {
    (v.clamp(0.0, 1.0) * 255.0).round() as u8
}

/// Reads only the header of an image file.
pub fn image_dimensions(path: &Path) -> Result<(usize, usize), ImageError> {
    let (w, h) = image::image_dimensions(path).map_err(|source| ImageError::Decode {
        path: path.display().to_string(),
        source,
    })?;
    Ok((h as usize, w as usize))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn png_round_trip_is_exact_for_quantized_data() {
        let img = Image::from_fn(5, 7, |c, y, x| ((c * 31 + y * 7 + x * 13) % 256) as f64 / 255.0);
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("a.png");
        img.save_png(&p).unwrap();
        assert_eq!(Image::load(&p).unwrap(), img);
        assert_eq!(image_dimensions(&p).unwrap(), (5, 7));
    }

    #[test]
    fn flip_twice_is_identity() {
        let img = Image::from_fn(3, 4, |c, y, x| (c + 10 * y + 100 * x) as f64);
        assert_eq!(img.flip_horizontal().get(1, 2, 0), img.get(1, 2, 3));
        assert_eq!(img.flip_horizontal().flip_horizontal(), img);
    }

    #[test]
    fn tensor_round_trip() {
        let img = Image::from_fn(2, 3, |c, y, x| (c * 6 + y * 3 + x) as f64);
        assert_eq!(Image::from_tensor(&img.to_tensor()).unwrap(), img);
        assert!(Image::new(2, 2, vec![0.0; 11]).is_err());
    }
}

//! Demonstration pipelines that use a smoother as the decomposition filter:
//! base/detail tone mapping of HDR radiance and illumination/reflectance
//! contrast enhancement.
//!
//! Constants shared by both pipelines:
//! - luminance uses Rec. 709 weights (0.2126, 0.7152, 0.0722);
//! - tone mapping works on natural-log luminance, min-max normalized into
//!   `[0, 1]` before smoothing and mapped back afterwards, because the
//!   smoothers are trained on `[0, 1]` images;
//! - smoothers receive a gray three-channel image and the channel mean of
//!   their output is taken as the base or illumination layer;
//! - [`ENHANCE_EPSILON`] floors the illumination and luminance divisors.

mod filters;
mod hdr;

use thiserror::Error;

pub use filters::{Bilateral, Gaussian};
pub use hdr::HdrImage;

use crate::image::{Image, ImageError};
use crate::models::{Model, ModelError};

pub const LUMA_WEIGHTS: [f64; 3] = [0.2126, 0.7152, 0.0722];
pub const DEFAULT_COMPRESSION: f64 = 0.5;
pub const ENHANCE_EPSILON: f64 = 1e-4;

#[derive(Debug, Error)]
pub enum ApplicationError {
    #[error("radiance must be finite and positive, found {value} at ({y}, {x})")]
    NonPositive { y: usize, x: usize, value: f64 },
    #[error("compression factor {0} must lie in (0, 1]")]
    Compression(f64),
    #[error("gamma {0} must be positive")]
    Gamma(f64),
    #[error("smoother changed the image size from {expected:?} to {found:?}")]
    SmootherShape {
        expected: (usize, usize),
        found: (usize, usize),
    },
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Image(#[from] ImageError),
    #[error("{path}: {message}")]
    Hdr { path: String, message: String },
}

/// Anything that maps an image to a smoothed image of the same size.
pub trait Smoother {
    fn smooth(&self, img: &Image) -> Result<Image, ApplicationError>;
}

impl<F: Fn(&Image) -> Image> Smoother for F {
    fn smooth(&self, img: &Image) -> Result<Image, ApplicationError> {
        Ok(self(img))
    }
}

impl Smoother for Model {
    fn smooth(&self, img: &Image) -> Result<Image, ApplicationError> {
        Ok(self.forward(img)?)
    }
}

impl Smoother for Gaussian {
    fn smooth(&self, img: &Image) -> Result<Image, ApplicationError> {
        Ok(self.apply(img))
    }
}

impl Smoother for Bilateral {
    fn smooth(&self, img: &Image) -> Result<Image, ApplicationError> {
        Ok(self.apply(img))
    }
}

pub fn luminance(rgb: [f64; 3]) -> f64 {
    rgb.iter().zip(LUMA_WEIGHTS).map(|(v, w)| v * w).sum()
}

fn pixel(img: &Image, y: usize, x: usize) -> [f64; 3] {
    [img.get(0, y, x), img.get(1, y, x), img.get(2, y, x)]
}

/// Runs the smoother on a single-channel plane and returns the channel mean
/// of its output.
fn smooth_plane(smoother: &impl Smoother, plane: &[f64], h: usize, w: usize) -> Result<Vec<f64>, ApplicationError> {
    let gray = Image::from_fn(h, w, |_, y, x| plane[y * w + x]);
    let out = smoother.smooth(&gray)?;
    if out.dims() != (h, w) {
        return Err(ApplicationError::SmootherShape {
            expected: (h, w),
            found: out.dims(),
        });
    }
    Ok((0..h * w)
        .map(|i| (0..3).map(|c| out.get(c, i / w, i % w)).sum::<f64>() / 3.0)
        .collect())
}

/// Base/detail tone mapping. The smoothed normalized log luminance is the
/// base layer; the residual is the detail layer. The base is scaled by
/// `compression`, the detail is kept, and colors follow the per-pixel ratio
/// of each channel to luminance. The result is divided by its maximum and
/// clamped to `[0, 1]` (linear, no display gamma).
pub fn tone_map(hdr: &HdrImage, smoother: &impl Smoother, compression: f64) -> Result<Image, ApplicationError> {
    if !(compression > 0.0 && compression <= 1.0) {
        return Err(ApplicationError::Compression(compression));
    }
    let (h, w) = hdr.dims();
    let log_lum: Vec<f64> = hdr.luminance().iter().map(|l| l.ln()).collect();
    let lo = log_lum.iter().copied().fold(f64::INFINITY, f64::min);
    let hi = log_lum.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let range = hi - lo;
    let normalized: Vec<f64> = if range > 0.0 {
        log_lum.iter().map(|v| (v - lo) / range).collect()
    } else {
        vec![0.0; h * w]
    };
    let base = smooth_plane(smoother, &normalized, h, w)?;
    let mut out = Image::filled(h, w, [0.0; 3]);
    for y in 0..h {
        for x in 0..w {
            let i = y * w + x;
            let detail = normalized[i] - base[i];
            let mapped = lo + (compression * base[i] + detail) * range;
            let scale = (mapped - log_lum[i]).exp();
            for c in 0..3 {
                out.set(c, y, x, hdr.get(c, y, x) * scale);
            }
        }
    }
    let peak = out.data().iter().copied().fold(0.0, f64::max);
    Ok(out.map(|v| v / peak).clamp_unit())
}

/// Illumination/reflectance contrast enhancement. Illumination is the
/// smoothed luminance, reflectance the luminance divided by it; the output
/// luminance is `reflectance · illumination^gamma`, applied to the colors as
/// a ratio and clamped to `[0, 1]`.
pub fn contrast_enhance(img: &Image, smoother: &impl Smoother, gamma: f64) -> Result<Image, ApplicationError> {
    if !(gamma > 0.0 && gamma.is_finite()) {
        return Err(ApplicationError::Gamma(gamma));
    }
    let (h, w) = img.dims();
    let lum: Vec<f64> = (0..h * w).map(|i| luminance(pixel(img, i / w, i % w))).collect();
    let illum = smooth_plane(smoother, &lum, h, w)?;
    let mut out = Image::filled(h, w, [0.0; 3]);
    for y in 0..h {
        for x in 0..w {
            let i = y * w + x;
            let l = illum[i].clamp(ENHANCE_EPSILON, 1.0);
            let reflectance = lum[i] / l;
            let target = reflectance * l.powf(gamma);
            let ratio = target / lum[i].max(ENHANCE_EPSILON);
            for c in 0..3 {
                out.set(c, y, x, img.get(c, y, x) * ratio);
            }
        }
    }
    Ok(out.clamp_unit())
}

/// Dim scene for enhancement checks: a slow illumination ramp (about 3% to
/// 12% brightness) over a reflectance made of textured patches.
pub fn low_light_fixture(height: usize, width: usize) -> Image {
    Image::from_fn(height, width, |c, y, x| {
        let illum = 0.03 + 0.09 * (x + y) as f64 / (height + width) as f64;
        let patch = ((y / 8) + (x / 8)) % 2;
        let texture = if (x + 2 * y) % 3 == 0 { 1.25 } else { 0.875 };
        let reflectance = [0.6, 0.9][patch] * texture * [1.0, 0.9, 0.8][c];
        illum * reflectance
    })
}

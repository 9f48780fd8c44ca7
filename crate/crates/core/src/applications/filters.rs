//! Reference smoothers used as decomposition baselines: a separable Gaussian
//! and a brute-force bilateral filter. Both replicate edge pixels.

use crate::image::Image;

/// Separable Gaussian blur with a kernel radius of `ceil(3σ)`.
#[derive(Debug, Clone, PartialEq)]
pub struct Gaussian {
    taps: Vec<f64>,
}

impl Gaussian {
    pub fn new(sigma: f64) -> Self {
        assert!(sigma > 0.0, "sigma must be positive");
        let r = (3.0 * sigma).ceil() as isize;
        let raw: Vec<f64> = (-r..=r).map(|i| (-0.5 * (i as f64 / sigma).powi(2)).exp()).collect();
        let total: f64 = raw.iter().sum();
        Self {
            taps: raw.into_iter().map(|k| k / total).collect(),
        }
    }

    pub fn apply(&self, img: &Image) -> Image {
        let r = (self.taps.len() / 2) as isize;
        let (h, w) = img.dims();
        let pass = |src: &Image, horizontal: bool| {
            Image::from_fn(h, w, |c, y, x| {
                self.taps
                    .iter()
                    .enumerate()
                    .map(|(i, &k)| {
                        let o = i as isize - r;
                        let v = if horizontal {
                            src.get(c, y, (x as isize + o).clamp(0, w as isize - 1) as usize)
                        } else {
                            src.get(c, (y as isize + o).clamp(0, h as isize - 1) as usize, x)
                        };
                        k * v
                    })
                    .sum()
            })
        };
        pass(&pass(img, true), false)
    }
}

/// Bilateral filter with a Gaussian spatial kernel of radius `ceil(2σ_s)` and
/// a Gaussian range kernel on the per-pixel channel mean.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Bilateral {
    pub sigma_space: f64,
    pub sigma_range: f64,
}

impl Bilateral {
    pub fn new(sigma_space: f64, sigma_range: f64) -> Self {
        assert!(sigma_space > 0.0 && sigma_range > 0.0, "sigmas must be positive");
        Self {
            sigma_space,
            sigma_range,
        }
    }

    pub fn apply(&self, img: &Image) -> Image {
        let (h, w) = img.dims();
        let r = (2.0 * self.sigma_space).ceil() as isize;
        let guide: Vec<f64> = (0..h * w)
            .map(|i| (0..3).map(|c| img.get(c, i / w, i % w)).sum::<f64>() / 3.0)
            .collect();
        let mut out = Image::filled(h, w, [0.0; 3]);
        for y in 0..h {
            for x in 0..w {
                let g0 = guide[y * w + x];
                let mut acc = [0.0; 3];
                let mut total = 0.0;
                for dy in -r..=r {
                    for dx in -r..=r {
                        let yy = (y as isize + dy).clamp(0, h as isize - 1) as usize;
                        let xx = (x as isize + dx).clamp(0, w as isize - 1) as usize;
                        let ds = (dy * dy + dx * dx) as f64 / (self.sigma_space * self.sigma_space);
                        let dr = (guide[yy * w + xx] - g0) / self.sigma_range;
                        let k = (-0.5 * (ds + dr * dr)).exp();
                        total += k;
                        for (c, a) in acc.iter_mut().enumerate() {
                            *a += k * img.get(c, yy, xx);
                        }
                    }
                }
                for (c, a) in acc.iter().enumerate() {
                    out.set(c, y, x, a / total);
                }
            }
        }
        out
    }
}

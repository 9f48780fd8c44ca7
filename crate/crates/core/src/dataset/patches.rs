//! Random training patches with horizontal-flip augmentation.

use rand::Rng;

use super::DatasetError;
use crate::grid::ImageId;
use crate::image::Image;
use crate::losses::GroundTruthSet;

/// A source image and its weighted groundtruth set.
#[derive(Debug, Clone)]
pub struct TrainingImage {
    pub source: Image,
    pub targets: GroundTruthSet,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct PatchOrigin {
    pub image: ImageId,
    pub top: usize,
    pub left: usize,
}

#[derive(Debug, Clone)]
pub struct PatchBatch {
    pub sources: Vec<Image>,
    pub targets: Vec<GroundTruthSet>,
    pub flips: Vec<bool>,
    pub origins: Vec<PatchOrigin>,
}

/// Draws `batch` patches: a uniformly chosen image, a uniformly placed
/// `patch × patch` window inside it, and a horizontal flip with probability
/// 1/2. Targets are cut from the same window of every groundtruth.
pub fn sample_patches(
    images: &[TrainingImage],
    patch: usize,
    batch: usize,
    rng: &mut impl Rng,
) -> Result<PatchBatch, DatasetError> {
    if images.is_empty() {
        return Err(DatasetError::EmptySplit(super::Split::Train));
    }
    for img in images {
        let (height, width) = img.source.dims();
        if patch == 0 || patch > height || patch > width {
            return Err(DatasetError::PatchTooLarge { patch, height, width });
        }
    }
    let mut out = PatchBatch {
        sources: Vec::with_capacity(batch),
        targets: Vec::with_capacity(batch),
        flips: Vec::with_capacity(batch),
        origins: Vec::with_capacity(batch),
    };
    for _ in 0..batch {
        let img = &images[rng.gen_range(0..images.len())];
        let (h, w) = img.source.dims();
        let top = rng.gen_range(0..=h - patch);
        let left = rng.gen_range(0..=w - patch);
        let flip = rng.gen_bool(0.5);
        let mut src = img.source.crop(top, left, patch, patch);
        let mut gts = img.targets.crop(top, left, patch, patch);
        if flip {
            src = src.flip_horizontal();
            gts = gts.flip_horizontal();
        }
        out.sources.push(src);
        out.targets.push(gts);
        out.flips.push(flip);
        out.origins.push(PatchOrigin {
            image: img.targets.image,
            top,
            left,
        });
    }
    Ok(out)
}

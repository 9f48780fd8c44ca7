//! Quality measures against multiple voted groundtruths, the voting strategy
//! that turns per-image vote counts into weighted groundtruth sets, and the
//! per-method parameter search.

use std::collections::BTreeMap;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::grid::{Choice, ImageId, METHOD_COUNT, PARAM_COUNT};
use crate::image::Image;
use crate::losses::{GroundTruthSet, LossError};

/// Reported errors are on the 8-bit intensity scale.
pub const PIXEL_SCALE: f64 = 255.0;

/// Selections every image carries in a complete dataset.
pub const VOTES_PER_IMAGE: usize = 14;

/// Groundtruths kept per image by the voting strategy.
pub const TOP_K: usize = 5;

#[derive(Debug, Error)]
pub enum MetricError {
    #[error("no images to evaluate")]
    Empty,
    #[error("{outputs} outputs for {groundtruths} groundtruth entries")]
    Arity { outputs: usize, groundtruths: usize },
    #[error("image {image}: expected {expected} selections, found {found}")]
    SelectionCount { image: ImageId, expected: usize, found: usize },
    #[error("image {image}: output is {output:?} but groundtruth is {target:?}")]
    Dimensions {
        image: ImageId,
        output: (usize, usize),
        target: (usize, usize),
    },
    #[error("image {image}: {source}")]
    GroundTruth {
        image: ImageId,
        #[source]
        source: LossError,
    },
    #[error("image {0} has no votes")]
    NoVotes(ImageId),
    #[error("image {0} is not in the tally")]
    UnknownImage(ImageId),
    #[error("missing output for image {image} at setting {param}")]
    MissingCell { image: ImageId, param: u32 },
}

/// How pooled error sums are normalized.
///
/// Both modes share the numerator: weighted squared (or absolute) errors summed
/// over every channel of every pixel. `PerEntry` divides by the number of
/// scalar entries (pixels × 3); `StrictPaper` divides by the pixel count,
/// treating each pixel's RGB error as one vector norm. Strict RMSE is √3 times
/// the per-entry value and strict MAE is 3 times it.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum PoolingMode {
    #[default]
    PerEntry,
    StrictPaper,
}

/// Weighted error sums that can be merged across disjoint image sets.
#[derive(Debug, Clone, Copy, Default, PartialEq)]
pub struct PooledSums {
    pub squared: f64,
    pub absolute: f64,
    pub pixels: u64,
}

impl PooledSums {
    /// Sums for one output against weighted targets. Dimensions must already
    /// have been checked.
    fn of_image(output: &Image, targets: &[Image], weights: &[f64]) -> Self {
        let mut squared = 0.0;
        let mut absolute = 0.0;
        for (target, &w) in targets.iter().zip(weights) {
            let mut sq = 0.0;
            let mut ab = 0.0;
            for (&a, &b) in output.data().iter().zip(target.data()) {
                let d = a - b;
                sq += d * d;
                ab += d.abs();
            }
            squared += w * sq;
            absolute += w * ab;
        }
        Self {
            squared,
            absolute,
            pixels: output.pixel_count() as u64,
        }
    }

    pub fn merge(&mut self, other: &PooledSums) {
        self.squared += other.squared;
        self.absolute += other.absolute;
        self.pixels += other.pixels;
    }

    fn denominator(&self, mode: PoolingMode) -> f64 {
        match mode {
            PoolingMode::PerEntry => 3.0 * self.pixels as f64,
            PoolingMode::StrictPaper => self.pixels as f64,
        }
    }

    pub fn rmse(&self, mode: PoolingMode) -> f64 {
        PIXEL_SCALE * (self.squared / self.denominator(mode)).sqrt()
    }

    pub fn mae(&self, mode: PoolingMode) -> f64 {
        PIXEL_SCALE * self.absolute / self.denominator(mode)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ErrorPair {
    pub rmse: f64,
    pub mae: f64,
}

fn check_dims(image: ImageId, output: &Image, targets: &[Image]) -> Result<(), MetricError> {
    for t in targets {
        if t.dims() != output.dims() {
            return Err(MetricError::Dimensions {
                image,
                output: output.dims(),
                target: t.dims(),
            });
        }
    }
    Ok(())
}

/// Per-image sums computed in parallel, reduced in image order.
fn pool<F>(n: usize, f: F) -> Result<PooledSums, MetricError>
where
    F: Fn(usize) -> Result<PooledSums, MetricError> + Sync + Send,
{
    if n == 0 {
        return Err(MetricError::Empty);
    }
    let parts: Vec<PooledSums> = (0..n).into_par_iter().map(&f).collect::<Result<_, _>>()?;
    let mut total = PooledSums::default();
    for p in &parts {
        total.merge(p);
    }
    Ok(total)
}

/// Pooled sums against weighted groundtruth sets; weights are validated.
pub fn weighted_sums(outputs: &[Image], sets: &[GroundTruthSet]) -> Result<PooledSums, MetricError> {
    if outputs.len() != sets.len() {
        return Err(MetricError::Arity {
            outputs: outputs.len(),
            groundtruths: sets.len(),
        });
    }
    pool(sets.len(), |i| {
        let set = &sets[i];
        set.validate().map_err(|source| MetricError::GroundTruth {
            image: set.image,
            source,
        })?;
        check_dims(set.image, &outputs[i], set.targets())?;
        Ok(PooledSums::of_image(&outputs[i], set.targets(), set.weights()))
    })
}

/// WRMSE and WMAE of `outputs` against the matching groundtruth sets.
pub fn weighted_errors(outputs: &[Image], sets: &[GroundTruthSet], mode: PoolingMode) -> Result<ErrorPair, MetricError> {
    let s = weighted_sums(outputs, sets)?;
    Ok(ErrorPair {
        rmse: s.rmse(mode),
        mae: s.mae(mode),
    })
}

pub fn wrmse(outputs: &[Image], sets: &[GroundTruthSet], mode: PoolingMode) -> Result<f64, MetricError> {
    Ok(weighted_sums(outputs, sets)?.rmse(mode))
}

pub fn wmae(outputs: &[Image], sets: &[GroundTruthSet], mode: PoolingMode) -> Result<f64, MetricError> {
    Ok(weighted_sums(outputs, sets)?.mae(mode))
}

/// All fourteen selections of one image, uniformly weighted.
#[derive(Debug, Clone)]
pub struct Selections {
    pub image: ImageId,
    pub images: Vec<Image>,
}

fn uniform_sums(outputs: &[Image], selections: &[Selections]) -> Result<PooledSums, MetricError> {
    if outputs.len() != selections.len() {
        return Err(MetricError::Arity {
            outputs: outputs.len(),
            groundtruths: selections.len(),
        });
    }
    let weights = [1.0 / VOTES_PER_IMAGE as f64; VOTES_PER_IMAGE];
    pool(selections.len(), |i| {
        let sel = &selections[i];
        if sel.images.len() != VOTES_PER_IMAGE {
            return Err(MetricError::SelectionCount {
                image: sel.image,
                expected: VOTES_PER_IMAGE,
                found: sel.images.len(),
            });
        }
        check_dims(sel.image, &outputs[i], &sel.images)?;
        Ok(PooledSums::of_image(&outputs[i], &sel.images, &weights))
    })
}

pub fn rmse14(outputs: &[Image], selections: &[Selections], mode: PoolingMode) -> Result<f64, MetricError> {
    Ok(uniform_sums(outputs, selections)?.rmse(mode))
}

pub fn mae14(outputs: &[Image], selections: &[Selections], mode: PoolingMode) -> Result<f64, MetricError> {
    Ok(uniform_sums(outputs, selections)?.mae(mode))
}

type Counts = [[u32; PARAM_COUNT]; METHOD_COUNT];

/// Per-image and global vote counts over the method × parameter grid.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct VoteTally {
    per_image: BTreeMap<ImageId, Counts>,
    global: Counts,
}

impl VoteTally {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn from_votes(votes: impl IntoIterator<Item = (ImageId, Choice)>) -> Self {
        let mut t = Self::new();
        for (image, choice) in votes {
            t.record(image, choice);
        }
        t
    }

    /// Registers an image with no votes yet.
    pub fn add_image(&mut self, image: ImageId) {
        self.per_image.entry(image).or_default();
    }

    pub fn record(&mut self, image: ImageId, choice: Choice) {
        let (m, p) = (choice.method() as usize - 1, choice.param() as usize - 1);
        self.per_image.entry(image).or_default()[m][p] += 1;
        self.global[m][p] += 1;
    }

    /// `count_t(m, p)`.
    pub fn count(&self, image: ImageId, choice: Choice) -> u32 {
        self.per_image
            .get(&image)
            .map_or(0, |c| c[choice.method() as usize - 1][choice.param() as usize - 1])
    }

    /// `COUNT(m, p)`.
    pub fn global_count(&self, choice: Choice) -> u32 {
        self.global[choice.method() as usize - 1][choice.param() as usize - 1]
    }

    pub fn images(&self) -> impl Iterator<Item = ImageId> + '_ {
        self.per_image.keys().copied()
    }

    pub fn image_count(&self) -> usize {
        self.per_image.len()
    }

    pub fn image_total(&self, image: ImageId) -> u32 {
        self.per_image
            .get(&image)
            .map_or(0, |c| c.iter().flatten().sum())
    }

    pub fn total_votes(&self) -> u32 {
        self.global.iter().flatten().sum()
    }

    /// Votes per method, summed over parameter settings.
    pub fn method_totals(&self) -> [u32; METHOD_COUNT] {
        std::array::from_fn(|m| self.global[m].iter().sum())
    }

    /// Votes per parameter setting of one method.
    pub fn param_totals(&self, method: u32) -> [u32; PARAM_COUNT] {
        self.global[method as usize - 1]
    }

    /// `max_m max_p count_t(m, p)`.
    pub fn max_repeat(&self, image: ImageId) -> u32 {
        self.per_image
            .get(&image)
            .map_or(0, |c| c.iter().flatten().copied().max().unwrap_or(0))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SelectedChoice {
    pub choice: Choice,
    pub count: u32,
    pub global_count: u32,
    pub weight: f64,
}

/// Ranks an image's voted combinations by per-image count, then by global
/// count, then by `(m, p)` ascending, and keeps the first five with at least
/// one vote. Weights are the counts normalized over the kept entries.
pub fn select_top5(tally: &VoteTally, image: ImageId) -> Result<Vec<SelectedChoice>, MetricError> {
    let counts = tally.per_image.get(&image).ok_or(MetricError::UnknownImage(image))?;
    let mut ranked: Vec<SelectedChoice> = Choice::all()
        .filter_map(|choice| {
            let count = counts[choice.method() as usize - 1][choice.param() as usize - 1];
            (count > 0).then(|| SelectedChoice {
                choice,
                count,
                global_count: tally.global_count(choice),
                weight: 0.0,
            })
        })
        .collect();
    if ranked.is_empty() {
        return Err(MetricError::NoVotes(image));
    }
    ranked.sort_by(|a, b| {
        b.count
            .cmp(&a.count)
            .then(b.global_count.cmp(&a.global_count))
            .then(a.choice.cmp(&b.choice))
    });
    ranked.truncate(TOP_K);
    let kept: u32 = ranked.iter().map(|s| s.count).sum();
    for s in &mut ranked {
        s.weight = s.count as f64 / kept as f64;
    }
    Ok(ranked)
}

/// Scores of one method at each of its parameter settings.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MethodResult {
    pub method: u32,
    pub settings: Vec<ErrorPair>,
    pub wrmse_star: f64,
    pub wrmse_param: u32,
    pub wmae_star: f64,
    pub wmae_param: u32,
}

fn argmin(values: impl Iterator<Item = f64>) -> (usize, f64) {
    values
        .enumerate()
        .fold((0, f64::INFINITY), |best, (i, v)| if v < best.1 { (i, v) } else { best })
}

/// Applies each of the eight settings of `method` to every image, records
/// pooled WRMSE and WMAE per setting, and keeps the minima. Ties resolve to
/// the lower setting index.
///
/// `output(param, index)` yields the method's result for `sets[index]`.
pub fn greedy_param_search<F>(
    method: u32,
    sets: &[GroundTruthSet],
    mode: PoolingMode,
    output: F,
) -> Result<MethodResult, MetricError>
where
    F: Fn(u32, usize) -> Option<Image> + Sync + Send,
{
    if sets.is_empty() {
        return Err(MetricError::Empty);
    }
    let mut settings = Vec::with_capacity(PARAM_COUNT);
    for param in 1..=PARAM_COUNT as u32 {
        let sums = pool(sets.len(), |i| {
            let set = &sets[i];
            let out = output(param, i).ok_or(MetricError::MissingCell { image: set.image, param })?;
            set.validate().map_err(|source| MetricError::GroundTruth {
                image: set.image,
                source,
            })?;
            check_dims(set.image, &out, set.targets())?;
            Ok(PooledSums::of_image(&out, set.targets(), set.weights()))
        })?;
        settings.push(ErrorPair {
            rmse: sums.rmse(mode),
            mae: sums.mae(mode),
        });
    }
    let (ri, rv) = argmin(settings.iter().map(|s| s.rmse));
    let (ai, av) = argmin(settings.iter().map(|s| s.mae));
    Ok(MethodResult {
        method,
        settings,
        wrmse_star: rv,
        wrmse_param: ri as u32 + 1,
        wmae_star: av,
        wmae_param: ai as u32 + 1,
    })
}

//! Deterministic synthetic datasets: piecewise-constant sources with additive
//! detail noise, a 7×8 grid of stand-in separable smoothers whose strength
//! grows with the parameter index, and seeded simulated votes.

use std::fs;
use std::path::Path;

use rand::distributions::{Distribution, WeightedIndex};
use rand::seq::index::sample;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::{
    candidate_path, io_err, source_path, DatasetError, DatasetManifest, DatasetMode, ImageEntry, Split, VoteRecord,
    MANIFEST_FILE, SCHEMA_VERSION, VOTE_LOG_FILE,
};
use crate::grid::{Choice, METHOD_COUNT, PARAM_COUNT};
use crate::image::Image;

/// How simulated volunteers vote.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "kebab-case")]
pub enum VotePlan {
    /// Every vote is an independent draw over the 56 grid cells, weights in
    /// row-major `(m, p)` order.
    Categorical { weights: Vec<f64> },
    /// Every volunteer picks the same cell for every image.
    Unanimous { method: u32, param: u32 },
}

impl Default for VotePlan {
    /// Most votes go to the sixth method, peaking at its middle settings.
    fn default() -> Self {
        let method = [0.05, 0.08, 0.07, 0.04, 0.06, 0.57, 0.13];
        let param = [0.04, 0.10, 0.18, 0.24, 0.20, 0.12, 0.08, 0.04];
        VotePlan::Categorical {
            weights: method.iter().flat_map(|m| param.iter().map(move |p| m * p)).collect(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SynthSpec {
    pub images: usize,
    /// The last `test_images` ids form the test split.
    pub test_images: usize,
    pub height: usize,
    pub width: usize,
    pub seed: u64,
    pub votes_per_image: usize,
    pub volunteers: usize,
    /// Number of constant regions per source.
    pub regions: usize,
    /// Half-width of the uniform detail noise.
    pub noise: f64,
    pub vote_plan: VotePlan,
}

impl Default for SynthSpec {
    fn default() -> Self {
        Self {
            images: 4,
            test_images: 1,
            height: 64,
            width: 64,
            seed: 0,
            votes_per_image: 14,
            volunteers: 26,
            regions: 5,
            noise: 0.12,
            vote_plan: VotePlan::default(),
        }
    }
}

impl SynthSpec {
    fn validate(&self) -> Result<(), DatasetError> {
        let fail = |m: String| Err(DatasetError::SynthSpec(m));
        if self.images == 0 || self.test_images > self.images {
            return fail(format!("{} images with {} in test", self.images, self.test_images));
        }
        if self.height == 0 || self.width == 0 {
            return fail("image dimensions must be positive".into());
        }
        if self.votes_per_image == 0 || self.volunteers < self.votes_per_image {
            return fail(format!(
                "{} volunteers cannot cast {} distinct votes per image",
                self.volunteers, self.votes_per_image
            ));
        }
        if self.regions == 0 || !(0.0..=0.5).contains(&self.noise) {
            return fail("regions must be positive and noise within [0, 0.5]".into());
        }
        match &self.vote_plan {
            VotePlan::Categorical { weights } => {
                if weights.len() != METHOD_COUNT * PARAM_COUNT
                    || weights.iter().any(|w| !w.is_finite() || *w < 0.0)
                    || weights.iter().sum::<f64>() <= 0.0
                {
                    return fail("categorical plan needs 56 non-negative weights with a positive sum".into());
                }
            }
            VotePlan::Unanimous { method, param } => {
                Choice::new(*method, *param).map_err(|e| DatasetError::SynthSpec(e.to_string()))?;
            }
        }
        Ok(())
    }
}

/// Bookkeeping of the votes the generator drew, kept independently of the
/// tally code so statistics can be checked against it.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct SynthReport {
    pub method_totals: [u32; METHOD_COUNT],
    pub param_totals: [[u32; PARAM_COUNT]; METHOD_COUNT],
    /// Per image, in id order.
    pub max_repeat: Vec<u32>,
}

/// A clean piecewise-constant image and its noisy observation. Regions are
/// the Voronoi cells of random seeds, each with a random color.
pub fn generate_source(height: usize, width: usize, regions: usize, noise: f64, rng: &mut impl Rng) -> (Image, Image) {
    let seeds: Vec<(f64, f64, [f64; 3])> = (0..regions)
        .map(|_| {
            let color = [rng.gen_range(0.15..0.85), rng.gen_range(0.15..0.85), rng.gen_range(0.15..0.85)];
            (rng.gen_range(0.0..height as f64), rng.gen_range(0.0..width as f64), color)
        })
        .collect();
    let region = |y: usize, x: usize| {
        let (py, px) = (y as f64 + 0.5, x as f64 + 0.5);
        seeds
            .iter()
            .enumerate()
            .map(|(i, s)| (i, (s.0 - py).powi(2) + (s.1 - px).powi(2)))
            .fold((0, f64::INFINITY), |a, b| if b.1 < a.1 { b } else { a })
            .0
    };
    let labels: Vec<usize> = (0..height * width).map(|i| region(i / width, i % width)).collect();
    let clean = Image::from_fn(height, width, |c, y, x| seeds[labels[y * width + x]].2[c]);
    let mut noisy = clean.clone();
    for v in noisy.data_mut() {
        *v = (*v + rng.gen_range(-noise..=noise)).clamp(0.0, 1.0);
    }
    (clean, noisy)
}

#[derive(Debug, Clone, Copy, PartialEq)]
enum Family {
    Gaussian,
    Box,
    Tent,
}

/// Separable stand-in smoother for one grid cell.
#[derive(Debug, Clone, PartialEq)]
pub struct StandIn {
    taps: Vec<f64>,
}

impl StandIn {
    pub fn radius(&self) -> usize {
        self.taps.len() / 2
    }

    /// Filters rows then columns, replicating edge pixels.
    pub fn apply(&self, img: &Image) -> Image {
        let r = self.radius() as isize;
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

/// Method `m` picks a kernel family (Gaussian, box, tent in rotation); the
/// kernel's spread grows with the parameter index.
pub fn candidate_smoother(choice: Choice) -> StandIn {
    let m = choice.method() as usize - 1;
    let family = [Family::Gaussian, Family::Box, Family::Tent][m % 3];
    let spread = (0.25 + 0.2 * choice.param() as f64) * (1.0 + 0.05 * m as f64);
    let radius = match family {
        Family::Gaussian => (3.0 * spread).ceil() as isize,
        Family::Box | Family::Tent => spread.ceil() as isize + 1,
    };
    let raw: Vec<f64> = (-radius..=radius)
        .map(|i| {
            let d = i.abs() as f64;
            match family {
                Family::Gaussian => (-0.5 * (d / spread).powi(2)).exp(),
                Family::Box => (spread + 1.0 - d).clamp(0.0, 1.0),
                Family::Tent => (1.0 - d / (spread + 1.0)).max(0.0),
            }
        })
        .collect();
    let total: f64 = raw.iter().sum();
    StandIn {
        taps: raw.into_iter().map(|v| v / total).collect(),
    }
}

fn volunteer_id(k: usize) -> String {
    format!("v{:02}", k + 1)
}

/// Writes a complete dataset under `root` (manifest, vote log, images) and
/// returns the generator's own vote bookkeeping. Output is a pure function of
/// `spec`.
pub fn synth_generate(spec: &SynthSpec, root: &Path) -> Result<SynthReport, DatasetError> {
    spec.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let categorical = match &spec.vote_plan {
        VotePlan::Categorical { weights } => Some(WeightedIndex::new(weights).expect("validated weights")),
        VotePlan::Unanimous { .. } => None,
    };
    let smoothers: Vec<(Choice, StandIn)> = Choice::all().map(|c| (c, candidate_smoother(c))).collect();

    let mut report = SynthReport {
        method_totals: [0; METHOD_COUNT],
        param_totals: [[0; PARAM_COUNT]; METHOD_COUNT],
        max_repeat: Vec::with_capacity(spec.images),
    };
    let mut entries = Vec::with_capacity(spec.images);
    let mut log = String::new();
    for t in 0..spec.images {
        let id = t as u32;
        let split = if t + spec.test_images >= spec.images { Split::Test } else { Split::Train };
        let dir = root.join(format!("images/{id}"));
        fs::create_dir_all(&dir).map_err(io_err(&dir))?;

        let (_, noisy) = generate_source(spec.height, spec.width, spec.regions, spec.noise, &mut rng);
        let source = noisy.quantized();
        source.save_png(&root.join(source_path(id)))?;
        for (c, s) in &smoothers {
            s.apply(&source).save_png(&root.join(candidate_path(id, *c)))?;
        }

        let mut counts = [[0u32; PARAM_COUNT]; METHOD_COUNT];
        let picked = sample(&mut rng, spec.volunteers, spec.votes_per_image);
        for (j, k) in picked.into_iter().enumerate() {
            let choice = match (&spec.vote_plan, &categorical) {
                (_, Some(dist)) => Choice::from_index(dist.sample(&mut rng)),
                (VotePlan::Unanimous { method, param }, None) => Choice::new(*method, *param).expect("validated"),
                _ => unreachable!(),
            };
            let (m, p) = (choice.method() as usize - 1, choice.param() as usize - 1);
            counts[m][p] += 1;
            report.method_totals[m] += 1;
            report.param_totals[m][p] += 1;
            let vote = VoteRecord {
                image: id,
                volunteer: volunteer_id(k),
                method: choice.method(),
                param: choice.param(),
                timestamp_ms: 1_500_000_000_000 + ((t * spec.votes_per_image + j) as u64) * 60_000,
            };
            log.push_str(&vote.to_line());
        }
        report.max_repeat.push(counts.iter().flatten().copied().max().unwrap_or(0));
        entries.push(ImageEntry::standard(id, split));
    }
    let log_path = root.join(VOTE_LOG_FILE);
    fs::write(&log_path, log).map_err(io_err(&log_path))?;
    DatasetManifest {
        schema_version: SCHEMA_VERSION,
        mode: DatasetMode::Synthetic,
        votes_per_image: spec.votes_per_image,
        vote_log: VOTE_LOG_FILE.to_string(),
        images: entries,
    }
    .save(&root.join(MANIFEST_FILE))?;
    Ok(report)
}

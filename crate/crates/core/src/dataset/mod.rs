//! Dataset layout, manifest and vote log, validation, statistics, patch
//! sampling, and a synthetic generator.
//!
//! ```text
//! <root>/manifest.json
//! <root>/votes.jsonl
//! <root>/images/<t>/source.png
//! <root>/images/<t>/m<m>_p<p>.png
//! ```

mod patches;
mod stats;
mod synth;
mod votes;

use std::collections::{BTreeMap, HashMap, HashSet};
use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use thiserror::Error;

pub use patches::{sample_patches, PatchBatch, TrainingImage};
pub use stats::{render_statistics, vote_statistics, VoteStatistics};
pub use synth::{candidate_smoother, generate_source, synth_generate, SynthReport, SynthSpec, VotePlan};
pub use votes::{append_vote, read_vote_log, VoteRecord};

use crate::grid::{Choice, GridError, ImageId, METHOD_COUNT, PARAM_COUNT};
use crate::image::{image_dimensions, Image, ImageError};
use crate::losses::GroundTruthSet;
use crate::metrics::{select_top5, MetricError, Selections, VoteTally, VOTES_PER_IMAGE};

pub const SCHEMA_VERSION: u32 = 1;
pub const FULL_TRAIN_IMAGES: usize = 400;
pub const FULL_TEST_IMAGES: usize = 100;
pub const MANIFEST_FILE: &str = "manifest.json";
pub const VOTE_LOG_FILE: &str = "votes.jsonl";

#[derive(Debug, Error)]
pub enum DatasetError {
    #[error("{path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
    #[error("{path}: {source}")]
    Json {
        path: String,
        #[source]
        source: serde_json::Error,
    },
    #[error(transparent)]
    Image(#[from] ImageError),
    #[error(transparent)]
    Metric(#[from] MetricError),
    #[error("unsupported manifest schema version {0}")]
    SchemaVersion(u32),
    #[error("image {0} is listed twice")]
    DuplicateImage(ImageId),
    #[error("image {image}: {detail}")]
    Candidates { image: ImageId, detail: String },
    #[error("image {image}: missing file {path}")]
    MissingFile { image: ImageId, path: String },
    #[error("image {image}: {path} is {found:?}, expected {expected:?}")]
    Dimensions {
        image: ImageId,
        path: String,
        expected: (usize, usize),
        found: (usize, usize),
    },
    #[error("image {image}: {found} votes, expected {expected}")]
    VoteCount { image: ImageId, expected: usize, found: usize },
    #[error("image {image}: volunteer {volunteer} voted more than once")]
    DuplicateVote { image: ImageId, volunteer: String },
    #[error("vote log line {line}: unknown image {image}")]
    UnknownImage { line: usize, image: ImageId },
    #[error("vote log line {line}: {source}")]
    VoteRange {
        line: usize,
        #[source]
        source: GridError,
    },
    #[error("vote log line {line}: {message}")]
    VoteLog { line: usize, message: String },
    #[error("full dataset needs {FULL_TRAIN_IMAGES} train and {FULL_TEST_IMAGES} test images, found {train} and {test}")]
    SplitSize { train: usize, test: usize },
    #[error("full dataset needs {VOTES_PER_IMAGE} votes per image, manifest declares {0}")]
    FullVoteCount(usize),
    #[error("the {0} split is empty")]
    EmptySplit(Split),
    #[error("patch size {patch} exceeds image {height}×{width}")]
    PatchTooLarge { patch: usize, height: usize, width: usize },
    #[error("invalid synthetic spec: {0}")]
    SynthSpec(String),
}

pub(crate) fn io_err(path: &Path) -> impl FnOnce(std::io::Error) -> DatasetError + '_ {
    move |source| DatasetError::Io {
        path: path.display().to_string(),
        source,
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum DatasetMode {
    /// 400/100 split with exactly 14 votes per image.
    Full,
    /// Arbitrary sizes; the vote count per image comes from the manifest.
    Synthetic,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Test,
}

impl std::fmt::Display for Split {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            Split::Train => "train",
            Split::Test => "test",
        })
    }
}

impl std::str::FromStr for Split {
    type Err = String;
    fn from_str(s: &str) -> Result<Self, String> {
        match s {
            "train" => Ok(Split::Train),
            "test" => Ok(Split::Test),
            _ => Err(format!("unknown split `{s}` (expected train or test)")),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Candidate {
    pub method: u32,
    pub param: u32,
    pub path: String,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ImageEntry {
    pub id: ImageId,
    pub split: Split,
    pub source: String,
    pub candidates: Vec<Candidate>,
}

/// Paths are relative to the manifest's directory.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct DatasetManifest {
    pub schema_version: u32,
    pub mode: DatasetMode,
    pub votes_per_image: usize,
    pub vote_log: String,
    pub images: Vec<ImageEntry>,
}

pub fn source_path(id: ImageId) -> String {
    format!("images/{id}/source.png")
}

pub fn candidate_path(id: ImageId, choice: Choice) -> String {
    format!("images/{id}/{}.png", choice.stem())
}

impl ImageEntry {
    /// Entry with the standard layout paths for every grid cell.
    pub fn standard(id: ImageId, split: Split) -> Self {
        Self {
            id,
            split,
            source: source_path(id),
            candidates: Choice::all()
                .map(|c| Candidate {
                    method: c.method(),
                    param: c.param(),
                    path: candidate_path(id, c),
                })
                .collect(),
        }
    }
}

impl DatasetManifest {
    pub fn load(path: &Path) -> Result<Self, DatasetError> {
        let text = fs::read_to_string(path).map_err(io_err(path))?;
        serde_json::from_str(&text).map_err(|source| DatasetError::Json {
            path: path.display().to_string(),
            source,
        })
    }

    pub fn save(&self, path: &Path) -> Result<(), DatasetError> {
        let mut text = serde_json::to_string_pretty(self).expect("manifest serializes");
        text.push('\n');
        fs::write(path, text).map_err(io_err(path))
    }
}

/// A validated dataset: manifest, vote records and their tally.
#[derive(Debug, Clone)]
pub struct Dataset {
    root: PathBuf,
    manifest: DatasetManifest,
    votes: Vec<VoteRecord>,
    tally: VoteTally,
    candidates: HashMap<(ImageId, Choice), String>,
}

fn check_candidates(entry: &ImageEntry) -> Result<HashMap<Choice, String>, DatasetError> {
    let mut map = HashMap::new();
    for c in &entry.candidates {
        let choice = Choice::new(c.method, c.param).map_err(|e| DatasetError::Candidates {
            image: entry.id,
            detail: e.to_string(),
        })?;
        if map.insert(choice, c.path.clone()).is_some() {
            return Err(DatasetError::Candidates {
                image: entry.id,
                detail: format!("candidate {choice} is listed twice"),
            });
        }
    }
    if map.len() != METHOD_COUNT * PARAM_COUNT {
        return Err(DatasetError::Candidates {
            image: entry.id,
            detail: format!("{} candidates, expected {}", map.len(), METHOD_COUNT * PARAM_COUNT),
        });
    }
    Ok(map)
}

fn check_file(root: &Path, image: ImageId, rel: &str, expected: Option<(usize, usize)>) -> Result<(usize, usize), DatasetError> {
    let path = root.join(rel);
    if !path.is_file() {
        return Err(DatasetError::MissingFile {
            image,
            path: rel.to_string(),
        });
    }
    let found = image_dimensions(&path)?;
    if let Some(expected) = expected {
        if found != expected {
            return Err(DatasetError::Dimensions {
                image,
                path: rel.to_string(),
                expected,
                found,
            });
        }
    }
    Ok(found)
}

/// Checks a vote sequence against the manifest and tallies it. Errors name
/// the offending image (and log line where it applies).
pub fn validate_votes(manifest: &DatasetManifest, votes: &[VoteRecord]) -> Result<VoteTally, DatasetError> {
    let known: HashSet<ImageId> = manifest.images.iter().map(|e| e.id).collect();
    let mut seen: HashSet<(ImageId, &str)> = HashSet::new();
    let mut tally = VoteTally::new();
    for e in &manifest.images {
        tally.add_image(e.id);
    }
    for (i, v) in votes.iter().enumerate() {
        let line = i + 1;
        if !known.contains(&v.image) {
            return Err(DatasetError::UnknownImage { line, image: v.image });
        }
        let choice = v.choice().map_err(|source| DatasetError::VoteRange { line, source })?;
        if !seen.insert((v.image, v.volunteer.as_str())) {
            return Err(DatasetError::DuplicateVote {
                image: v.image,
                volunteer: v.volunteer.clone(),
            });
        }
        tally.record(v.image, choice);
    }
    for e in &manifest.images {
        let found = tally.image_total(e.id) as usize;
        if found != manifest.votes_per_image {
            return Err(DatasetError::VoteCount {
                image: e.id,
                expected: manifest.votes_per_image,
                found,
            });
        }
    }
    Ok(tally)
}

impl Dataset {
    /// Loads a manifest and checks every invariant: schema version, unique
    /// ids, a complete candidate grid whose files exist and match the source
    /// dimensions, vote counts, one vote per volunteer and image, and the
    /// full-dataset split sizes.
    pub fn load_and_validate(manifest_path: &Path) -> Result<Self, DatasetError> {
        let manifest = DatasetManifest::load(manifest_path)?;
        let root = manifest_path.parent().unwrap_or(Path::new(".")).to_path_buf();
        if manifest.schema_version != SCHEMA_VERSION {
            return Err(DatasetError::SchemaVersion(manifest.schema_version));
        }
        if manifest.mode == DatasetMode::Full {
            if manifest.votes_per_image != VOTES_PER_IMAGE {
                return Err(DatasetError::FullVoteCount(manifest.votes_per_image));
            }
            let train = manifest.images.iter().filter(|e| e.split == Split::Train).count();
            let test = manifest.images.len() - train;
            if (train, test) != (FULL_TRAIN_IMAGES, FULL_TEST_IMAGES) {
                return Err(DatasetError::SplitSize { train, test });
            }
        }
        let mut ids = HashSet::new();
        let mut candidates = HashMap::new();
        for entry in &manifest.images {
            if !ids.insert(entry.id) {
                return Err(DatasetError::DuplicateImage(entry.id));
            }
            let grid = check_candidates(entry)?;
            let dims = check_file(&root, entry.id, &entry.source, None)?;
            let mut cells: Vec<_> = grid.into_iter().collect();
            cells.sort();
            for (choice, rel) in cells {
                check_file(&root, entry.id, &rel, Some(dims))?;
                candidates.insert((entry.id, choice), rel);
            }
        }
        let votes = read_vote_log(&root.join(&manifest.vote_log))?;
        let tally = validate_votes(&manifest, &votes)?;
        Ok(Self {
            root,
            manifest,
            votes,
            tally,
            candidates,
        })
    }

    pub fn root(&self) -> &Path {
        &self.root
    }

    pub fn manifest(&self) -> &DatasetManifest {
        &self.manifest
    }

    pub fn votes(&self) -> &[VoteRecord] {
        &self.votes
    }

    pub fn tally(&self) -> &VoteTally {
        &self.tally
    }

    /// Image ids of one split in manifest order.
    pub fn split_ids(&self, split: Split) -> Vec<ImageId> {
        self.manifest
            .images
            .iter()
            .filter(|e| e.split == split)
            .map(|e| e.id)
            .collect()
    }

    fn entry(&self, id: ImageId) -> Result<&ImageEntry, DatasetError> {
        self.manifest
            .images
            .iter()
            .find(|e| e.id == id)
            .ok_or(DatasetError::Metric(MetricError::UnknownImage(id)))
    }

    pub fn source(&self, id: ImageId) -> Result<Image, DatasetError> {
        Ok(Image::load(&self.root.join(&self.entry(id)?.source))?)
    }

    pub fn candidate(&self, id: ImageId, choice: Choice) -> Result<Image, DatasetError> {
        let rel = self
            .candidates
            .get(&(id, choice))
            .ok_or(DatasetError::Metric(MetricError::UnknownImage(id)))?;
        Ok(Image::load(&self.root.join(rel))?)
    }

    /// Top-five voted candidates with their weights.
    pub fn ground_truth(&self, id: ImageId) -> Result<GroundTruthSet, DatasetError> {
        let top = select_top5(&self.tally, id)?;
        let targets = top
            .iter()
            .map(|s| self.candidate(id, s.choice))
            .collect::<Result<Vec<_>, _>>()?;
        let weights = top.iter().map(|s| s.weight).collect();
        Ok(GroundTruthSet::new(id, targets, weights).expect("voted weights are normalized"))
    }

    /// Every selection made for `id`, ordered by volunteer.
    pub fn selections(&self, id: ImageId) -> Result<Selections, DatasetError> {
        let mut votes: Vec<&VoteRecord> = self.votes.iter().filter(|v| v.image == id).collect();
        votes.sort_by(|a, b| a.volunteer.cmp(&b.volunteer));
        let images = votes
            .iter()
            .map(|v| self.candidate(id, v.choice().expect("validated")))
            .collect::<Result<Vec<_>, _>>()?;
        Ok(Selections { image: id, images })
    }

    /// Sources and groundtruth sets of one split, loaded into memory.
    pub fn training_images(&self, split: Split) -> Result<Vec<TrainingImage>, DatasetError> {
        let ids = self.split_ids(split);
        if ids.is_empty() {
            return Err(DatasetError::EmptySplit(split));
        }
        ids.into_iter()
            .map(|id| {
                Ok(TrainingImage {
                    source: self.source(id)?,
                    targets: self.ground_truth(id)?,
                })
            })
            .collect()
    }

    /// Per-image vote counts keyed by image id.
    pub fn vote_counts(&self) -> BTreeMap<ImageId, u32> {
        self.tally.images().map(|t| (t, self.tally.image_total(t))).collect()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small() -> (tempfile::TempDir, PathBuf) {
        let dir = tempfile::tempdir().unwrap();
        let spec = SynthSpec {
            images: 3,
            test_images: 1,
            height: 12,
            width: 10,
            ..SynthSpec::default()
        };
        synth_generate(&spec, dir.path()).unwrap();
        let m = dir.path().join(MANIFEST_FILE);
        (dir, m)
    }

    #[test]
    fn generated_dataset_validates() {
        let (_dir, m) = small();
        let ds = Dataset::load_and_validate(&m).unwrap();
        assert_eq!(ds.split_ids(Split::Train), vec![0, 1]);
        assert_eq!(ds.split_ids(Split::Test), vec![2]);
        assert!(ds.vote_counts().values().all(|&c| c == 14));
        let gt = ds.ground_truth(0).unwrap();
        assert!((gt.weights().iter().sum::<f64>() - 1.0).abs() < 1e-12);
        assert_eq!(ds.selections(1).unwrap().images.len(), 14);
    }

    #[test]
    fn short_vote_count_names_image() {
        let (dir, m) = small();
        let log = dir.path().join(VOTE_LOG_FILE);
        let votes = read_vote_log(&log).unwrap();
        let kept: Vec<_> = votes.iter().filter(|v| v.image == 1).skip(1).cloned().collect();
        let mut text = String::new();
        for v in votes.iter().filter(|v| v.image != 1).chain(&kept) {
            text.push_str(&serde_json::to_string(v).unwrap());
            text.push('\n');
        }
        fs::write(&log, text).unwrap();
        assert!(matches!(
            Dataset::load_and_validate(&m),
            Err(DatasetError::VoteCount { image: 1, found: 13, .. })
        ));
    }

    #[test]
    fn wrong_candidate_dimensions_are_rejected() {
        let (dir, m) = small();
        Image::filled(5, 5, [0.0; 3])
            .save_png(&dir.path().join(candidate_path(2, Choice::new(3, 4).unwrap())))
            .unwrap();
        assert!(matches!(
            Dataset::load_and_validate(&m),
            Err(DatasetError::Dimensions { image: 2, found: (5, 5), .. })
        ));
    }

    #[test]
    fn missing_candidate_and_duplicate_vote() {
        let (dir, m) = small();
        let log = dir.path().join(VOTE_LOG_FILE);
        let mut votes = read_vote_log(&log).unwrap();
        let dup = votes[0].clone();
        votes.push(dup);
        let manifest = DatasetManifest::load(&m).unwrap();
        assert!(matches!(
            validate_votes(&manifest, &votes),
            Err(DatasetError::DuplicateVote { image: 0, .. })
        ));
        fs::remove_file(dir.path().join(candidate_path(0, Choice::new(7, 8).unwrap()))).unwrap();
        assert!(matches!(
            Dataset::load_and_validate(&m),
            Err(DatasetError::MissingFile { image: 0, .. })
        ));
    }

    #[test]
    fn full_mode_requires_standard_split() {
        let (_dir, m) = small();
        let mut manifest = DatasetManifest::load(&m).unwrap();
        manifest.mode = DatasetMode::Full;
        manifest.save(&m).unwrap();
        assert!(matches!(
            Dataset::load_and_validate(&m),
            Err(DatasetError::SplitSize { train: 2, test: 1 })
        ));
    }

    #[test]
    fn manifest_round_trip() {
        let (_dir, m) = small();
        let a = DatasetManifest::load(&m).unwrap();
        a.save(&m).unwrap();
        assert_eq!(DatasetManifest::load(&m).unwrap(), a);
    }
}

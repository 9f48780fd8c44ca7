//! Patch-based training with convergence-triggered learning-rate decay, and
//! full-image evaluation.

use std::io::Write as _;
use std::path::Path;
use std::time::Instant;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::autodiff::Tape;
use crate::dataset::{sample_patches, Dataset, DatasetError, PatchBatch, Split, TrainingImage};
use crate::image::Image;
use crate::losses::{batch_loss, BatchLoss, GroundTruthSet, LossError, LossKind};
use crate::metrics::{weighted_errors, ErrorPair, MetricError, PoolingMode};
use crate::models::{Model, ModelError, ModelSpec};
use crate::optim::{adam_step, AdamConfig, AdamState};
use crate::tensor::TensorError;

#[derive(Debug, Error)]
pub enum TrainError {
    #[error("invalid training config: {0}")]
    Config(String),
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Dataset(#[from] DatasetError),
    #[error(transparent)]
    Loss(#[from] LossError),
    #[error(transparent)]
    Metric(#[from] MetricError),
    #[error(transparent)]
    Tensor(#[from] TensorError),
    #[error("non-finite loss at step {step}")]
    NonFiniteLoss {
        step: u64,
        /// Parameters as of the last logged interval.
        last_good: Box<Model>,
    },
    #[error("no images to train on")]
    EmptyTrainSet,
    #[error("log I/O: {0}")]
    Io(#[from] std::io::Error),
}

/// Moving-average plateau test. The loss is considered converged when the
/// `average_window`-step moving average improved by less than `threshold`
/// (relative) over the last `compare_window` steps.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ConvergenceConfig {
    pub average_window: usize,
    pub compare_window: usize,
    pub threshold: f64,
}

impl Default for ConvergenceConfig {
    fn default() -> Self {
        Self {
            average_window: 1000,
            compare_window: 2000,
            threshold: 0.005,
        }
    }
}

impl ConvergenceConfig {
    pub fn describe(&self) -> String {
        format!(
            "relative improvement of the {}-step moving-average training loss below {}% over a {}-step window",
            self.average_window,
            self.threshold * 100.0,
            self.compare_window
        )
    }
}

#[derive(Debug, Clone)]
pub struct ConvergenceDetector {
    config: ConvergenceConfig,
    /// Prefix sums of the losses seen since the last reset.
    prefix: Vec<f64>,
}

impl ConvergenceDetector {
    pub fn new(config: ConvergenceConfig) -> Self {
        Self {
            config,
            prefix: vec![0.0],
        }
    }

    pub fn reset(&mut self) {
        self.prefix.truncate(1);
    }

    fn mean_ending_at(&self, end: usize) -> f64 {
        let w = self.config.average_window;
        (self.prefix[end] - self.prefix[end - w]) / w as f64
    }

    /// Records one loss; returns true once the plateau test passes.
    pub fn push(&mut self, loss: f64) -> bool {
        let last = *self.prefix.last().expect("non-empty");
        self.prefix.push(last + loss);
        let n = self.prefix.len() - 1;
        let ConvergenceConfig {
            average_window: w,
            compare_window: d,
            threshold,
        } = self.config;
        if n < w + d {
            return false;
        }
        let before = self.mean_ending_at(n - d);
        let now = self.mean_ending_at(n);
        (before - now) / before.abs().max(f64::MIN_POSITIVE) < threshold
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub model: ModelSpec,
    pub patch_size: usize,
    pub batch_size: usize,
    pub adam: AdamConfig,
    pub decay_factor: f64,
    pub convergence: ConvergenceConfig,
    pub max_steps: u64,
    pub seed: u64,
    pub loss: LossKind,
    /// Train on the per-pixel mean instead of the raw sum.
    pub normalize_loss: bool,
    /// Rescales gradients whose global L2 norm exceeds this value.
    #[serde(default)]
    pub grad_clip: Option<f64>,
    pub log_interval: u64,
    /// Full-image validation every this many steps (0 disables it).
    #[serde(default)]
    pub validation_interval: u64,
    /// Adds wall-clock seconds to interval records. Off by default so logs
    /// of identical runs are byte-identical.
    #[serde(default)]
    pub record_wall_clock: bool,
}

impl TrainConfig {
    fn base(model: ModelSpec, patch_size: usize, batch_size: usize) -> Self {
        Self {
            model,
            patch_size,
            batch_size,
            adam: AdamConfig::default(),
            decay_factor: 10.0,
            convergence: ConvergenceConfig::default(),
            max_steps: 1_000_000,
            seed: 0,
            loss: LossKind::default(),
            normalize_loss: true,
            grad_clip: None,
            log_interval: 100,
            validation_interval: 0,
            record_wall_clock: false,
        }
    }

    /// 41×41 patches, batches of 64.
    pub fn vdcnn() -> Self {
        Self::base(ModelSpec::vdcnn(), 41, 64)
    }

    /// 96×96 patches, batches of 16.
    pub fn resnet() -> Self {
        Self::base(ModelSpec::resnet(), 96, 16)
    }

    /// Desk-scale presets with shorter convergence windows.
    pub fn vdcnn_mini() -> Self {
        Self {
            convergence: ConvergenceConfig {
                average_window: 200,
                compare_window: 400,
                threshold: 0.04,
            },
            max_steps: 5000,
            ..Self::base(ModelSpec::vdcnn_mini(), 16, 8)
        }
    }

    pub fn resnet_mini() -> Self {
        Self {
            convergence: ConvergenceConfig {
                average_window: 200,
                compare_window: 400,
                threshold: 0.04,
            },
            max_steps: 5000,
            ..Self::base(ModelSpec::resnet_mini(), 28, 4)
        }
    }

    pub fn preset(name: &str) -> Option<Self> {
        Some(match name {
            "vdcnn" => Self::vdcnn(),
            "resnet" => Self::resnet(),
            "vdcnn-mini" => Self::vdcnn_mini(),
            "resnet-mini" => Self::resnet_mini(),
            _ => return None,
        })
    }

    pub fn validate(&self) -> Result<(), TrainError> {
        let fail = |m: String| Err(TrainError::Config(m));
        self.model.validate()?;
        self.loss.validate()?;
        let rf = self.model.receptive_field();
        if self.patch_size < rf {
            return fail(format!("patch size {} is below the receptive field {rf}", self.patch_size));
        }
        if self.batch_size == 0 {
            return fail("batch size must be positive".into());
        }
        if !(self.decay_factor >= 1.0) {
            return fail(format!("decay factor {} must be at least 1", self.decay_factor));
        }
        let c = &self.convergence;
        if c.average_window == 0 || c.compare_window == 0 || !(c.threshold >= 0.0) {
            return fail("convergence windows must be positive and the threshold non-negative".into());
        }
        if self.log_interval == 0 {
            return fail("log interval must be positive".into());
        }
        if let Some(clip) = self.grad_clip {
            if !(clip > 0.0) {
                return fail(format!("gradient clip {clip} must be positive"));
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum StopReason {
    Converged,
    MaxSteps,
}

/// One line of the training log.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "kebab-case")]
pub enum LogRecord {
    Header {
        model: ModelSpec,
        parameters: usize,
        patch_size: usize,
        batch_size: usize,
        seed: u64,
        loss: LossKind,
        convergence: String,
    },
    Interval {
        step: u64,
        lr: f64,
        loss_raw: f64,
        loss_normalized: f64,
        #[serde(skip_serializing_if = "Option::is_none", default)]
        val_wrmse: Option<f64>,
        #[serde(skip_serializing_if = "Option::is_none", default)]
        val_wmae: Option<f64>,
        #[serde(skip_serializing_if = "Option::is_none", default)]
        wall_clock_s: Option<f64>,
    },
    LrDecay {
        step: u64,
        from: f64,
        to: f64,
    },
    End {
        step: u64,
        reason: StopReason,
    },
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct TrainLog {
    pub records: Vec<LogRecord>,
}

impl TrainLog {
    pub fn to_jsonl(&self) -> String {
        let mut s = String::new();
        for r in &self.records {
            s.push_str(&serde_json::to_string(r).expect("record serializes"));
            s.push('\n');
        }
        s
    }

    pub fn write(&self, path: &Path) -> Result<(), TrainError> {
        let mut f = std::fs::File::create(path)?;
        f.write_all(self.to_jsonl().as_bytes())?;
        Ok(())
    }

    pub fn decay_events(&self) -> Vec<(u64, f64, f64)> {
        self.records
            .iter()
            .filter_map(|r| match *r {
                LogRecord::LrDecay { step, from, to } => Some((step, from, to)),
                _ => None,
            })
            .collect()
    }

    /// Learning rates in order of first appearance in interval records.
    pub fn lr_sequence(&self) -> Vec<f64> {
        let mut out: Vec<f64> = Vec::new();
        for r in &self.records {
            if let LogRecord::Interval { lr, .. } = *r {
                if out.last() != Some(&lr) {
                    out.push(lr);
                }
            }
        }
        out
    }
}

#[derive(Debug, Clone)]
pub struct TrainOutcome {
    pub model: Model,
    pub optimizer: AdamState,
    pub log: TrainLog,
    pub steps: u64,
    pub stop: StopReason,
}

fn clip_gradients(model: &mut Model, max_norm: f64) {
    let norm = model
        .params()
        .iter()
        .filter_map(|p| p.grad.as_ref())
        .flat_map(|g| g.data())
        .map(|v| v * v)
        .sum::<f64>()
        .sqrt();
    if norm > max_norm {
        let s = max_norm / norm;
        for p in model.params_mut() {
            if let Some(g) = &mut p.grad {
                g.data_mut().iter_mut().for_each(|v| *v *= s);
            }
        }
    }
}

/// One optimizer step on a batch: forward, loss, backward, ADAM.
pub fn train_step(
    model: &mut Model,
    optimizer: &mut AdamState,
    batch: &PatchBatch,
    loss: LossKind,
    normalize: bool,
    grad_clip: Option<f64>,
) -> Result<BatchLoss, TrainError> {
    let mut tape = Tape::new();
    let (out, params) = model.forward_train(&mut tape, Image::stack(&batch.sources))?;
    let (loss_var, value) = batch_loss(&mut tape, out, &batch.targets, loss, normalize)?;
    if !value.raw.is_finite() {
        return Ok(value);
    }
    let mut grads = tape.backward(loss_var);
    drop(tape);
    for (p, v) in model.params_mut().iter_mut().zip(params) {
        p.grad = grads.take(v);
    }
    if let Some(clip) = grad_clip {
        clip_gradients(model, clip);
    }
    adam_step(model.params_mut(), optimizer)?;
    Ok(value)
}

/// Full-image inference on each image, pooled against its groundtruths.
pub fn evaluate_images(model: &Model, images: &[TrainingImage], mode: PoolingMode) -> Result<ErrorPair, TrainError> {
    if images.is_empty() {
        return Err(TrainError::EmptyTrainSet);
    }
    let outputs = images
        .iter()
        .map(|t| model.forward(&t.source))
        .collect::<Result<Vec<_>, _>>()?;
    let sets: Vec<GroundTruthSet> = images.iter().map(|t| t.targets.clone()).collect();
    Ok(weighted_errors(&outputs, &sets, mode)?)
}

/// WRMSE and WMAE of `model` on one split of a dataset.
pub fn evaluate_split(model: &Model, dataset: &Dataset, split: Split, mode: PoolingMode) -> Result<ErrorPair, TrainError> {
    let images = dataset.training_images(split)?;
    evaluate_images(model, &images, mode)
}

/// Trains from scratch. The learning rate is divided by `decay_factor` the
/// first time the loss converges; training stops at the second convergence
/// or after `max_steps`.
pub fn train(config: &TrainConfig, images: &[TrainingImage], validation: &[TrainingImage]) -> Result<TrainOutcome, TrainError> {
    config.validate()?;
    if images.is_empty() {
        return Err(TrainError::EmptyTrainSet);
    }
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let mut model = Model::new(config.model.clone(), config.seed)?;
    let mut optimizer = AdamState::new(config.adam, model.params());
    let mut detector = ConvergenceDetector::new(config.convergence);
    let mut log = TrainLog::default();
    log.records.push(LogRecord::Header {
        model: config.model.clone(),
        parameters: model.parameter_count(),
        patch_size: config.patch_size,
        batch_size: config.batch_size,
        seed: config.seed,
        loss: config.loss,
        convergence: config.convergence.describe(),
    });

    let start = Instant::now();
    let mut last_good = model.clone();
    let mut decayed = false;
    let mut interval = (0.0, 0.0, 0u64);
    let mut step = 0;
    let stop = loop {
        if step >= config.max_steps {
            break StopReason::MaxSteps;
        }
        let batch = sample_patches(images, config.patch_size, config.batch_size, &mut rng)?;
        let value = train_step(
            &mut model,
            &mut optimizer,
            &batch,
            config.loss,
            config.normalize_loss,
            config.grad_clip,
        )?;
        step += 1;
        if !value.raw.is_finite() {
            return Err(TrainError::NonFiniteLoss {
                step,
                last_good: Box::new(last_good),
            });
        }
        interval.0 += value.raw;
        interval.1 += value.normalized;
        interval.2 += 1;

        if step % config.log_interval == 0 {
            let val = if config.validation_interval > 0 && step % config.validation_interval == 0 && !validation.is_empty() {
                Some(evaluate_images(&model, validation, PoolingMode::PerEntry)?)
            } else {
                None
            };
            log.records.push(LogRecord::Interval {
                step,
                lr: optimizer.config.lr,
                loss_raw: interval.0 / interval.2 as f64,
                loss_normalized: interval.1 / interval.2 as f64,
                val_wrmse: val.map(|v| v.rmse),
                val_wmae: val.map(|v| v.mae),
                wall_clock_s: config.record_wall_clock.then(|| start.elapsed().as_secs_f64()),
            });
            interval = (0.0, 0.0, 0);
            last_good = model.clone();
        }

        let tracked = if config.normalize_loss { value.normalized } else { value.raw };
        if detector.push(tracked) {
            if decayed {
                break StopReason::Converged;
            }
            let from = optimizer.config.lr;
            optimizer.config.lr = from / config.decay_factor;
            log.records.push(LogRecord::LrDecay {
                step,
                from,
                to: optimizer.config.lr,
            });
            decayed = true;
            detector.reset();
        }
    };
    log.records.push(LogRecord::End { step, reason: stop });
    Ok(TrainOutcome {
        model,
        optimizer,
        log,
        steps: step,
        stop,
    })
}

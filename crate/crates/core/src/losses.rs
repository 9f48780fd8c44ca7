//! Training losses against a weighted set of groundtruth images.
//!
//! All losses are raw sums over pixels, groundtruths and channels. The
//! trainer divides by the pixel count ("normalized" values) so a single
//! learning rate works across patch sizes.

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::autodiff::{Graph, Tape, Var};
use crate::grid::ImageId;
use crate::image::Image;
use crate::tensor::Tensor;

/// Tolerance on `Σ w = 1`.
pub const WEIGHT_SUM_TOLERANCE: f64 = 1e-12;

#[derive(Debug, Clone, PartialEq, Error)]
pub enum LossError {
    #[error("groundtruth weights sum to {0}, expected 1")]
    WeightSum(f64),
    #[error("groundtruth weight {0} is negative or not finite")]
    BadWeight(f64),
    #[error("groundtruth set is empty")]
    Empty,
    #[error("{targets} targets but {weights} weights")]
    Arity { targets: usize, weights: usize },
    #[error("dimension mismatch: expected {expected:?}, found {found:?}")]
    Dimensions {
        expected: (usize, usize),
        found: (usize, usize),
    },
    #[error("neighborhood extents must be odd and positive, got {0}×{1}")]
    Window(usize, usize),
    #[error("neighborhood coefficient must be non-negative, got {0}")]
    NegativeLambda(f64),
    #[error("prediction tensor has shape {0:?}, expected N×3×H×W matching the batch")]
    BatchShape(Vec<usize>),
}

pub type Result<T, E = LossError> = std::result::Result<T, E>;

/// The retained groundtruth images of one source image and their weights.
#[derive(Debug, Clone, PartialEq)]
pub struct GroundTruthSet {
    pub image: ImageId,
    targets: Vec<Image>,
    weights: Vec<f64>,
}

impl GroundTruthSet {
    pub fn new(image: ImageId, targets: Vec<Image>, weights: Vec<f64>) -> Result<Self> {
        let set = Self::from_parts_unchecked(image, targets, weights);
        set.validate()?;
        Ok(set)
    }

    pub fn single(image: ImageId, target: Image) -> Self {
        Self {
            image,
            targets: vec![target],
            weights: vec![1.0],
        }
    }

    /// Builds a set without checking invariants; consumers re-validate.
    pub fn from_parts_unchecked(image: ImageId, targets: Vec<Image>, weights: Vec<f64>) -> Self {
        Self { image, targets, weights }
    }

    pub fn validate(&self) -> Result<()> {
        if self.targets.is_empty() {
            return Err(LossError::Empty);
        }
        if self.targets.len() != self.weights.len() {
            return Err(LossError::Arity {
                targets: self.targets.len(),
                weights: self.weights.len(),
            });
        }
        if let Some(&w) = self.weights.iter().find(|w| !w.is_finite() || **w < 0.0) {
            return Err(LossError::BadWeight(w));
        }
        let sum: f64 = self.weights.iter().sum();
        if (sum - 1.0).abs() > WEIGHT_SUM_TOLERANCE {
            return Err(LossError::WeightSum(sum));
        }
        let dims = self.targets[0].dims();
        if let Some(t) = self.targets.iter().find(|t| t.dims() != dims) {
            return Err(LossError::Dimensions {
                expected: dims,
                found: t.dims(),
            });
        }
        Ok(())
    }

    pub fn targets(&self) -> &[Image] {
        &self.targets
    }

    pub fn weights(&self) -> &[f64] {
        &self.weights
    }

    pub fn dims(&self) -> (usize, usize) {
        self.targets[0].dims()
    }

    pub fn len(&self) -> usize {
        self.targets.len()
    }

    pub fn is_empty(&self) -> bool {
        self.targets.is_empty()
    }

    pub fn flip_horizontal(&self) -> Self {
        Self {
            image: self.image,
            targets: self.targets.iter().map(Image::flip_horizontal).collect(),
            weights: self.weights.clone(),
        }
    }

    pub fn crop(&self, top: usize, left: usize, height: usize, width: usize) -> Self {
        Self {
            image: self.image,
            targets: self.targets.iter().map(|t| t.crop(top, left, height, width)).collect(),
            weights: self.weights.clone(),
        }
    }

    fn check_against(&self, pred: &Image) -> Result<()> {
        self.validate()?;
        if pred.dims() != self.dims() {
            return Err(LossError::Dimensions {
                expected: self.dims(),
                found: pred.dims(),
            });
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "kebab-case")]
pub enum BoundaryPolicy {
    /// Neighbors outside the image are skipped.
    #[default]
    Clip,
}

/// Window of pixel pairs compared by the neighborhood loss. Includes the
/// center pixel, whose self-pair always contributes zero.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct NeighborhoodSpec {
    pub height: usize,
    pub width: usize,
    #[serde(default)]
    pub boundary: BoundaryPolicy,
}

impl Default for NeighborhoodSpec {
    fn default() -> Self {
        Self::square(5)
    }
}

impl NeighborhoodSpec {
    pub fn square(extent: usize) -> Self {
        Self {
            height: extent,
            width: extent,
            boundary: BoundaryPolicy::Clip,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.height % 2 == 0 || self.width % 2 == 0 {
            return Err(LossError::Window(self.height, self.width));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "kebab-case")]
pub enum LossKind {
    L2,
    L1,
    /// Weighted L1 plus `lambda` times the neighborhood loss.
    L1Nb {
        lambda: f64,
        #[serde(default)]
        window: NeighborhoodSpec,
    },
}

impl Default for LossKind {
    fn default() -> Self {
        LossKind::L1Nb {
            lambda: 1.0,
            window: NeighborhoodSpec::default(),
        }
    }
}

impl LossKind {
    pub fn validate(&self) -> Result<()> {
        if let LossKind::L1Nb { lambda, window } = self {
            if !(*lambda >= 0.0) {
                return Err(LossError::NegativeLambda(*lambda));
            }
            window.validate()?;
        }
        Ok(())
    }

    /// Raw loss of `pred`, accumulating its gradient into `grad` when given.
    pub fn evaluate(&self, pred: &Image, gts: &GroundTruthSet, grad: Option<&mut [f64]>) -> Result<f64> {
        self.validate()?;
        gts.check_against(pred)?;
        let targets: Vec<&[f64]> = gts.targets.iter().map(Image::data).collect();
        let p = pred.data();
        Ok(match *self {
            LossKind::L2 => l2_kernel(p, &targets, &gts.weights, grad),
            LossKind::L1 => l1_kernel(p, &targets, &gts.weights, grad),
            LossKind::L1Nb { lambda, window } => match grad {
                Some(g) => {
                    let l1 = l1_kernel(p, &targets, &gts.weights, Some(&mut *g));
                    if lambda == 0.0 {
                        return Ok(l1);
                    }
                    let mut nb_grad = vec![0.0; g.len()];
                    let nb = nb_kernel(p, &targets, &gts.weights, pred.dims(), window, Some(&mut nb_grad));
                    g.iter_mut().zip(&nb_grad).for_each(|(a, b)| *a += lambda * b);
                    l1 + lambda * nb
                }
                None => {
                    let l1 = l1_kernel(p, &targets, &gts.weights, None);
                    if lambda == 0.0 {
                        return Ok(l1);
                    }
                    l1 + lambda * nb_kernel(p, &targets, &gts.weights, pred.dims(), window, None)
                }
            },
        })
    }
}

fn l2_kernel(pred: &[f64], targets: &[&[f64]], weights: &[f64], mut grad: Option<&mut [f64]>) -> f64 {
    let mut total = 0.0;
    for (t, &w) in targets.iter().zip(weights) {
        for (i, (&p, &y)) in pred.iter().zip(t.iter()).enumerate() {
            let d = p - y;
            total += w * d * d;
            if let Some(g) = grad.as_deref_mut() {
                g[i] += 2.0 * w * d;
            }
        }
    }
    total
}

fn l1_kernel(pred: &[f64], targets: &[&[f64]], weights: &[f64], mut grad: Option<&mut [f64]>) -> f64 {
    let mut total = 0.0;
    for (t, &w) in targets.iter().zip(weights) {
        for (i, (&p, &y)) in pred.iter().zip(t.iter()).enumerate() {
            let d = p - y;
            total += w * d.abs();
            if let Some(g) = grad.as_deref_mut() {
                g[i] += w * sign(d);
            }
        }
    }
    total
}

#[inline]
fn sign(d: f64) -> f64 {
    if d > 0.0 {
        1.0
    } else if d < 0.0 {
        -1.0
    } else {
        0.0
    }
}

fn nb_kernel(
    pred: &[f64],
    targets: &[&[f64]],
    weights: &[f64],
    (h, w): (usize, usize),
    window: NeighborhoodSpec,
    mut grad: Option<&mut [f64]>,
) -> f64 {
    let ry = (window.height / 2) as isize;
    let rx = (window.width / 2) as isize;
    let plane = h * w;
    let mut total = 0.0;
    for c in 0..Image::CHANNELS {
        let p = &pred[c * plane..(c + 1) * plane];
        for y in 0..h {
            for x in 0..w {
                let i = y * w + x;
                for dy in -ry..=ry {
                    let qy = y as isize + dy;
                    if qy < 0 || qy >= h as isize {
                        continue;
                    }
                    for dx in -rx..=rx {
                        let qx = x as isize + dx;
                        if qx < 0 || qx >= w as isize {
                            continue;
                        }
                        let j = qy as usize * w + qx as usize;
                        let dp = p[i] - p[j];
                        for (t, &wk) in targets.iter().zip(weights) {
                            let t = &t[c * plane..(c + 1) * plane];
                            let d = dp - (t[i] - t[j]);
                            total += wk * d.abs();
                            if let Some(g) = grad.as_deref_mut() {
                                let s = wk * sign(d);
                                g[c * plane + i] += s;
                                g[c * plane + j] -= s;
                            }
                        }
                    }
                }
            }
        }
    }
    total
}

pub fn weighted_l2_loss(pred: &Image, gts: &GroundTruthSet) -> Result<f64> {
    LossKind::L2.evaluate(pred, gts, None)
}

pub fn weighted_l1_loss(pred: &Image, gts: &GroundTruthSet) -> Result<f64> {
    LossKind::L1.evaluate(pred, gts, None)
}

/// Weighted L1 distance between pairwise pixel differences of the prediction
/// and of each groundtruth inside the window.
pub fn neighborhood_loss(pred: &Image, gts: &GroundTruthSet, spec: NeighborhoodSpec) -> Result<f64> {
    spec.validate()?;
    gts.check_against(pred)?;
    let targets: Vec<&[f64]> = gts.targets.iter().map(Image::data).collect();
    Ok(nb_kernel(pred.data(), &targets, &gts.weights, pred.dims(), spec, None))
}

pub fn combined_loss(pred: &Image, gts: &GroundTruthSet, lambda: f64, spec: NeighborhoodSpec) -> Result<f64> {
    LossKind::L1Nb { lambda, window: spec }.evaluate(pred, gts, None)
}

/// Loss value and its gradient with respect to `pred`.
pub fn loss_with_grad(kind: LossKind, pred: &Image, gts: &GroundTruthSet) -> Result<(f64, Image)> {
    let mut grad = vec![0.0; pred.data().len()];
    let value = kind.evaluate(pred, gts, Some(&mut grad))?;
    let (h, w) = pred.dims();
    Ok((value, Image::new(h, w, grad).expect("same dims as pred")))
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct BatchLoss {
    pub raw: f64,
    /// `raw` divided by the number of pixels in the batch.
    pub normalized: f64,
}

/// Evaluates `kind` over an N×3×H×W prediction against one groundtruth set
/// per sample and records it on the tape. The recorded scalar is the
/// normalized loss when `normalize` is set, the raw sum otherwise.
pub fn batch_loss(
    tape: &mut Tape,
    pred: Var,
    targets: &[GroundTruthSet],
    kind: LossKind,
    normalize: bool,
) -> Result<(Var, BatchLoss)> {
    let value = tape.value(&pred);
    let shape = value.shape().to_vec();
    let &[n, 3, h, w] = shape.as_slice() else {
        return Err(LossError::BatchShape(shape));
    };
    if n != targets.len() {
        return Err(LossError::BatchShape(shape));
    }
    let sample = 3 * h * w;
    let mut grad = vec![0.0; value.len()];
    let mut raw = 0.0;
    for (i, gts) in targets.iter().enumerate() {
        let p = Image::new(h, w, value.data()[i * sample..(i + 1) * sample].to_vec()).expect("dims");
        raw += kind.evaluate(&p, gts, Some(&mut grad[i * sample..(i + 1) * sample]))?;
    }
    let pixels = (n * h * w) as f64;
    let normalized = raw / pixels;
    let scale = if normalize { 1.0 / pixels } else { 1.0 };
    grad.iter_mut().for_each(|g| *g *= scale);
    let recorded = if normalize { normalized } else { raw };
    let grad = Tensor::new(shape, grad).expect("dims");
    let var = tape.fused_scalar(pred, recorded, grad).expect("matching shape");
    Ok((var, BatchLoss { raw, normalized }))
}

//! Per-channel batch normalization over N×H×W.

use serde::{Deserialize, Serialize};

use crate::tensor::{Result, Tensor, TensorError};

pub const BN_EPSILON: f64 = 1e-5;
/// Weight kept by the running statistics on each update.
pub const BN_MOMENTUM: f64 = 0.9;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum BnMode {
    Train,
    Infer,
}

/// Exponential moving averages of per-channel mean and variance.
///
/// A fresh instance is uninitialized; the first training-mode update copies
/// the batch moments in directly instead of blending them with a prior.
#[derive(Debug, Clone, PartialEq)]
pub struct RunningStats {
    pub mean: Vec<f64>,
    pub var: Vec<f64>,
    pub initialized: bool,
}

impl RunningStats {
    pub fn uninitialized(channels: usize) -> Self {
        Self {
            mean: vec![0.0; channels],
            var: vec![1.0; channels],
            initialized: false,
        }
    }

    pub fn channels(&self) -> usize {
        self.mean.len()
    }

    /// Folds one batch's moments in. `var` is the unbiased batch variance.
    pub fn update(&mut self, moments: &BatchMoments) {
        if !self.initialized {
            self.mean.clone_from(&moments.mean);
            self.var.clone_from(&moments.unbiased_var);
            self.initialized = true;
            return;
        }
        for c in 0..self.mean.len() {
            self.mean[c] = BN_MOMENTUM * self.mean[c] + (1.0 - BN_MOMENTUM) * moments.mean[c];
            self.var[c] = BN_MOMENTUM * self.var[c] + (1.0 - BN_MOMENTUM) * moments.unbiased_var[c];
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct BatchMoments {
    pub mean: Vec<f64>,
    pub unbiased_var: Vec<f64>,
}

/// Saved activations needed by the backward rule.
#[derive(Debug, Clone)]
pub struct BnSaved {
    pub xhat: Vec<f64>,
    pub inv_std: Vec<f64>,
}

pub struct BnForward {
    pub output: Tensor,
    pub saved: BnSaved,
    /// Present in training mode only.
    pub moments: Option<BatchMoments>,
}

fn check(input: &Tensor, gamma: &Tensor, beta: &Tensor) -> Result<[usize; 4]> {
    let dims = input.dims4("batch_norm")?;
    gamma.expect_shape("batch_norm", &[dims[1]])?;
    beta.expect_shape("batch_norm", &[dims[1]])?;
    Ok(dims)
}

pub fn batch_norm_forward(
    input: &Tensor,
    gamma: &Tensor,
    beta: &Tensor,
    stats: &RunningStats,
    mode: BnMode,
) -> Result<BnForward> {
    let [n, c, h, w] = check(input, gamma, beta)?;
    if stats.channels() != c {
        return Err(TensorError::ShapeMismatch {
            op: "batch_norm",
            expected: vec![c],
            found: vec![stats.channels()],
        });
    }
    let hw = h * w;
    let count = (n * hw) as f64;
    let x = input.data();

    let (mean, var, moments) = match mode {
        BnMode::Train => {
            let mut mean = vec![0.0; c];
            let mut var = vec![0.0; c];
            for ci in 0..c {
                let plane = |ni: usize| &x[(ni * c + ci) * hw..][..hw];
                let m = (0..n).map(|ni| plane(ni).iter().sum::<f64>()).sum::<f64>() / count;
                let v = (0..n)
                    .map(|ni| plane(ni).iter().map(|&v| (v - m) * (v - m)).sum::<f64>())
                    .sum::<f64>()
                    / count;
                mean[ci] = m;
                var[ci] = v;
            }
            let unbiased_var = if count > 1.0 {
                var.iter().map(|v| v * count / (count - 1.0)).collect()
            } else {
                var.clone()
            };
            let moments = BatchMoments {
                mean: mean.clone(),
                unbiased_var,
            };
            (mean, var, Some(moments))
        }
        BnMode::Infer => {
            if !stats.initialized {
                return Err(TensorError::UninitializedRunningStats);
            }
            (stats.mean.clone(), stats.var.clone(), None)
        }
    };

    let inv_std: Vec<f64> = var.iter().map(|v| 1.0 / (v + BN_EPSILON).sqrt()).collect();
    let mut xhat = vec![0.0; x.len()];
    let mut out = vec![0.0; x.len()];
    for ni in 0..n {
        for ci in 0..c {
            let off = (ni * c + ci) * hw;
            let (g, b, m, s) = (gamma.data()[ci], beta.data()[ci], mean[ci], inv_std[ci]);
            for i in off..off + hw {
                let xh = (x[i] - m) * s;
                xhat[i] = xh;
                out[i] = g * xh + b;
            }
        }
    }
    Ok(BnForward {
        output: Tensor::new(input.shape().to_vec(), out)?,
        saved: BnSaved { xhat, inv_std },
        moments,
    })
}

pub struct BnGrads {
    pub input: Tensor,
    pub gamma: Tensor,
    pub beta: Tensor,
}

pub fn batch_norm_backward(
    shape: &[usize],
    gamma: &Tensor,
    saved: &BnSaved,
    mode: BnMode,
    grad_out: &Tensor,
) -> Result<BnGrads> {
    grad_out.expect_shape("batch_norm backward", shape)?;
    let (n, c) = (shape[0], shape[1]);
    let hw = shape[2] * shape[3];
    let count = (n * hw) as f64;
    let dy = grad_out.data();
    let xhat = &saved.xhat;

    let mut dgamma = vec![0.0; c];
    let mut dbeta = vec![0.0; c];
    for ni in 0..n {
        for ci in 0..c {
            let off = (ni * c + ci) * hw;
            for i in off..off + hw {
                dgamma[ci] += dy[i] * xhat[i];
                dbeta[ci] += dy[i];
            }
        }
    }

    let mut dx = vec![0.0; dy.len()];
    for ni in 0..n {
        for ci in 0..c {
            let off = (ni * c + ci) * hw;
            let g = gamma.data()[ci];
            let s = saved.inv_std[ci];
            match mode {
                BnMode::Train => {
                    // dx = γ·s/M · (M·dy − Σdy − x̂·Σ(dy·x̂))
                    let k = g * s / count;
                    for i in off..off + hw {
                        dx[i] = k * (count * dy[i] - dbeta[ci] - xhat[i] * dgamma[ci]);
                    }
                }
                BnMode::Infer => {
                    for i in off..off + hw {
                        dx[i] = g * s * dy[i];
                    }
                }
            }
        }
    }
    Ok(BnGrads {
        input: Tensor::new(shape.to_vec(), dx)?,
        gamma: Tensor::new(vec![c], dgamma)?,
        beta: Tensor::new(vec![c], dbeta)?,
    })
}

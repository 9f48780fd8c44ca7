//! Trainable parameters and the ADAM update.

use serde::{Deserialize, Serialize};

use crate::tensor::{Result, Tensor, TensorError};

/// A named trainable tensor and its most recent gradient.
#[derive(Debug, Clone, PartialEq)]
pub struct Parameter {
    pub name: String,
    pub value: Tensor,
    pub grad: Option<Tensor>,
}

impl Parameter {
    pub fn new(name: impl Into<String>, value: Tensor) -> Self {
        Self {
            name: name.into(),
            value,
            grad: None,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AdamConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub epsilon: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        Self {
            lr: 1e-3,
            beta1: 0.9,
            beta2: 0.999,
            epsilon: 1e-8,
        }
    }
}

/// Moment accumulators, one pair per parameter in parameter order.
#[derive(Debug, Clone, PartialEq)]
pub struct AdamState {
    pub config: AdamConfig,
    pub step: u64,
    pub first_moment: Vec<Tensor>,
    pub second_moment: Vec<Tensor>,
}

impl AdamState {
    pub fn new(config: AdamConfig, params: &[Parameter]) -> Self {
        let zeros = || params.iter().map(|p| Tensor::zeros(p.value.shape())).collect();
        Self {
            config,
            step: 0,
            first_moment: zeros(),
            second_moment: zeros(),
        }
    }
}

/// Applies one bias-corrected ADAM update in place.
///
/// Parameters without a gradient are treated as having a zero gradient. All
/// gradients are validated before any parameter is touched, so an error
/// leaves parameters and state unchanged.
pub fn adam_step(params: &mut [Parameter], state: &mut AdamState) -> Result<()> {
    assert_eq!(params.len(), state.first_moment.len(), "state built for other parameters");
    for p in params.iter() {
        if let Some(g) = &p.grad {
            g.expect_shape("adam_step", p.value.shape())?;
            if !g.is_finite() {
                return Err(TensorError::NonFiniteGradient(p.name.clone()));
            }
        }
    }

    state.step += 1;
    let AdamConfig { lr, beta1, beta2, epsilon } = state.config;
    let t = state.step as i32;
    let correction1 = 1.0 - beta1.powi(t);
    let correction2 = 1.0 - beta2.powi(t);

    for (i, p) in params.iter_mut().enumerate() {
        let m = state.first_moment[i].data_mut();
        let v = state.second_moment[i].data_mut();
        let value = p.value.data_mut();
        match &p.grad {
            Some(g) => {
                for (j, &gj) in g.data().iter().enumerate() {
                    m[j] = beta1 * m[j] + (1.0 - beta1) * gj;
                    v[j] = beta2 * v[j] + (1.0 - beta2) * gj * gj;
                    let m_hat = m[j] / correction1;
                    let v_hat = v[j] / correction2;
                    value[j] -= lr * m_hat / (v_hat.sqrt() + epsilon);
                }
            }
            None => {
                for j in 0..value.len() {
                    m[j] *= beta1;
                    v[j] *= beta2;
                    let m_hat = m[j] / correction1;
                    let v_hat = v[j] / correction2;
                    value[j] -= lr * m_hat / (v_hat.sqrt() + epsilon);
                }
            }
        }
    }
    Ok(())
}

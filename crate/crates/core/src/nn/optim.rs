use serde::{Deserialize, Serialize};

use crate::error::{shape_err, Error, Result};

/// AdamW hyperparameters with global-norm gradient clipping and an EMA copy of
/// the weights.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct AdamWConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
    /// Gradients with a global L2 norm above this are rescaled onto it.
    pub clip_norm: Option<f64>,
    pub ema_rate: f64,
}

impl Default for AdamWConfig {
    fn default() -> Self {
        Self {
            lr: 1e-4,
            beta1: 0.9,
            beta2: 0.95,
            eps: 1e-8,
            weight_decay: 0.01,
            clip_norm: Some(3.0),
            ema_rate: 0.999,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainState {
    pub params: Vec<f64>,
    pub m: Vec<f64>,
    pub v: Vec<f64>,
    pub ema: Vec<f64>,
    pub step: u64,
}

impl TrainState {
    pub fn new(params: Vec<f64>) -> Self {
        let n = params.len();
        Self {
            ema: params.clone(),
            params,
            m: vec![0.0; n],
            v: vec![0.0; n],
            step: 0,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct StepReport {
    pub grad_norm: f64,
    pub clipped: bool,
}

/// One AdamW update (decoupled weight decay) followed by the EMA update.
///
/// A gradient containing NaN or infinity is rejected: the state is left
/// untouched and [`Error::NonFiniteGradient`] is returned.
pub fn adamw_step(state: &mut TrainState, grads: &[f64], cfg: &AdamWConfig) -> Result<StepReport> {
    let n = state.params.len();
    if grads.len() != n {
        return Err(shape_err("gradient vector", n, grads.len()));
    }
    if !(cfg.lr > 0.0) {
        return Err(Error::InvalidArgument(format!("learning rate must be > 0, got {}", cfg.lr)));
    }
    if grads.iter().any(|g| !g.is_finite()) {
        return Err(Error::NonFiniteGradient { step: state.step });
    }
    let grad_norm = grads.iter().map(|g| g * g).sum::<f64>().sqrt();
    let scale = match cfg.clip_norm {
        Some(c) if grad_norm > c => c / grad_norm,
        _ => 1.0,
    };

    state.step += 1;
    let t = state.step as f64;
    let bc1 = 1.0 - cfg.beta1.powf(t);
    let bc2 = 1.0 - cfg.beta2.powf(t);
    let decay = 1.0 - cfg.lr * cfg.weight_decay;
    let rate = cfg.ema_rate;
    for i in 0..n {
        let g = grads[i] * scale;
        let m = cfg.beta1 * state.m[i] + (1.0 - cfg.beta1) * g;
        let v = cfg.beta2 * state.v[i] + (1.0 - cfg.beta2) * g * g;
        state.m[i] = m;
        state.v[i] = v;
        let p = state.params[i] * decay - cfg.lr * (m / bc1) / ((v / bc2).sqrt() + cfg.eps);
        state.params[i] = p;
        state.ema[i] = rate * state.ema[i] + (1.0 - rate) * p;
    }
    Ok(StepReport {
        grad_norm,
        clipped: scale < 1.0,
    })
}

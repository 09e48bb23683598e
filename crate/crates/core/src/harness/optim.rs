use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::params::{GradStore, ParamStore};
use crate::tensor::Scalar;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct AdamConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    /// Global gradient-norm clip; `None` disables it.
    pub clip: Option<f64>,
}

impl Default for AdamConfig {
    fn default() -> Self {
        AdamConfig {
            lr: 1e-3,
            beta1: 0.9,
            beta2: 0.98,
            eps: 1e-9,
            clip: Some(5.0),
        }
    }
}

impl AdamConfig {
    pub fn validate(&self) -> Result<()> {
        let open = |b: f64| b > 0.0 && b < 1.0;
        if !open(self.beta1) || !open(self.beta2) {
            return Err(Error::config(format!(
                "adam betas must lie in (0, 1), got ({}, {})",
                self.beta1, self.beta2
            )));
        }
        if !(self.lr > 0.0 && self.lr.is_finite()) || !(self.eps > 0.0) {
            return Err(Error::config("adam lr and eps must be positive"));
        }
        if matches!(self.clip, Some(c) if c <= 0.0) {
            return Err(Error::config("clip norm must be positive"));
        }
        Ok(())
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", tag = "kind")]
pub enum Schedule {
    Constant,
    /// Linear warmup to the peak, then `peak * sqrt(warmup / step)`.
    InverseSqrt { warmup: usize },
}

impl Schedule {
    /// Multiplier on the base rate at 1-based `step`.
    pub fn factor(&self, step: usize) -> f64 {
        match *self {
            Schedule::Constant => 1.0,
            Schedule::InverseSqrt { warmup } => {
                let s = step.max(1) as f64;
                let w = warmup.max(1) as f64;
                if s < w {
                    s / w
                } else {
                    (w / s).sqrt()
                }
            }
        }
    }
}

/// First and second moments, keyed by parameter name.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct AdamState {
    pub step: usize,
    m: BTreeMap<String, Vec<f64>>,
    v: BTreeMap<String, Vec<f64>>,
}

impl AdamState {
    pub fn new() -> Self {
        Self::default()
    }
}

/// Global L2 norm over all gradient slots.
pub fn grad_norm<S: Scalar>(grads: &GradStore<S>) -> f64 {
    grads
        .values()
        .flat_map(|g| g.iter())
        .map(|&x| x.as_f64() * x.as_f64())
        .sum::<f64>()
        .sqrt()
}

/// One bias-corrected Adam update at rate `lr`. Gradients of frozen or
/// unknown parameters are ignored.
pub fn adam_step<S: Scalar>(
    store: &mut ParamStore<S>,
    grads: &GradStore<S>,
    state: &mut AdamState,
    cfg: &AdamConfig,
    lr: f64,
) {
    state.step += 1;
    let t = state.step as i32;
    let bc1 = 1.0 - cfg.beta1.powi(t);
    let bc2 = 1.0 - cfg.beta2.powi(t);
    let scale = match cfg.clip {
        Some(c) => {
            let n = grad_norm(grads);
            if n > c {
                c / n
            } else {
                1.0
            }
        }
        None => 1.0,
    };
    for (name, g) in grads {
        let Some(p) = store.get_mut(name) else { continue };
        if !p.trainable {
            continue;
        }
        let m = state.m.entry(name.clone()).or_insert_with(|| vec![0.0; g.len()]);
        let v = state.v.entry(name.clone()).or_insert_with(|| vec![0.0; g.len()]);
        for (((w, &gi), mi), vi) in p.value.data_mut().iter_mut().zip(g).zip(m.iter_mut()).zip(v.iter_mut()) {
            let gi = gi.as_f64() * scale;
            *mi = cfg.beta1 * *mi + (1.0 - cfg.beta1) * gi;
            *vi = cfg.beta2 * *vi + (1.0 - cfg.beta2) * gi * gi;
            let upd = lr * (*mi / bc1) / ((*vi / bc2).sqrt() + cfg.eps);
            *w = S::of(w.as_f64() - upd);
        }
    }
}

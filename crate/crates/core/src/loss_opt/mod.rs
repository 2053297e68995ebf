//! Repeat-decay weighted multi-label objective, AdamW and the LR schedule.

mod optim;

pub use optim::{adamw_step, clip_gradients, global_norm, lr_at, DecayShape, OptConfig, OptError, OptState, ParamGroup};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::sequence::TargetBlock;

#[derive(Debug, Error, PartialEq)]
pub enum LossError {
    #[error("length mismatch: probs {probs}, targets {targets}, weights {weights}")]
    ShapeMismatch { probs: usize, targets: usize, weights: usize },
    #[error("invalid loss configuration: {0}")]
    Config(String),
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LossConfig {
    /// Repeat decay factor `delta` in `(0, 1]`; 1 disables the regularization.
    pub decay: f64,
    pub w_min: f64,
    /// Probabilities are clipped to `[eps, 1 - eps]` before taking logs.
    pub eps: f64,
}

impl Default for LossConfig {
    fn default() -> Self {
        Self {
            decay: 0.5,
            w_min: 0.01,
            eps: 1e-7,
        }
    }
}

impl LossConfig {
    pub fn validate(&self) -> Result<(), LossError> {
        if !(self.decay > 0.0 && self.decay <= 1.0) {
            return Err(LossError::Config(format!("decay {} outside (0, 1]", self.decay)));
        }
        if !(0.0..1.0).contains(&self.w_min) {
            return Err(LossError::Config(format!("w_min {} outside [0, 1)", self.w_min)));
        }
        if !(self.eps > 0.0 && self.eps < 0.5) {
            return Err(LossError::Config(format!("eps {} outside (0, 0.5)", self.eps)));
        }
        Ok(())
    }
}

/// `max(decay^count, w_min)`. With `decay = 0` this gives 1 at `count = 0`
/// and `w_min` afterwards.
pub fn repeat_weight(count: u32, decay: f64, w_min: f64) -> f64 {
    decay.powf(count as f64).max(w_min)
}

#[inline]
pub fn sigmoid(z: f64) -> f64 {
    if z >= 0.0 {
        1.0 / (1.0 + (-z).exp())
    } else {
        let e = z.exp();
        e / (1.0 + e)
    }
}

/// Weighted binary cross-entropy summed over the vocabulary. `weights` only
/// apply to positive entries; negatives always weigh 1.
pub fn weighted_bce(probs: &[f64], targets: &[f64], weights: &[f64], eps: f64) -> Result<f64, LossError> {
    if probs.len() != targets.len() || probs.len() != weights.len() {
        return Err(LossError::ShapeMismatch {
            probs: probs.len(),
            targets: targets.len(),
            weights: weights.len(),
        });
    }
    let mut loss = 0.0;
    for ((&p, &v), &w) in probs.iter().zip(targets).zip(weights) {
        let p = p.clamp(eps, 1.0 - eps);
        let w = if v == 1.0 { w } else { 1.0 };
        loss -= w * (v * p.ln() + (1.0 - v) * (1.0 - p).ln());
    }
    Ok(loss)
}

/// Loss of one separator slot computed from its logits, writing
/// `scale * dL/dz` into `grad`. Clipped entries get zero gradient.
pub fn slot_loss_from_logits(logits: &[f64], target: &TargetBlock, eps: f64, scale: f64, grad: &mut [f64]) -> f64 {
    let mut loss = 0.0;
    let mut positives = target.positives.iter().peekable();
    for (k, (&z, g)) in logits.iter().zip(grad.iter_mut()).enumerate() {
        let raw = sigmoid(z);
        let p = raw.clamp(eps, 1.0 - eps);
        let clipped = raw != p;
        let (v, w) = match positives.peek() {
            Some(pos) if pos.token as usize == k => {
                let w = pos.weight;
                positives.next();
                (1.0, w)
            }
            _ => (0.0, 1.0),
        };
        loss -= w * (v * p.ln() + (1.0 - v) * (1.0 - p).ln());
        *g = if clipped { 0.0 } else { scale * w * (p - v) };
    }
    debug_assert!(positives.next().is_none(), "positives must be sorted by token id");
    loss
}

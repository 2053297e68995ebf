use std::ops::Range;

use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Error, PartialEq)]
pub enum OptError {
    #[error("invalid optimizer configuration: {0}")]
    Config(String),
    #[error("non-finite gradient in {group} at flat index {index}")]
    NonFiniteGradient { group: String, index: usize },
    #[error("parameter/gradient/state length mismatch")]
    ShapeMismatch,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DecayShape {
    #[default]
    Cosine,
    Linear,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct OptConfig {
    pub learning_rate: f64,
    pub min_lr: f64,
    pub warmup_iters: u64,
    pub lr_decay_iters: u64,
    pub max_iters: u64,
    pub beta1: f64,
    pub beta2: f64,
    pub adam_eps: f64,
    pub weight_decay: f64,
    /// Global-norm clip; 0 disables clipping.
    pub grad_clip: f64,
    pub gradient_accumulation_steps: usize,
    pub batch_size: usize,
    pub decay_lr: bool,
    pub decay_shape: DecayShape,
}

impl OptConfig {
    /// The large-scale pretraining settings.
    pub fn reference() -> Self {
        Self {
            learning_rate: 2.2e-4,
            min_lr: 2.2e-5,
            warmup_iters: 20_000,
            lr_decay_iters: 800_000,
            max_iters: 810_000,
            beta1: 0.9,
            beta2: 0.95,
            adam_eps: 1e-8,
            weight_decay: 0.01,
            grad_clip: 1.0,
            gradient_accumulation_steps: 8,
            batch_size: 16,
            decay_lr: true,
            decay_shape: DecayShape::Cosine,
        }
    }

    pub fn validate(&self) -> Result<(), OptError> {
        let bad = |m: String| Err(OptError::Config(m));
        if !(self.warmup_iters <= self.lr_decay_iters && self.lr_decay_iters <= self.max_iters) {
            return bad(format!(
                "need warmup_iters ({}) <= lr_decay_iters ({}) <= max_iters ({})",
                self.warmup_iters, self.lr_decay_iters, self.max_iters
            ));
        }
        if !(self.min_lr > 0.0 && self.min_lr <= self.learning_rate) {
            return bad(format!("need 0 < min_lr ({}) <= learning_rate ({})", self.min_lr, self.learning_rate));
        }
        if !(0.0..1.0).contains(&self.beta1) || !(0.0..1.0).contains(&self.beta2) {
            return bad("betas must lie in [0, 1)".into());
        }
        if !(self.adam_eps > 0.0) || !(self.weight_decay >= 0.0) || !(self.grad_clip >= 0.0) {
            return bad("adam_eps must be positive; weight_decay and grad_clip non-negative".into());
        }
        if self.gradient_accumulation_steps == 0 || self.batch_size == 0 {
            return bad("batch_size and gradient_accumulation_steps must be positive".into());
        }
        Ok(())
    }
}

/// Linear warmup to the peak, then cosine (or linear) decay to `min_lr` at
/// `lr_decay_iters`, then constant.
pub fn lr_at(step: u64, cfg: &OptConfig) -> f64 {
    if !cfg.decay_lr {
        return cfg.learning_rate;
    }
    if step <= cfg.warmup_iters {
        if cfg.warmup_iters == 0 {
            return cfg.learning_rate;
        }
        return cfg.learning_rate * (step as f64 / cfg.warmup_iters as f64);
    }
    if step >= cfg.lr_decay_iters {
        return cfg.min_lr;
    }
    let ratio = (step - cfg.warmup_iters) as f64 / (cfg.lr_decay_iters - cfg.warmup_iters) as f64;
    let coeff = match cfg.decay_shape {
        DecayShape::Cosine => 0.5 * (1.0 + (std::f64::consts::PI * ratio).cos()),
        DecayShape::Linear => 1.0 - ratio,
    };
    cfg.min_lr + coeff * (cfg.learning_rate - cfg.min_lr)
}

/// A contiguous run of the flat parameter vector.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ParamGroup {
    pub name: String,
    pub range: Range<usize>,
    pub weight_decay: bool,
}

#[derive(Debug, Clone, PartialEq)]
pub struct OptState {
    pub m: Vec<f64>,
    pub v: Vec<f64>,
    pub step: u64,
}

impl OptState {
    pub fn new(n_params: usize) -> Self {
        Self {
            m: vec![0.0; n_params],
            v: vec![0.0; n_params],
            step: 0,
        }
    }
}

pub fn global_norm(grads: &[f64]) -> f64 {
    grads.iter().map(|g| g * g).sum::<f64>().sqrt()
}

/// Scales `grads` so their global L2 norm is at most `max_norm`. Returns the
/// norm before clipping.
pub fn clip_gradients(grads: &mut [f64], max_norm: f64) -> f64 {
    let norm = global_norm(grads);
    if norm > max_norm {
        let scale = max_norm / norm;
        for g in grads.iter_mut() {
            *g *= scale;
        }
    }
    norm
}

/// One AdamW update with bias correction and decoupled weight decay applied
/// only to groups flagged for it.
pub fn adamw_step(
    params: &mut [f64],
    grads: &[f64],
    groups: &[ParamGroup],
    state: &mut OptState,
    cfg: &OptConfig,
    lr: f64,
) -> Result<(), OptError> {
    if params.len() != grads.len() || state.m.len() != params.len() || state.v.len() != params.len() {
        return Err(OptError::ShapeMismatch);
    }
    for group in groups {
        if let Some(i) = grads[group.range.clone()].iter().position(|g| !g.is_finite()) {
            return Err(OptError::NonFiniteGradient {
                group: group.name.clone(),
                index: group.range.start + i,
            });
        }
    }
    state.step += 1;
    let t = state.step as i32;
    let bc1 = 1.0 - cfg.beta1.powi(t);
    let bc2 = 1.0 - cfg.beta2.powi(t);
    for group in groups {
        let decay = if group.weight_decay { lr * cfg.weight_decay } else { 0.0 };
        for i in group.range.clone() {
            let g = grads[i];
            if decay != 0.0 {
                params[i] *= 1.0 - decay;
            }
            state.m[i] = cfg.beta1 * state.m[i] + (1.0 - cfg.beta1) * g;
            state.v[i] = cfg.beta2 * state.v[i] + (1.0 - cfg.beta2) * g * g;
            let m_hat = state.m[i] / bc1;
            let v_hat = state.v[i] / bc2;
            params[i] -= lr * m_hat / (v_hat.sqrt() + cfg.adam_eps);
        }
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn one_group(n: usize, decay: bool) -> Vec<ParamGroup> {
        vec![ParamGroup {
            name: "w".into(),
            range: 0..n,
            weight_decay: decay,
        }]
    }

    fn small_cfg() -> OptConfig {
        OptConfig {
            warmup_iters: 10,
            lr_decay_iters: 100,
            max_iters: 120,
            ..OptConfig::reference()
        }
    }

    #[test]
    fn schedule_anchor_values() {
        let cfg = OptConfig::reference();
        assert_eq!(lr_at(20_000, &cfg), 2.2e-4);
        assert_eq!(lr_at(800_000, &cfg), 2.2e-5);
        assert_eq!(lr_at(810_000, &cfg), 2.2e-5);
        assert_eq!(lr_at(10_000, &cfg), 1.1e-4);
        assert_eq!(lr_at(0, &cfg), 0.0);
    }

    #[test]
    fn schedule_is_continuous_at_the_joints() {
        for shape in [DecayShape::Cosine, DecayShape::Linear] {
            let cfg = OptConfig {
                decay_shape: shape,
                ..OptConfig::reference()
            };
            let w = cfg.warmup_iters;
            let d = cfg.lr_decay_iters;
            let slope = cfg.learning_rate / w as f64;
            assert!((lr_at(w + 1, &cfg) - lr_at(w, &cfg)).abs() <= slope);
            assert!((lr_at(d - 1, &cfg) - lr_at(d, &cfg)).abs() <= (cfg.learning_rate - cfg.min_lr) / (d - w) as f64);
            for s in [w, w + 1000, 400_000, d - 1] {
                assert!(lr_at(s + 1, &cfg) <= lr_at(s, &cfg));
            }
        }
        let flat = OptConfig {
            decay_lr: false,
            ..OptConfig::reference()
        };
        assert_eq!(lr_at(5, &flat), flat.learning_rate);
    }

    #[test]
    fn zero_grads_without_decay_leave_params() {
        let mut p = vec![0.3, -1.2, 4.0];
        let before = p.clone();
        let mut state = OptState::new(3);
        adamw_step(&mut p, &[0.0; 3], &one_group(3, true), &mut state, &OptConfig { weight_decay: 0.0, ..small_cfg() }, 1e-2)
            .unwrap();
        assert_eq!(p, before);
        assert_eq!(state.step, 1);
    }

    #[test]
    fn pure_weight_decay() {
        let cfg = OptConfig {
            weight_decay: 0.1,
            ..small_cfg()
        };
        let lr = 0.05;
        let mut p = vec![2.0, -3.0];
        let mut state = OptState::new(2);
        adamw_step(&mut p, &[0.0; 2], &one_group(2, true), &mut state, &cfg, lr).unwrap();
        assert_eq!(p, vec![2.0 * (1.0 - lr * 0.1), -3.0 * (1.0 - lr * 0.1)]);

        let mut q = vec![2.0];
        adamw_step(&mut q, &[0.0], &one_group(1, false), &mut OptState::new(1), &cfg, lr).unwrap();
        assert_eq!(q, vec![2.0]);
    }

    #[test]
    fn scalar_two_steps_match_reference() {
        let cfg = OptConfig {
            weight_decay: 0.01,
            ..small_cfg()
        };
        let (lr1, lr2) = (1e-3, 2e-3);
        let (g1, g2) = (0.5, -0.25);
        let mut p = vec![1.0];
        let mut state = OptState::new(1);
        adamw_step(&mut p, &[g1], &one_group(1, true), &mut state, &cfg, lr1).unwrap();
        adamw_step(&mut p, &[g2], &one_group(1, true), &mut state, &cfg, lr2).unwrap();

        // Hand-unrolled reference.
        let (b1, b2, eps, wd) = (0.9f64, 0.95f64, 1e-8, 0.01);
        let mut x = 1.0f64;
        x *= 1.0 - lr1 * wd;
        let m1 = (1.0 - b1) * g1;
        let v1 = (1.0 - b2) * g1 * g1;
        x -= lr1 * (m1 / (1.0 - b1)) / ((v1 / (1.0 - b2)).sqrt() + eps);
        x *= 1.0 - lr2 * wd;
        let m2 = b1 * m1 + (1.0 - b1) * g2;
        let v2 = b2 * v1 + (1.0 - b2) * g2 * g2;
        x -= lr2 * (m2 / (1.0 - b1 * b1)) / ((v2 / (1.0 - b2 * b2)).sqrt() + eps);
        assert!((p[0] - x).abs() < 1e-12, "{} vs {x}", p[0]);
    }

    #[test]
    fn non_finite_gradient_aborts() {
        let mut p = vec![1.0, 2.0];
        let mut state = OptState::new(2);
        let err = adamw_step(&mut p, &[0.1, f64::NAN], &one_group(2, false), &mut state, &small_cfg(), 1e-3).unwrap_err();
        assert_eq!(err, OptError::NonFiniteGradient { group: "w".into(), index: 1 });
        assert_eq!(p, vec![1.0, 2.0]);
        assert_eq!(state.step, 0);
    }

    #[test]
    fn clipping() {
        let mut small = vec![0.3, 0.4];
        assert_eq!(clip_gradients(&mut small, 1.0), 0.5);
        assert_eq!(small, vec![0.3, 0.4]);

        let mut big = vec![0.0, 4.0 * 0.6, 4.0 * 0.8];
        let before = big.clone();
        let norm = clip_gradients(&mut big, 1.0);
        assert!((norm - 4.0).abs() < 1e-12);
        assert!((global_norm(&big) - 1.0).abs() < 1e-12);
        for (a, b) in big.iter().zip(&before) {
            assert!((a - 0.25 * b).abs() < 1e-15);
            assert!((a / 1.0 - b / norm).abs() < 1e-15);
        }
    }

    #[test]
    fn config_ordering_enforced() {
        assert!(OptConfig::reference().validate().is_ok());
        let bad = OptConfig {
            warmup_iters: 900_000,
            ..OptConfig::reference()
        };
        assert!(bad.validate().is_err());
        let bad_lr = OptConfig {
            min_lr: 1.0,
            ..OptConfig::reference()
        };
        assert!(bad_lr.validate().is_err());
    }
}

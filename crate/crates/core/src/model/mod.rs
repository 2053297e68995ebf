//! Decoder-only transformer over visit-grouped token sequences.
//!
//! Pre-norm GPT-2 style blocks with a 4x GELU MLP, rotary attention driven by
//! elapsed-day positions, and an arbitrary boolean attention mask. All
//! parameters live in one flat `f64` buffer described by a [`ParamLayout`], so
//! the optimizer, checkpoints and gradient checks work on plain slices.

mod checkpoint;
mod forward;
mod rotary;

pub use checkpoint::{load_checkpoint, save_checkpoint, Checkpoint, CheckpointError};
pub use forward::{
    accumulate_loss_and_grads, backward, forward, forward_cached, forward_rows, head_logits, loss_and_grads, ForwardCache,
    ForwardOutput, LossGrads,
};
pub use rotary::{apply_rotary, RotaryTable};

use ndarray::{ArrayView2, ArrayViewMut2};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::loss_opt::ParamGroup;

#[derive(Debug, Error)]
pub enum ModelError {
    #[error("invalid model configuration: {0}")]
    Config(String),
    #[error("token id {token} at position {position} is outside the vocabulary of {vocab_size}")]
    TokenOutOfRange { token: u32, position: usize, vocab_size: usize },
    #[error("sequence length {len} exceeds block_size {block_size}")]
    TooLong { len: usize, block_size: usize },
    #[error("mask is {mask}x{mask} but the sequence has {len} tokens")]
    MaskShape { mask: usize, len: usize },
    #[error("non-finite values after {stage}")]
    NonFinite { stage: String },
    #[error("batch has {slots} separator slots but {targets} target blocks")]
    MissingTargets { slots: usize, targets: usize },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub n_layer: usize,
    pub n_head: usize,
    pub n_embd: usize,
    pub vocab_size: usize,
    pub block_size: usize,
    pub rotary_base: f64,
    pub bias: bool,
    pub dropout: f64,
}

impl ModelConfig {
    pub fn desk(vocab_size: usize) -> Self {
        Self {
            n_layer: 4,
            n_head: 4,
            n_embd: 128,
            vocab_size,
            block_size: 512,
            rotary_base: 10_000.0,
            bias: false,
            dropout: 0.0,
        }
    }

    pub fn head_dim(&self) -> usize {
        self.n_embd / self.n_head
    }

    pub fn validate(&self) -> Result<(), ModelError> {
        let bad = |m: &str| Err(ModelError::Config(m.to_string()));
        if self.n_layer == 0 || self.n_head == 0 || self.n_embd == 0 || self.vocab_size == 0 || self.block_size == 0 {
            return bad("all sizes must be positive");
        }
        if self.n_embd % self.n_head != 0 {
            return bad("n_embd must be divisible by n_head");
        }
        if self.head_dim() % 2 != 0 {
            return bad("head_dim must be even for rotary embeddings");
        }
        if !(self.rotary_base > 1.0) {
            return bad("rotary_base must exceed 1");
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return bad("dropout must lie in [0, 1)");
        }
        Ok(())
    }
}

/// Location of one tensor in the flat buffer. Vectors are `1 x n`.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Slot {
    pub offset: usize,
    pub rows: usize,
    pub cols: usize,
}

impl Slot {
    pub fn len(&self) -> usize {
        self.rows * self.cols
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn range(&self) -> std::ops::Range<usize> {
        self.offset..self.offset + self.len()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum Init {
    Normal,
    ResidualNormal,
    Ones,
    Zeros,
}

#[derive(Debug, Clone, PartialEq)]
pub struct TensorInfo {
    pub name: String,
    pub slot: Slot,
    pub weight_decay: bool,
    init: Init,
}

#[derive(Debug, Clone, PartialEq)]
pub struct LayerSlots {
    pub ln1_g: Slot,
    pub ln1_b: Option<Slot>,
    pub attn_w: Slot,
    pub attn_b: Option<Slot>,
    pub attn_proj_w: Slot,
    pub attn_proj_b: Option<Slot>,
    pub ln2_g: Slot,
    pub ln2_b: Option<Slot>,
    pub fc_w: Slot,
    pub fc_b: Option<Slot>,
    pub mlp_proj_w: Slot,
    pub mlp_proj_b: Option<Slot>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ParamLayout {
    pub wte: Slot,
    pub layers: Vec<LayerSlots>,
    pub lnf_g: Slot,
    pub lnf_b: Option<Slot>,
    pub head_w: Slot,
    pub head_b: Option<Slot>,
    pub tensors: Vec<TensorInfo>,
    pub total: usize,
}

struct LayoutBuilder {
    tensors: Vec<TensorInfo>,
    total: usize,
}

impl LayoutBuilder {
    fn add(&mut self, name: String, rows: usize, cols: usize, init: Init, weight_decay: bool) -> Slot {
        let slot = Slot {
            offset: self.total,
            rows,
            cols,
        };
        self.total += slot.len();
        self.tensors.push(TensorInfo {
            name,
            slot,
            weight_decay,
            init,
        });
        slot
    }

    fn bias(&mut self, enabled: bool, name: String, n: usize) -> Option<Slot> {
        enabled.then(|| self.add(name, 1, n, Init::Zeros, false))
    }
}

impl ParamLayout {
    pub fn new(cfg: &ModelConfig) -> Self {
        let d = cfg.n_embd;
        let v = cfg.vocab_size;
        let mut b = LayoutBuilder {
            tensors: Vec::new(),
            total: 0,
        };
        let wte = b.add("wte".into(), v, d, Init::Normal, false);
        let layers = (0..cfg.n_layer)
            .map(|l| {
                let p = |s: &str| format!("h.{l}.{s}");
                LayerSlots {
                    ln1_g: b.add(p("ln_1.weight"), 1, d, Init::Ones, false),
                    ln1_b: b.bias(cfg.bias, p("ln_1.bias"), d),
                    attn_w: b.add(p("attn.c_attn.weight"), d, 3 * d, Init::Normal, true),
                    attn_b: b.bias(cfg.bias, p("attn.c_attn.bias"), 3 * d),
                    attn_proj_w: b.add(p("attn.c_proj.weight"), d, d, Init::ResidualNormal, true),
                    attn_proj_b: b.bias(cfg.bias, p("attn.c_proj.bias"), d),
                    ln2_g: b.add(p("ln_2.weight"), 1, d, Init::Ones, false),
                    ln2_b: b.bias(cfg.bias, p("ln_2.bias"), d),
                    fc_w: b.add(p("mlp.c_fc.weight"), d, 4 * d, Init::Normal, true),
                    fc_b: b.bias(cfg.bias, p("mlp.c_fc.bias"), 4 * d),
                    mlp_proj_w: b.add(p("mlp.c_proj.weight"), 4 * d, d, Init::ResidualNormal, true),
                    mlp_proj_b: b.bias(cfg.bias, p("mlp.c_proj.bias"), d),
                }
            })
            .collect();
        let lnf_g = b.add("ln_f.weight".into(), 1, d, Init::Ones, false);
        let lnf_b = b.bias(cfg.bias, "ln_f.bias".into(), d);
        let head_w = b.add("lm_head.weight".into(), d, v, Init::Normal, true);
        let head_b = b.bias(cfg.bias, "lm_head.bias".into(), v);
        Self {
            wte,
            layers,
            lnf_g,
            lnf_b,
            head_w,
            head_b,
            tensors: b.tensors,
            total: b.total,
        }
    }

    pub fn param_groups(&self) -> Vec<ParamGroup> {
        self.tensors
            .iter()
            .map(|t| ParamGroup {
                name: t.name.clone(),
                range: t.slot.range(),
                weight_decay: t.weight_decay,
            })
            .collect()
    }
}

pub(crate) fn view(data: &[f64], s: Slot) -> ArrayView2<'_, f64> {
    ArrayView2::from_shape((s.rows, s.cols), &data[s.range()]).expect("slot within buffer")
}

pub(crate) fn view_mut(data: &mut [f64], s: Slot) -> ArrayViewMut2<'_, f64> {
    ArrayViewMut2::from_shape((s.rows, s.cols), &mut data[s.range()]).expect("slot within buffer")
}

#[derive(Debug, Clone, PartialEq)]
pub struct ModelParams {
    pub config: ModelConfig,
    pub layout: ParamLayout,
    pub data: Vec<f64>,
}

impl ModelParams {
    /// GPT-2 style initialization: N(0, 0.02) weights, residual projections
    /// scaled by `1 / sqrt(2 * n_layer)`, unit norm gains, zero biases.
    pub fn init(config: &ModelConfig, seed: u64) -> Result<Self, ModelError> {
        config.validate()?;
        let layout = ParamLayout::new(config);
        let mut data = vec![0.0; layout.total];
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let normal = Normal::new(0.0, 0.02).unwrap();
        let residual = Normal::new(0.0, 0.02 / (2.0 * config.n_layer as f64).sqrt()).unwrap();
        for t in &layout.tensors {
            let chunk = &mut data[t.slot.range()];
            match t.init {
                Init::Normal => chunk.iter_mut().for_each(|x| *x = normal.sample(&mut rng)),
                Init::ResidualNormal => chunk.iter_mut().for_each(|x| *x = residual.sample(&mut rng)),
                Init::Ones => chunk.fill(1.0),
                Init::Zeros => {}
            }
        }
        Ok(Self {
            config: config.clone(),
            layout,
            data,
        })
    }

    pub fn from_data(config: &ModelConfig, data: Vec<f64>) -> Result<Self, ModelError> {
        config.validate()?;
        let layout = ParamLayout::new(config);
        if data.len() != layout.total {
            return Err(ModelError::Config(format!("expected {} parameters, got {}", layout.total, data.len())));
        }
        Ok(Self {
            config: config.clone(),
            layout,
            data,
        })
    }

    pub fn num_params(&self) -> usize {
        self.data.len()
    }

    pub fn view(&self, s: Slot) -> ArrayView2<'_, f64> {
        view(&self.data, s)
    }

    pub fn zeros_like(&self) -> Vec<f64> {
        vec![0.0; self.data.len()]
    }

    pub fn all_finite(&self) -> bool {
        self.data.iter().all(|x| x.is_finite())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn closed_form_count(l: usize, d: usize, v: usize, bias: bool) -> usize {
        let per_layer = 2 * d + 12 * d * d + if bias { 11 * d } else { 0 };
        v * d + l * per_layer + d + d * v + if bias { d + v } else { 0 }
    }

    fn config(bias: bool) -> ModelConfig {
        ModelConfig {
            n_layer: 2,
            n_head: 2,
            n_embd: 32,
            vocab_size: 256,
            block_size: 64,
            rotary_base: 10_000.0,
            bias,
            dropout: 0.0,
        }
    }

    #[test]
    fn parameter_count_matches_closed_form() {
        for bias in [false, true] {
            let p = ModelParams::init(&config(bias), 0).unwrap();
            let enumerated: usize = p.layout.tensors.iter().map(|t| t.slot.len()).sum();
            assert_eq!(enumerated, p.num_params());
            assert_eq!(p.num_params(), closed_form_count(2, 32, 256, bias));
        }
        assert_eq!(closed_form_count(2, 32, 256, false), 41_120);
    }

    #[test]
    fn init_is_seeded() {
        let a = ModelParams::init(&config(false), 11).unwrap();
        let b = ModelParams::init(&config(false), 11).unwrap();
        let c = ModelParams::init(&config(false), 12).unwrap();
        assert_eq!(a, b);
        assert_ne!(a.data, c.data);
        assert!(a.all_finite());
    }

    #[test]
    fn init_scales() {
        let p = ModelParams::init(&config(true), 3).unwrap();
        let std = |s: Slot| {
            let x = &p.data[s.range()];
            (x.iter().map(|v| v * v).sum::<f64>() / x.len() as f64).sqrt()
        };
        assert!((std(p.layout.wte) - 0.02).abs() < 0.002);
        assert!((std(p.layout.layers[0].mlp_proj_w) - 0.01).abs() < 0.001);
        assert!(p.data[p.layout.layers[1].ln2_g.range()].iter().all(|&x| x == 1.0));
        assert!(p.data[p.layout.head_b.unwrap().range()].iter().all(|&x| x == 0.0));
    }

    #[test]
    fn layout_is_contiguous_and_decay_targets_matrices() {
        let layout = ParamLayout::new(&config(true));
        let mut next = 0;
        for t in &layout.tensors {
            assert_eq!(t.slot.offset, next);
            next += t.slot.len();
            assert_eq!(t.weight_decay, t.slot.rows > 1 && t.name != "wte", "{}", t.name);
        }
        assert_eq!(next, layout.total);
    }

    #[test]
    fn invalid_configs() {
        let mut c = config(false);
        c.n_head = 3;
        assert!(c.validate().is_err());
        let mut c = config(false);
        c.n_embd = 6;
        c.n_head = 2;
        assert!(c.validate().is_err());
    }
}

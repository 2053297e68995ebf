//! Generative next-visit pretraining for longitudinal clinical event
//! sequences: synthetic cohorts, tokenization, visit-aware packing, a small
//! rotary transformer with repeat-decay weighted multi-label loss, and
//! evaluation of next-visit and zero-shot risk predictions.

pub mod cohort;
pub mod config;
pub mod eval;
pub mod loss_opt;
pub mod model;
pub mod pipeline;
pub mod sequence;
pub mod tokenizer;
pub mod train;

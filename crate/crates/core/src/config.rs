//! Flat TOML run configuration. Every key has a default; the resolved
//! configuration is echoed next to the artifacts and hashed into them.

use std::path::Path;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use thiserror::Error;

use crate::cohort::{CohortConfig, PlantedRule, SporadicCode, VocabSizes};
use crate::eval::BootstrapConfig;
use crate::loss_opt::{DecayShape, LossConfig, OptConfig};
use crate::model::ModelConfig;
use crate::sequence::PackingMode;
use crate::tokenizer::BinningConfig;

#[derive(Debug, Error)]
pub enum ConfigError {
    #[error("reading config {path}: {source}")]
    Read { path: String, source: std::io::Error },
    #[error("parsing config: {0}")]
    Parse(#[from] toml::de::Error),
    #[error("invalid config: {0}")]
    Invalid(String),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub seed: u64,

    pub n_patients: usize,
    pub n_demographic_codes: usize,
    pub n_diagnosis_codes: usize,
    pub n_medication_codes: usize,
    pub n_lab_codes: usize,
    pub mean_visits: f64,
    pub max_visits: usize,
    pub mean_gap_days: f64,
    pub min_gap_days: u32,
    pub diagnoses_per_visit: f64,
    pub medications_per_visit: f64,
    pub labs_per_visit: f64,
    pub zipf_exponent: f64,
    pub start_age_min: f64,
    pub start_age_max: f64,
    /// e.g. `"dx:TRIG p=0.05 once"`.
    pub sporadic_codes: Vec<String>,
    /// e.g. `"dx:TRIG -> dx:EFFECT lag=1 p=1.0 once"`.
    pub planted_rules: Vec<String>,
    pub split_train: f64,
    pub split_val: f64,
    pub split_test: f64,

    pub lab_bins: usize,
    pub age_bins: usize,

    pub n_layer: usize,
    pub n_head: usize,
    pub n_embd: usize,
    pub block_size: usize,
    pub bias: bool,
    pub dropout: f64,
    pub rotary_base: f64,

    pub temporal_decay: f64,
    pub w_min: f64,
    pub prob_eps: f64,

    pub learning_rate: f64,
    pub min_lr: f64,
    pub warmup_iters: u64,
    pub lr_decay_iters: u64,
    pub max_iters: u64,
    pub beta1: f64,
    pub beta2: f64,
    pub adam_eps: f64,
    pub weight_decay: f64,
    pub grad_clip: f64,
    pub gradient_accumulation_steps: usize,
    pub batch_size: usize,
    pub decay_lr: bool,
    /// `cosine` or `linear`.
    pub decay_shape: String,
    /// `cross` or `isolated`.
    pub packing_mode: String,
    pub eval_interval: u64,
    /// Validation rows used for the periodic loss; 0 means all.
    pub eval_rows: usize,

    /// Name of the label set evaluated by the evaluation commands.
    pub condition: String,
    /// Label-set file; empty means the one written by `gen`.
    pub label_file: String,
    pub horizons_days: Vec<u32>,
    pub query_grid_size: usize,
    pub bootstrap_resamples: usize,
    pub sweep_deltas: Vec<f64>,
}

impl Default for RunConfig {
    fn default() -> Self {
        let c = CohortConfig::default();
        Self {
            seed: 7,
            n_patients: 2000,
            n_demographic_codes: c.vocab_sizes.demographic,
            n_diagnosis_codes: c.vocab_sizes.diagnosis,
            n_medication_codes: c.vocab_sizes.medication,
            n_lab_codes: c.vocab_sizes.lab,
            mean_visits: c.mean_visits,
            max_visits: c.max_visits,
            mean_gap_days: c.mean_gap_days,
            min_gap_days: c.min_gap_days,
            diagnoses_per_visit: c.diagnoses_per_visit,
            medications_per_visit: c.medications_per_visit,
            labs_per_visit: c.labs_per_visit,
            zipf_exponent: c.zipf_exponent,
            start_age_min: c.start_age_years.0,
            start_age_max: c.start_age_years.1,
            sporadic_codes: vec!["dx:TRIG p=0.05 once".into()],
            planted_rules: vec!["dx:TRIG -> dx:EFFECT lag=1 p=1 once".into()],
            split_train: 0.7,
            split_val: 0.15,
            split_test: 0.15,
            lab_bins: 10,
            age_bins: 10,
            n_layer: 2,
            n_head: 2,
            n_embd: 32,
            block_size: 128,
            bias: false,
            dropout: 0.0,
            rotary_base: 10_000.0,
            temporal_decay: 0.5,
            w_min: 0.01,
            prob_eps: 1e-7,
            learning_rate: 3e-3,
            min_lr: 3e-4,
            warmup_iters: 20,
            lr_decay_iters: 300,
            max_iters: 300,
            beta1: 0.9,
            beta2: 0.95,
            adam_eps: 1e-8,
            weight_decay: 0.01,
            grad_clip: 1.0,
            gradient_accumulation_steps: 1,
            batch_size: 8,
            decay_lr: true,
            decay_shape: "cosine".into(),
            packing_mode: "cross".into(),
            eval_interval: 50,
            eval_rows: 0,
            condition: "EFFECT".into(),
            label_file: String::new(),
            horizons_days: vec![730, 1825],
            query_grid_size: 8,
            bootstrap_resamples: 1000,
            sweep_deltas: vec![1.0, 0.75, 0.5, 0.25],
        }
    }
}

fn invalid(e: impl ToString) -> ConfigError {
    ConfigError::Invalid(e.to_string())
}

impl RunConfig {
    pub fn from_toml_str(text: &str) -> Result<Self, ConfigError> {
        let cfg: RunConfig = toml::from_str(text)?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self, ConfigError> {
        let text = std::fs::read_to_string(path).map_err(|source| ConfigError::Read {
            path: path.display().to_string(),
            source,
        })?;
        Self::from_toml_str(&text)
    }

    /// Fully resolved configuration text.
    pub fn echo(&self) -> String {
        toml::to_string(self).expect("run config serializes")
    }

    /// Hex SHA-256 of [`RunConfig::echo`].
    pub fn hash(&self) -> String {
        hex::encode(Sha256::digest(self.echo().as_bytes()))
    }

    pub fn validate(&self) -> Result<(), ConfigError> {
        self.cohort()?.validate().map_err(invalid)?;
        self.model(2).validate().map_err(invalid)?;
        self.loss().validate().map_err(invalid)?;
        self.opt()?.validate().map_err(invalid)?;
        self.packing()?;
        let sum = self.split_train + self.split_val + self.split_test;
        if (sum - 1.0).abs() > 1e-9 {
            return Err(invalid(format!("split fractions sum to {sum}, not 1")));
        }
        if self.lab_bins < 2 || self.age_bins < 2 {
            return Err(invalid("lab_bins and age_bins must be at least 2"));
        }
        if self.eval_interval == 0 {
            return Err(invalid("eval_interval must be positive"));
        }
        if self.query_grid_size == 0 || self.query_grid_size >= self.block_size {
            return Err(invalid("query_grid_size must be in [1, block_size)"));
        }
        if self.bootstrap_resamples < 100 {
            return Err(invalid("bootstrap_resamples must be at least 100"));
        }
        if let Some(h) = self.horizons_days.iter().find(|&&h| h <= 365) {
            return Err(invalid(format!("horizon {h} must exceed 365 days")));
        }
        if let Some(d) = self.sweep_deltas.iter().find(|&&d| !(d > 0.0 && d <= 1.0)) {
            return Err(invalid(format!("sweep delta {d} outside (0, 1]")));
        }
        Ok(())
    }

    pub fn cohort(&self) -> Result<CohortConfig, ConfigError> {
        let sporadic_codes = self
            .sporadic_codes
            .iter()
            .map(|s| s.parse::<SporadicCode>())
            .collect::<Result<_, _>>()
            .map_err(invalid)?;
        let planted_rules = self
            .planted_rules
            .iter()
            .map(|s| s.parse::<PlantedRule>())
            .collect::<Result<_, _>>()
            .map_err(invalid)?;
        Ok(CohortConfig {
            n_patients: self.n_patients,
            vocab_sizes: VocabSizes {
                demographic: self.n_demographic_codes,
                diagnosis: self.n_diagnosis_codes,
                medication: self.n_medication_codes,
                lab: self.n_lab_codes,
            },
            mean_visits: self.mean_visits,
            max_visits: self.max_visits,
            mean_gap_days: self.mean_gap_days,
            min_gap_days: self.min_gap_days,
            diagnoses_per_visit: self.diagnoses_per_visit,
            medications_per_visit: self.medications_per_visit,
            labs_per_visit: self.labs_per_visit,
            zipf_exponent: self.zipf_exponent,
            start_age_years: (self.start_age_min, self.start_age_max),
            sporadic_codes,
            planted_rules,
            rng_seed: self.seed,
        })
    }

    pub fn split_fractions(&self) -> [f64; 3] {
        [self.split_train, self.split_val, self.split_test]
    }

    pub fn binning(&self) -> BinningConfig {
        BinningConfig {
            lab_bins: self.lab_bins,
            age_bins: self.age_bins,
        }
    }

    pub fn model(&self, vocab_size: usize) -> ModelConfig {
        ModelConfig {
            n_layer: self.n_layer,
            n_head: self.n_head,
            n_embd: self.n_embd,
            vocab_size,
            block_size: self.block_size,
            rotary_base: self.rotary_base,
            bias: self.bias,
            dropout: self.dropout,
        }
    }

    pub fn loss(&self) -> LossConfig {
        LossConfig {
            decay: self.temporal_decay,
            w_min: self.w_min,
            eps: self.prob_eps,
        }
    }

    pub fn opt(&self) -> Result<OptConfig, ConfigError> {
        let decay_shape = match self.decay_shape.as_str() {
            "cosine" => DecayShape::Cosine,
            "linear" => DecayShape::Linear,
            other => return Err(invalid(format!("unknown decay_shape {other:?}"))),
        };
        Ok(OptConfig {
            learning_rate: self.learning_rate,
            min_lr: self.min_lr,
            warmup_iters: self.warmup_iters,
            lr_decay_iters: self.lr_decay_iters,
            max_iters: self.max_iters,
            beta1: self.beta1,
            beta2: self.beta2,
            adam_eps: self.adam_eps,
            weight_decay: self.weight_decay,
            grad_clip: self.grad_clip,
            gradient_accumulation_steps: self.gradient_accumulation_steps,
            batch_size: self.batch_size,
            decay_lr: self.decay_lr,
            decay_shape,
        })
    }

    pub fn packing(&self) -> Result<PackingMode, ConfigError> {
        self.packing_mode.parse().map_err(invalid)
    }

    pub fn bootstrap(&self) -> BootstrapConfig {
        BootstrapConfig {
            n_resamples: self.bootstrap_resamples,
            seed: self.seed,
            ..BootstrapConfig::default()
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn defaults_validate_and_echo_round_trips() {
        let cfg = RunConfig::default();
        cfg.validate().unwrap();
        let back = RunConfig::from_toml_str(&cfg.echo()).unwrap();
        assert_eq!(back, cfg);
        assert_eq!(back.echo(), cfg.echo());
        assert_eq!(back.hash(), cfg.hash());
        assert_eq!(cfg.hash().len(), 64);
    }

    #[test]
    fn partial_file_fills_defaults() {
        let cfg = RunConfig::from_toml_str("seed = 3\nn_embd = 64\n").unwrap();
        assert_eq!(cfg.seed, 3);
        assert_eq!(cfg.n_embd, 64);
        assert_eq!(cfg.n_layer, RunConfig::default().n_layer);
        assert_ne!(cfg.hash(), RunConfig::default().hash());
    }

    #[test]
    fn bad_values_rejected() {
        assert!(matches!(RunConfig::from_toml_str("unknown_key = 1"), Err(ConfigError::Parse(_))));
        assert!(RunConfig::from_toml_str("temporal_decay = 1.5").is_err());
        assert!(RunConfig::from_toml_str("packing_mode = \"diagonal\"").is_err());
        assert!(RunConfig::from_toml_str("planted_rules = [\"dx:A -> dx:B lag=0 p=1\"]").is_err());
        assert!(RunConfig::from_toml_str("split_train = 0.9").is_err());
        assert!(RunConfig::from_toml_str("horizons_days = [300]").is_err());
    }
}

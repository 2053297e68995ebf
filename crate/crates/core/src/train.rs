//! Training loop: seeded per-epoch shuffling and packing, gradient
//! accumulation, clipping, scheduled AdamW, periodic validation and
//! checkpointing.

use std::io::Write;
use std::path::{Path, PathBuf};

use log::info;
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use thiserror::Error;

use crate::loss_opt::{adamw_step, clip_gradients, lr_at, LossConfig, OptConfig, OptError, OptState, ParamGroup};
use crate::model::{
    accumulate_loss_and_grads, save_checkpoint, Checkpoint, CheckpointError, ModelConfig, ModelError, ModelParams,
};
use crate::sequence::{pack_sequences, prepare_training_sequences, PackStats, PackedBatch, PackingMode, SequenceError, TrainingSequence};
use crate::tokenizer::TokenizedTrajectory;

#[derive(Debug, Error)]
pub enum TrainError {
    #[error("non-finite loss or gradient at step {step}: {detail}")]
    NonFinite { step: u64, detail: String },
    #[error("training data: {0}")]
    Data(String),
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Opt(#[from] OptError),
    #[error(transparent)]
    Sequence(#[from] SequenceError),
    #[error(transparent)]
    Checkpoint(#[from] CheckpointError),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainSettings {
    pub model: ModelConfig,
    pub opt: OptConfig,
    pub loss: LossConfig,
    pub packing: PackingMode,
    pub eval_interval: u64,
    /// Validation rows used for the periodic loss; 0 means all.
    pub eval_rows: usize,
    pub seed: u64,
}

#[derive(Debug, Clone)]
pub struct TrainData {
    pub train: Vec<TrainingSequence>,
    pub val: Vec<PackedBatch>,
    pub stats: PackStats,
}

impl TrainData {
    pub fn prepare(
        train: &[TokenizedTrajectory],
        val: &[TokenizedTrajectory],
        settings: &TrainSettings,
    ) -> Result<Self, TrainError> {
        let block = settings.model.block_size;
        let (train, stats) = prepare_training_sequences(train, settings.loss.decay, settings.loss.w_min, block)?;
        if train.is_empty() {
            return Err(TrainError::Data("no trainable sequences".into()));
        }
        let (val_items, _) = prepare_training_sequences(val, settings.loss.decay, settings.loss.w_min, block)?;
        let val = pack_sequences(&val_items, block, settings.packing)?;
        Ok(Self { train, val, stats })
    }
}

/// Endless stream of packed rows. Epoch `e` shuffles the items with a
/// generator derived from `(seed, e)` and packs them first-fit, so any
/// position in the stream can be reproduced from the seed alone.
#[derive(Debug, Clone)]
struct RowStream {
    seed: u64,
    block_size: usize,
    mode: PackingMode,
    epoch: u64,
    rows: Vec<PackedBatch>,
    pos: usize,
}

impl RowStream {
    fn new(seed: u64, block_size: usize, mode: PackingMode) -> Self {
        Self {
            seed,
            block_size,
            mode,
            epoch: 0,
            rows: Vec::new(),
            pos: 0,
        }
    }

    fn next(&mut self, items: &[TrainingSequence]) -> Result<PackedBatch, TrainError> {
        if self.pos >= self.rows.len() {
            if !self.rows.is_empty() {
                self.epoch += 1;
            }
            let mut rng = ChaCha8Rng::seed_from_u64(self.seed);
            rng.set_stream(self.epoch);
            let mut order: Vec<&TrainingSequence> = items.iter().collect();
            order.shuffle(&mut rng);
            let shuffled: Vec<TrainingSequence> = order.into_iter().cloned().collect();
            self.rows = pack_sequences(&shuffled, self.block_size, self.mode)?;
            self.pos = 0;
        }
        self.pos += 1;
        Ok(self.rows[self.pos - 1].clone())
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct StepStats {
    /// Number of updates completed, including this one.
    pub step: u64,
    pub lr: f64,
    pub loss: f64,
    pub grad_norm: f64,
}

pub struct Trainer {
    settings: TrainSettings,
    data: TrainData,
    params: ModelParams,
    state: OptState,
    groups: Vec<ParamGroup>,
    step: u64,
    stream: RowStream,
}

impl Trainer {
    pub fn new(settings: TrainSettings, data: TrainData) -> Result<Self, TrainError> {
        settings.opt.validate()?;
        let params = ModelParams::init(&settings.model, settings.seed)?;
        Ok(Self::assemble(settings, data, params, None, 0))
    }

    /// Continues from a checkpoint; the data stream is replayed up to the
    /// checkpoint's step.
    pub fn resume(settings: TrainSettings, data: TrainData, ckpt: Checkpoint) -> Result<Self, TrainError> {
        settings.opt.validate()?;
        if ckpt.params.config != settings.model {
            return Err(TrainError::Data("checkpoint model configuration differs from the settings".into()));
        }
        let mut t = Self::assemble(settings, data, ckpt.params, ckpt.optimizer, ckpt.step);
        for _ in 0..t.step * t.rows_per_step() as u64 {
            t.stream.next(&t.data.train)?;
        }
        Ok(t)
    }

    fn assemble(settings: TrainSettings, data: TrainData, params: ModelParams, state: Option<OptState>, step: u64) -> Self {
        let state = state.unwrap_or_else(|| OptState::new(params.num_params()));
        let groups = params.layout.param_groups();
        let stream = RowStream::new(settings.seed, settings.model.block_size, settings.packing);
        Self {
            settings,
            data,
            params,
            state,
            groups,
            step,
            stream,
        }
    }

    fn rows_per_step(&self) -> usize {
        self.settings.opt.batch_size * self.settings.opt.gradient_accumulation_steps
    }

    pub fn params(&self) -> &ModelParams {
        &self.params
    }

    pub fn into_params(self) -> ModelParams {
        self.params
    }

    pub fn step_count(&self) -> u64 {
        self.step
    }

    pub fn settings(&self) -> &TrainSettings {
        &self.settings
    }

    /// One optimizer update over `batch_size * gradient_accumulation_steps`
    /// rows; the loss and gradient are means over all separator slots.
    pub fn train_step(&mut self) -> Result<StepStats, TrainError> {
        let step = self.step;
        let mut grads = self.params.zeros_like();
        let mut dropout = ChaCha8Rng::seed_from_u64(self.settings.seed ^ 0x5eed_d40f);
        dropout.set_stream(step);
        let use_dropout = self.settings.model.dropout > 0.0;
        let (mut loss_sum, mut slots) = (0.0, 0usize);
        for _ in 0..self.rows_per_step() {
            let row = self.stream.next(&self.data.train)?;
            let rng = use_dropout.then_some(&mut dropout);
            let (l, n) = accumulate_loss_and_grads(&self.params, &row, &self.settings.loss, &mut grads, rng)
                .map_err(|e| match e {
                    ModelError::NonFinite { stage } => TrainError::NonFinite { step, detail: stage },
                    other => TrainError::Model(other),
                })?;
            loss_sum += l;
            slots += n;
        }
        if slots == 0 {
            return Err(TrainError::Data(format!("step {step} drew no separator slots")));
        }
        let inv = 1.0 / slots as f64;
        grads.iter_mut().for_each(|g| *g *= inv);
        let loss = loss_sum * inv;
        let grad_norm = if self.settings.opt.grad_clip > 0.0 {
            clip_gradients(&mut grads, self.settings.opt.grad_clip)
        } else {
            crate::loss_opt::global_norm(&grads)
        };
        if !loss.is_finite() || !grad_norm.is_finite() {
            return Err(TrainError::NonFinite {
                step,
                detail: format!("loss {loss}, gradient norm {grad_norm}"),
            });
        }
        let lr = lr_at(step, &self.settings.opt);
        adamw_step(&mut self.params.data, &grads, &self.groups, &mut self.state, &self.settings.opt, lr).map_err(|e| match e {
            OptError::NonFiniteGradient { group, .. } => TrainError::NonFinite { step, detail: group },
            other => TrainError::Opt(other),
        })?;
        self.step += 1;
        Ok(StepStats {
            step: self.step,
            lr,
            loss,
            grad_norm,
        })
    }

    /// Mean weighted loss over validation separator slots, dropout off.
    pub fn val_loss(&self) -> Result<Option<f64>, TrainError> {
        let rows = match self.settings.eval_rows {
            0 => &self.data.val[..],
            n => &self.data.val[..n.min(self.data.val.len())],
        };
        let mut scratch = self.params.zeros_like();
        let (mut sum, mut slots) = (0.0, 0usize);
        for row in rows {
            scratch.fill(0.0);
            let (l, n) = accumulate_loss_and_grads(&self.params, row, &self.settings.loss, &mut scratch, None)?;
            sum += l;
            slots += n;
        }
        Ok((slots > 0).then(|| sum / slots as f64))
    }

    pub fn checkpoint(&self, config_hash: &str, run_config: &str) -> Checkpoint {
        Checkpoint {
            params: self.params.clone(),
            step: self.step,
            optimizer: Some(self.state.clone()),
            config_hash: config_hash.into(),
            run_config: run_config.into(),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LogRow {
    pub step: u64,
    pub lr: Option<f64>,
    pub train_loss: Option<f64>,
    pub val_loss: Option<f64>,
}

/// Where checkpoints go during [`run_training`].
#[derive(Debug, Clone)]
pub struct CheckpointSink {
    pub dir: PathBuf,
    pub config_hash: String,
    pub run_config: String,
}

impl CheckpointSink {
    pub fn path(&self, name: &str) -> PathBuf {
        self.dir.join(format!("{name}.ckpt"))
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainReport {
    pub log: Vec<LogRow>,
    pub best: Option<(u64, f64)>,
}

fn fmt_opt(x: Option<f64>) -> String {
    x.map_or(String::new(), |v| format!("{v:.8}"))
}

pub fn write_train_log_header<W: Write>(config_hash: &str, mut out: W) -> std::io::Result<()> {
    writeln!(out, "# config_hash={config_hash}")?;
    writeln!(out, "step\tlr\ttrain_loss\tval_loss")
}

pub fn write_train_log_rows<W: Write>(log: &[LogRow], mut out: W) -> std::io::Result<()> {
    for r in log {
        let lr = r.lr.map_or(String::new(), |v| format!("{v:e}"));
        writeln!(out, "{}\t{}\t{}\t{}", r.step, lr, fmt_opt(r.train_loss), fmt_opt(r.val_loss))?;
    }
    Ok(())
}

/// Trains until `max_iters` updates, validating every `eval_interval` steps
/// and at the end. With a sink, `best`, `last` (at each validation) and
/// `final` checkpoints are written; after a numeric failure the earlier
/// checkpoints are left untouched.
pub fn run_training(trainer: &mut Trainer, sink: Option<&CheckpointSink>) -> Result<TrainReport, TrainError> {
    let max_iters = trainer.settings.opt.max_iters;
    let interval = trainer.settings.eval_interval.max(1);
    let mut log = Vec::new();
    let mut best: Option<(u64, f64)> = None;
    let save = |t: &Trainer, name: &str| -> Result<(), TrainError> {
        if let Some(s) = sink {
            save_checkpoint(&s.path(name), &t.checkpoint(&s.config_hash, &s.run_config))?;
        }
        Ok(())
    };
    if trainer.step == 0 {
        let val = trainer.val_loss()?;
        log.push(LogRow {
            step: 0,
            lr: None,
            train_loss: None,
            val_loss: val,
        });
    }
    while trainer.step < max_iters {
        let s = trainer.train_step()?;
        let mut row = LogRow {
            step: s.step,
            lr: Some(s.lr),
            train_loss: Some(s.loss),
            val_loss: None,
        };
        if s.step % interval == 0 || s.step == max_iters {
            row.val_loss = trainer.val_loss()?;
            info!("step {} lr {:.3e} train {:.5} val {}", s.step, s.lr, s.loss, fmt_opt(row.val_loss));
            if let Some(v) = row.val_loss {
                if best.is_none_or(|(_, b)| v < b) {
                    best = Some((s.step, v));
                    save(trainer, "best")?;
                }
            }
            save(trainer, "last")?;
        }
        log.push(row);
    }
    save(trainer, "final")?;
    Ok(TrainReport { log, best })
}

pub fn default_sink(dir: &Path, config_hash: &str, run_config: &str) -> CheckpointSink {
    CheckpointSink {
        dir: dir.to_path_buf(),
        config_hash: config_hash.into(),
        run_config: run_config.into(),
    }
}

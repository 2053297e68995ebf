//! End-to-end commands over a run directory. Each command reads the artifacts
//! of the previous ones and writes its own, all tagged with the config hash.
//!
//! ```text
//! OUT/config.toml                 resolved configuration
//! OUT/cohort/{train,val,test}.jsonl
//! OUT/label_sets.tsv
//! OUT/vocab.txt
//! OUT/train/{train_log.tsv,best.ckpt,last.ckpt,final.ckpt}
//! OUT/eval_pretrain/metrics.jsonl
//! OUT/zeroshot/{metrics.jsonl,pr_<h>d.tsv}
//! OUT/sweep/{sweep_summary.tsv,delta_<d>/...}
//! ```

use std::collections::HashMap;
use std::fs::{self, File};
use std::io::{BufReader, BufWriter, Write};
use std::path::{Path, PathBuf};

use log::{info, warn};
use thiserror::Error;

use crate::cohort::{generate_cohort, split_cohort, Cohort, CohortError, EventKind};
use crate::config::{ConfigError, RunConfig};
use crate::eval::{
    auprc, auroc, bootstrap_ci, condition_seps, curate_zero_shot_windows, find_label_set, next_visit_precision_recall,
    on_time_rate, pr_curve, read_label_sets, rolling_predictions, score_windows, select_threshold, write_label_sets,
    ConditionLabelSet, CurationCounts, EvalError, LabelCode, MetricRecord, OnTimeStats, PrecisionRecall,
    ResolvedLabelSet,
};
use crate::model::{load_checkpoint, CheckpointError, ModelError, ModelParams};
use crate::sequence::{pack_sequences, prepare_training_sequences};
use crate::tokenizer::{build_vocabulary, tokenize_cohort, TokenizedTrajectory, TokenizerError, Vocabulary};
use crate::train::{default_sink, run_training, write_train_log_header, write_train_log_rows, TrainData, TrainError, TrainReport, TrainSettings, Trainer};

#[derive(Debug, Error)]
pub enum PipelineError {
    #[error("config error: {0}")]
    Config(String),
    #[error("data error: {0}")]
    Data(String),
    #[error("numeric failure: {0}")]
    Numeric(String),
}

impl PipelineError {
    /// Process exit status for this failure.
    pub fn exit_code(&self) -> i32 {
        match self {
            PipelineError::Config(_) => 2,
            PipelineError::Data(_) => 3,
            PipelineError::Numeric(_) => 4,
        }
    }
}

impl From<ConfigError> for PipelineError {
    fn from(e: ConfigError) -> Self {
        PipelineError::Config(e.to_string())
    }
}

impl From<CohortError> for PipelineError {
    fn from(e: CohortError) -> Self {
        match e {
            CohortError::Config(_) | CohortError::Fractions(_) => PipelineError::Config(e.to_string()),
            _ => PipelineError::Data(e.to_string()),
        }
    }
}

impl From<TokenizerError> for PipelineError {
    fn from(e: TokenizerError) -> Self {
        match e {
            TokenizerError::TooFewBins(_) => PipelineError::Config(e.to_string()),
            _ => PipelineError::Data(e.to_string()),
        }
    }
}

impl From<ModelError> for PipelineError {
    fn from(e: ModelError) -> Self {
        match e {
            ModelError::NonFinite { .. } => PipelineError::Numeric(e.to_string()),
            ModelError::Config(_) => PipelineError::Config(e.to_string()),
            _ => PipelineError::Data(e.to_string()),
        }
    }
}

impl From<TrainError> for PipelineError {
    fn from(e: TrainError) -> Self {
        match e {
            TrainError::NonFinite { .. } => PipelineError::Numeric(e.to_string()),
            TrainError::Model(m) => m.into(),
            TrainError::Opt(_) => PipelineError::Config(e.to_string()),
            _ => PipelineError::Data(e.to_string()),
        }
    }
}

impl From<EvalError> for PipelineError {
    fn from(e: EvalError) -> Self {
        match e {
            EvalError::Model(m) => m.into(),
            EvalError::Config(_) => PipelineError::Config(e.to_string()),
            _ => PipelineError::Data(e.to_string()),
        }
    }
}

impl From<CheckpointError> for PipelineError {
    fn from(e: CheckpointError) -> Self {
        PipelineError::Data(e.to_string())
    }
}

impl From<std::io::Error> for PipelineError {
    fn from(e: std::io::Error) -> Self {
        PipelineError::Data(e.to_string())
    }
}

/// File locations inside a run directory.
#[derive(Debug, Clone)]
pub struct RunPaths {
    pub out: PathBuf,
}

impl RunPaths {
    pub fn new(out: impl Into<PathBuf>) -> Self {
        Self { out: out.into() }
    }

    pub fn config(&self) -> PathBuf {
        self.out.join("config.toml")
    }

    pub fn split(&self, name: &str) -> PathBuf {
        self.out.join("cohort").join(format!("{name}.jsonl"))
    }

    pub fn label_sets(&self) -> PathBuf {
        self.out.join("label_sets.tsv")
    }

    pub fn vocab(&self) -> PathBuf {
        self.out.join("vocab.txt")
    }

    pub fn train_dir(&self) -> PathBuf {
        self.out.join("train")
    }

    pub fn checkpoint(&self, name: &str) -> PathBuf {
        self.train_dir().join(format!("{name}.ckpt"))
    }

    pub fn eval_pretrain_dir(&self) -> PathBuf {
        self.out.join("eval_pretrain")
    }

    pub fn zeroshot_dir(&self) -> PathBuf {
        self.out.join("zeroshot")
    }

    pub fn sweep_dir(&self) -> PathBuf {
        self.out.join("sweep")
    }
}

fn open_artifact(path: &Path, producer: &str) -> Result<BufReader<File>, PipelineError> {
    File::open(path)
        .map(BufReader::new)
        .map_err(|e| PipelineError::Data(format!("missing artifact {} ({e}); run `{producer}` first", path.display())))
}

fn create(path: &Path) -> Result<BufWriter<File>, PipelineError> {
    if let Some(dir) = path.parent() {
        fs::create_dir_all(dir)?;
    }
    Ok(BufWriter::new(File::create(path)?))
}

fn write_echo(cfg: &RunConfig, paths: &RunPaths) -> Result<(), PipelineError> {
    let mut w = create(&paths.config())?;
    writeln!(w, "# config_hash = \"{}\"", cfg.hash())?;
    w.write_all(cfg.echo().as_bytes())?;
    w.flush()?;
    Ok(())
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct GenSummary {
    pub train: usize,
    pub val: usize,
    pub test: usize,
    pub label_sets: usize,
}

/// Label sets for the planted conditions: one set per distinct rule effect,
/// named after the effect code.
pub fn planted_label_sets(cfg: &RunConfig) -> Result<Vec<ConditionLabelSet>, PipelineError> {
    let cohort = cfg.cohort()?;
    let mut sets: Vec<ConditionLabelSet> = Vec::new();
    for rule in &cohort.planted_rules {
        if sets.iter().any(|s| s.name == rule.effect.code) {
            continue;
        }
        let code = LabelCode {
            kind: rule.effect.kind,
            code: rule.effect.code.clone(),
            description: format!("planted effect of {rule}"),
        };
        if !matches!(code.kind, EventKind::DiagnosisCode | EventKind::MedicationCode) {
            warn!("rule {rule}: effect is neither a diagnosis nor a medication; no label set written");
            continue;
        }
        sets.push(ConditionLabelSet::new(rule.effect.code.clone(), vec![code])?);
    }
    Ok(sets)
}

pub fn cmd_gen(cfg: &RunConfig, paths: &RunPaths) -> Result<GenSummary, PipelineError> {
    cfg.validate()?;
    let cohort = generate_cohort(&cfg.cohort()?)?;
    let split = split_cohort(&cohort, cfg.split_fractions(), cfg.seed)?;
    for (name, part) in [("train", &split.train), ("val", &split.val), ("test", &split.test)] {
        let mut w = create(&paths.split(name))?;
        part.write_jsonl(&mut w)?;
        w.flush()?;
    }
    let sets = planted_label_sets(cfg)?;
    let mut w = create(&paths.label_sets())?;
    write_label_sets(&sets, &mut w)?;
    w.flush()?;
    write_echo(cfg, paths)?;
    info!("cohort: {} train, {} val, {} test", split.train.len(), split.val.len(), split.test.len());
    Ok(GenSummary {
        train: split.train.len(),
        val: split.val.len(),
        test: split.test.len(),
        label_sets: sets.len(),
    })
}

pub fn read_split(paths: &RunPaths, name: &str) -> Result<Cohort, PipelineError> {
    Ok(Cohort::read_jsonl(open_artifact(&paths.split(name), "nextvisit gen")?)?)
}

pub fn cmd_vocab(cfg: &RunConfig, paths: &RunPaths) -> Result<Vocabulary, PipelineError> {
    cfg.validate()?;
    let train = read_split(paths, "train")?;
    let vocab = build_vocabulary(&train.patients, cfg.binning())?;
    let mut w = create(&paths.vocab())?;
    vocab.write_text(&mut w)?;
    w.flush()?;
    info!("vocabulary: {} tokens", vocab.len());
    Ok(vocab)
}

pub fn read_vocab(paths: &RunPaths) -> Result<Vocabulary, PipelineError> {
    Ok(Vocabulary::read_text(open_artifact(&paths.vocab(), "nextvisit vocab")?)?)
}

pub fn tokenized_split(paths: &RunPaths, name: &str, vocab: &Vocabulary) -> Result<Vec<TokenizedTrajectory>, PipelineError> {
    let cohort = read_split(paths, name)?;
    let (trajs, stats) = tokenize_cohort(&cohort.patients, vocab)?;
    if stats.unknown_events > 0 || stats.excluded_trajectories > 0 {
        info!(
            "{name}: {} unknown events dropped, {} empty visits dropped, {} trajectories excluded",
            stats.unknown_events, stats.dropped_visits, stats.excluded_trajectories
        );
    }
    Ok(trajs)
}

pub fn train_settings(cfg: &RunConfig, vocab_size: usize) -> Result<TrainSettings, PipelineError> {
    Ok(TrainSettings {
        model: cfg.model(vocab_size),
        opt: cfg.opt()?,
        loss: cfg.loss(),
        packing: cfg.packing()?,
        eval_interval: cfg.eval_interval,
        eval_rows: cfg.eval_rows,
        seed: cfg.seed,
    })
}

/// Trains into `dir`, resuming from `dir/last.ckpt` when `resume` is set.
pub fn train_into(cfg: &RunConfig, paths: &RunPaths, dir: &Path, resume: bool) -> Result<TrainReport, PipelineError> {
    cfg.validate()?;
    let vocab = read_vocab(paths)?;
    let train = tokenized_split(paths, "train", &vocab)?;
    let val = tokenized_split(paths, "val", &vocab)?;
    let settings = train_settings(cfg, vocab.len())?;
    let data = TrainData::prepare(&train, &val, &settings)?;
    let hash = cfg.hash();
    let mut trainer = if resume {
        let ckpt = load_checkpoint(&dir.join("last.ckpt"))?;
        if ckpt.config_hash != hash {
            return Err(PipelineError::Config(format!(
                "checkpoint was written under config {}, current config is {hash}",
                ckpt.config_hash
            )));
        }
        Trainer::resume(settings, data, ckpt)?
    } else {
        Trainer::new(settings, data)?
    };
    fs::create_dir_all(dir)?;
    let sink = default_sink(dir, &hash, &cfg.echo());
    let report = run_training(&mut trainer, Some(&sink))?;
    let log_path = dir.join("train_log.tsv");
    let mut w = if resume && log_path.exists() {
        BufWriter::new(fs::OpenOptions::new().append(true).open(&log_path)?)
    } else {
        let mut w = create(&log_path)?;
        write_train_log_header(&hash, &mut w)?;
        w
    };
    write_train_log_rows(&report.log, &mut w)?;
    w.flush()?;
    Ok(report)
}

pub fn cmd_train(cfg: &RunConfig, paths: &RunPaths, resume: bool) -> Result<TrainReport, PipelineError> {
    write_echo(cfg, paths)?;
    train_into(cfg, paths, &paths.train_dir(), resume)
}

pub fn load_params(path: &Path, cfg: &RunConfig) -> Result<ModelParams, PipelineError> {
    if !path.exists() {
        return Err(PipelineError::Data(format!("missing checkpoint {}; run `nextvisit train` first", path.display())));
    }
    let ckpt = load_checkpoint(path)?;
    if ckpt.config_hash != cfg.hash() {
        warn!("checkpoint {} was written under config {}", path.display(), ckpt.config_hash);
    }
    Ok(ckpt.params)
}

pub fn resolve_condition(cfg: &RunConfig, paths: &RunPaths, vocab: &Vocabulary) -> Result<ResolvedLabelSet, PipelineError> {
    let file = if cfg.label_file.is_empty() {
        paths.label_sets()
    } else {
        PathBuf::from(&cfg.label_file)
    };
    let sets = read_label_sets(open_artifact(&file, "nextvisit gen")?)?;
    let set = find_label_set(&sets, &cfg.condition)?;
    Ok(set.resolve(vocab)?)
}

#[derive(Debug, Clone, PartialEq)]
pub struct PretrainEval {
    pub threshold: f64,
    pub test: PrecisionRecall,
    pub on_time: OnTimeStats,
    pub n_test_seps: usize,
    pub n_test_patients: usize,
}

/// Threshold from validation, then strict next-visit precision/recall and
/// on-time rate on the test split.
pub fn evaluate_pretrain(
    params: &ModelParams,
    val: &[TokenizedTrajectory],
    test: &[TokenizedTrajectory],
    label: &ResolvedLabelSet,
) -> Result<PretrainEval, PipelineError> {
    let val_seps = condition_seps(&rolling_predictions(params, val)?, label, val);
    let scores: Vec<f64> = val_seps.iter().map(|s| s.score).collect();
    let positives: Vec<bool> = val_seps.iter().map(|s| s.positive).collect();
    let threshold = select_threshold(&scores, &positives)?;
    let test_seps = condition_seps(&rolling_predictions(params, test)?, label, test);
    Ok(PretrainEval {
        threshold,
        test: next_visit_precision_recall(&test_seps, threshold),
        on_time: on_time_rate(&test_seps, threshold),
        n_test_seps: test_seps.len(),
        n_test_patients: test.len(),
    })
}

fn record(metric: &str, value: Option<f64>, n: usize, hash: &str) -> MetricRecord {
    MetricRecord {
        metric: metric.into(),
        value,
        ci_lo: None,
        ci_hi: None,
        n,
        config_hash: hash.into(),
    }
}

pub fn write_metrics(path: &Path, records: &[MetricRecord]) -> Result<(), PipelineError> {
    let mut w = create(path)?;
    for r in records {
        serde_json::to_writer(&mut w, r).map_err(|e| PipelineError::Data(e.to_string()))?;
        writeln!(w)?;
    }
    w.flush()?;
    Ok(())
}

pub fn pretrain_records(e: &PretrainEval, hash: &str) -> Vec<MetricRecord> {
    let flagged = e.test.tp + e.test.fp;
    vec![
        record("threshold", Some(e.threshold), e.n_test_seps, hash),
        record("precision", e.test.precision, flagged, hash),
        record("recall", e.test.recall, e.test.tp + e.test.fn_, hash),
        record("on_time_rate", e.on_time.rate, e.on_time.tp_total, hash),
        record("tp_total", Some(e.on_time.tp_total as f64), e.n_test_patients, hash),
        record("tp_on_time", Some(e.on_time.tp_on_time as f64), e.n_test_patients, hash),
    ]
}

pub fn cmd_eval_pretrain(cfg: &RunConfig, paths: &RunPaths, checkpoint: Option<&Path>) -> Result<PretrainEval, PipelineError> {
    cfg.validate()?;
    let vocab = read_vocab(paths)?;
    let label = resolve_condition(cfg, paths, &vocab)?;
    let ckpt = checkpoint.map_or_else(|| paths.checkpoint("final"), Path::to_path_buf);
    let params = load_params(&ckpt, cfg)?;
    let val = tokenized_split(paths, "val", &vocab)?;
    let test = tokenized_split(paths, "test", &vocab)?;
    let e = evaluate_pretrain(&params, &val, &test, &label)?;
    if e.on_time.tp_total < 10 {
        warn!("only {} true-positive patients; on-time rate is unreliable", e.on_time.tp_total);
    }
    write_metrics(&paths.eval_pretrain_dir().join("metrics.jsonl"), &pretrain_records(&e, &cfg.hash()))?;
    Ok(e)
}

#[derive(Debug, Clone, PartialEq)]
pub struct SweepRow {
    pub delta: f64,
    pub eval: PretrainEval,
}

pub fn write_sweep_summary<W: Write>(rows: &[SweepRow], hash: &str, mut out: W) -> std::io::Result<()> {
    let f = |x: Option<f64>| x.map_or("NA".to_string(), |v| format!("{v:.6}"));
    writeln!(out, "# config_hash={hash}")?;
    writeln!(out, "delta\tprecision\trecall\ton_time_rate\tthreshold\ttp_total\ttp_on_time")?;
    for r in rows {
        writeln!(
            out,
            "{}\t{}\t{}\t{}\t{:.6}\t{}\t{}",
            r.delta,
            f(r.eval.test.precision),
            f(r.eval.test.recall),
            f(r.eval.on_time.rate),
            r.eval.threshold,
            r.eval.on_time.tp_total,
            r.eval.on_time.tp_on_time
        )?;
    }
    Ok(())
}

/// One model per decay value on the same data and seed, each evaluated with
/// the next-visit protocol.
pub fn cmd_sweep_delta(cfg: &RunConfig, paths: &RunPaths) -> Result<Vec<SweepRow>, PipelineError> {
    cfg.validate()?;
    if cfg.sweep_deltas.is_empty() {
        return Err(PipelineError::Config("sweep_deltas is empty".into()));
    }
    let vocab = read_vocab(paths)?;
    let label = resolve_condition(cfg, paths, &vocab)?;
    let val = tokenized_split(paths, "val", &vocab)?;
    let test = tokenized_split(paths, "test", &vocab)?;
    let mut rows = Vec::new();
    for &delta in &cfg.sweep_deltas {
        let run = RunConfig {
            temporal_decay: delta,
            ..cfg.clone()
        };
        let dir = paths.sweep_dir().join(format!("delta_{delta}"));
        train_into(&run, paths, &dir, false)?;
        let params = load_params(&dir.join("final.ckpt"), &run)?;
        let eval = evaluate_pretrain(&params, &val, &test, &label)?;
        write_metrics(&dir.join("metrics.jsonl"), &pretrain_records(&eval, &run.hash()))?;
        info!("delta {delta}: on-time rate {:?}", eval.on_time.rate);
        rows.push(SweepRow { delta, eval });
    }
    let mut w = create(&paths.sweep_dir().join("sweep_summary.tsv"))?;
    write_sweep_summary(&rows, &cfg.hash(), &mut w)?;
    w.flush()?;
    Ok(rows)
}

#[derive(Debug, Clone, PartialEq)]
pub struct HorizonResult {
    pub horizon_days: u32,
    pub counts: CurationCounts,
    pub n_positive: usize,
    pub auroc: f64,
    pub auroc_ci: (f64, f64),
    pub auprc: f64,
    pub auprc_ci: (f64, f64),
}

/// Curates, scores and summarizes zero-shot windows for one horizon. Returns
/// the result together with the scored windows' `(score, label)` pairs.
pub fn evaluate_horizon(
    params: &ModelParams,
    test: &[TokenizedTrajectory],
    label: &ResolvedLabelSet,
    horizon_days: u32,
    grid: usize,
    bootstrap: &crate::eval::BootstrapConfig,
) -> Result<(HorizonResult, Vec<(f64, bool)>), PipelineError> {
    let (mut windows, counts) = curate_zero_shot_windows(test, label, horizon_days)?;
    if windows.is_empty() {
        return Err(PipelineError::Data(format!(
            "no zero-shot windows for horizon {horizon_days}d: {} candidates, {} excluded by history, {} by onset within a year, {} by follow-up",
            counts.candidates, counts.excluded_history, counts.excluded_1y, counts.excluded_followup
        )));
    }
    score_windows(params, &mut windows, label, grid)?;
    let mut patient_index: HashMap<&str, usize> = HashMap::new();
    let groups: Vec<usize> = windows
        .iter()
        .map(|w| {
            let next = patient_index.len();
            *patient_index.entry(w.patient_id.as_str()).or_insert(next)
        })
        .collect();
    let scores: Vec<f64> = windows.iter().map(|w| w.score).collect();
    let labels: Vec<bool> = windows.iter().map(|w| w.label).collect();
    let result = HorizonResult {
        horizon_days,
        counts,
        n_positive: labels.iter().filter(|&&l| l).count(),
        auroc: auroc(&scores, &labels)?,
        auroc_ci: bootstrap_ci(&scores, &labels, &groups, auroc, bootstrap)?,
        auprc: auprc(&scores, &labels)?,
        auprc_ci: bootstrap_ci(&scores, &labels, &groups, auprc, bootstrap)?,
    };
    Ok((result, scores.into_iter().zip(labels).collect()))
}

pub fn cmd_eval_zeroshot(cfg: &RunConfig, paths: &RunPaths, checkpoint: Option<&Path>) -> Result<Vec<HorizonResult>, PipelineError> {
    cfg.validate()?;
    let vocab = read_vocab(paths)?;
    let label = resolve_condition(cfg, paths, &vocab)?;
    let ckpt = checkpoint.map_or_else(|| paths.checkpoint("final"), Path::to_path_buf);
    let params = load_params(&ckpt, cfg)?;
    let test = tokenized_split(paths, "test", &vocab)?;
    let hash = cfg.hash();
    let dir = paths.zeroshot_dir();
    let mut records = Vec::new();
    let mut results = Vec::new();
    for &h in &cfg.horizons_days {
        let (r, scored) = evaluate_horizon(&params, &test, &label, h, cfg.query_grid_size, &cfg.bootstrap())?;
        let n = r.counts.included;
        let tag = format!("{h}d");
        records.push(MetricRecord {
            metric: format!("auroc_{tag}"),
            value: Some(r.auroc),
            ci_lo: Some(r.auroc_ci.0),
            ci_hi: Some(r.auroc_ci.1),
            n,
            config_hash: hash.clone(),
        });
        records.push(MetricRecord {
            metric: format!("auprc_{tag}"),
            value: Some(r.auprc),
            ci_lo: Some(r.auprc_ci.0),
            ci_hi: Some(r.auprc_ci.1),
            n,
            config_hash: hash.clone(),
        });
        let c = r.counts;
        for (name, v) in [
            ("candidates", c.candidates),
            ("included", c.included),
            ("excluded_history", c.excluded_history),
            ("excluded_1y", c.excluded_1y),
            ("excluded_followup", c.excluded_followup),
            ("positives", r.n_positive),
        ] {
            records.push(record(&format!("{name}_{tag}"), Some(v as f64), n, &hash));
        }
        let (scores, labels): (Vec<f64>, Vec<bool>) = scored.into_iter().unzip();
        let mut w = create(&dir.join(format!("pr_{tag}.tsv")))?;
        writeln!(w, "# config_hash={hash}")?;
        writeln!(w, "threshold\tprecision\trecall")?;
        for p in pr_curve(&scores, &labels)? {
            writeln!(w, "{}\t{}\t{}", p.threshold, p.precision, p.recall)?;
        }
        w.flush()?;
        info!("horizon {tag}: AUROC {:.3} ({:.3}, {:.3})", r.auroc, r.auroc_ci.0, r.auroc_ci.1);
        results.push(r);
    }
    write_metrics(&dir.join("metrics.jsonl"), &records)?;
    Ok(results)
}

/// Attention mask of the first packed validation row, as a 0/1 grid.
pub fn dump_mask(cfg: &RunConfig, paths: &RunPaths, max_tokens: usize) -> Result<String, PipelineError> {
    cfg.validate()?;
    let vocab = read_vocab(paths)?;
    let val = tokenized_split(paths, "val", &vocab)?;
    let (items, _) = prepare_training_sequences(&val, cfg.temporal_decay, cfg.w_min, cfg.block_size)
        .map_err(|e| PipelineError::Data(e.to_string()))?;
    let rows = pack_sequences(&items, cfg.block_size, cfg.packing()?).map_err(|e| PipelineError::Data(e.to_string()))?;
    let row = rows.first().ok_or_else(|| PipelineError::Data("validation split has no sequences".into()))?;
    let n = row.seq.real_len().min(max_tokens);
    Ok(row.attention_mask().truncated(n).to_grid_text())
}

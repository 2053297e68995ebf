//! Next-visit evaluation (threshold, strict precision/recall, on-time rate)
//! and zero-shot risk forecasting (window curation, scoring, ranking metrics
//! with bootstrap intervals).

pub mod labels;
mod metrics;
mod pretrain;
mod zeroshot;

pub use labels::{find_label_set, read_label_sets, write_label_sets, ConditionLabelSet, LabelCode, ResolvedLabelSet};
pub use metrics::{auprc, auroc, bootstrap_ci, percentile, pr_curve, BootstrapConfig, MetricRecord, PrPoint};
pub use pretrain::{
    condition_probability, condition_seps, next_visit_precision_recall, on_time_rate, rolling_predictions,
    select_threshold, ConditionSep, OnTimeStats, PrecisionRecall, SepPrediction,
};
pub use zeroshot::{
    condition_score, curate_zero_shot_windows, query_sequence, query_times, score_windows, CurationCounts,
    WindowExample, ONE_YEAR_DAYS,
};

use thiserror::Error;

use crate::model::ModelError;

#[derive(Debug, Error)]
pub enum EvalError {
    #[error("{scores} scores but {labels} labels")]
    Length { scores: usize, labels: usize },
    #[error("score is NaN")]
    NanScore,
    #[error("metric undefined: only one class present")]
    SingleClass,
    #[error("metric undefined: no positive targets")]
    NoPositives,
    #[error("label set {0:?} has no usable codes")]
    EmptyLabelSet(String),
    #[error("label file: {0}")]
    LabelFile(String),
    #[error("bootstrap gave up after {0} single-class redraws")]
    RetriesExhausted(usize),
    #[error("invalid evaluation setting: {0}")]
    Config(String),
    #[error("evaluation data: {0}")]
    Data(String),
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

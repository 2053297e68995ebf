use std::cmp::Ordering;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::EvalError;

fn class_counts(labels: &[bool]) -> (u64, u64) {
    let p = labels.iter().filter(|&&l| l).count() as u64;
    (p, labels.len() as u64 - p)
}

fn check_inputs(scores: &[f64], labels: &[bool]) -> Result<(), EvalError> {
    if scores.len() != labels.len() {
        return Err(EvalError::Length {
            scores: scores.len(),
            labels: labels.len(),
        });
    }
    if scores.iter().any(|s| s.is_nan()) {
        return Err(EvalError::NanScore);
    }
    Ok(())
}

/// Indices sorted by ascending score.
fn ascending(scores: &[f64]) -> Vec<usize> {
    let mut idx: Vec<usize> = (0..scores.len()).collect();
    idx.sort_by(|&a, &b| scores[a].partial_cmp(&scores[b]).unwrap_or(Ordering::Equal));
    idx
}

/// Mann-Whitney AUROC, `(2 * wins + ties) / (2 * P * N)`, from integer counts.
pub fn auroc(scores: &[f64], labels: &[bool]) -> Result<f64, EvalError> {
    check_inputs(scores, labels)?;
    let (p, n) = class_counts(labels);
    if p == 0 || n == 0 {
        return Err(EvalError::SingleClass);
    }
    let order = ascending(scores);
    let (mut wins, mut ties, mut neg_below) = (0u128, 0u128, 0u128);
    let mut i = 0;
    while i < order.len() {
        let mut j = i;
        let (mut gp, mut gn) = (0u128, 0u128);
        while j < order.len() && scores[order[j]] == scores[order[i]] {
            if labels[order[j]] {
                gp += 1;
            } else {
                gn += 1;
            }
            j += 1;
        }
        wins += gp * neg_below;
        ties += gp * gn;
        neg_below += gn;
        i = j;
    }
    Ok((2 * wins + ties) as f64 / (2 * p as u128 * n as u128) as f64)
}

/// Average precision: the mean over positives of the precision among all
/// items scoring at least as high as that positive.
pub fn auprc(scores: &[f64], labels: &[bool]) -> Result<f64, EvalError> {
    check_inputs(scores, labels)?;
    let (p, _) = class_counts(labels);
    if p == 0 {
        return Err(EvalError::NoPositives);
    }
    let mut sorted: Vec<(f64, bool)> = scores.iter().copied().zip(labels.iter().copied()).collect();
    sorted.sort_by(|a, b| a.0.partial_cmp(&b.0).unwrap_or(Ordering::Equal));
    // Suffix counts: items and positives at index >= i in ascending order.
    let n = sorted.len();
    let mut pos_from = vec![0u64; n + 1];
    for i in (0..n).rev() {
        pos_from[i] = pos_from[i + 1] + u64::from(sorted[i].1);
    }
    let mut total = 0.0;
    for (&s, &l) in scores.iter().zip(labels) {
        if !l {
            continue;
        }
        let first = sorted.partition_point(|x| x.0 < s);
        let at_least = (n - first) as f64;
        total += pos_from[first] as f64 / at_least;
    }
    Ok(total / p as f64)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PrPoint {
    pub threshold: f64,
    pub precision: f64,
    pub recall: f64,
}

/// Precision and recall when flagging `score >= threshold`, at every distinct
/// score in descending order.
pub fn pr_curve(scores: &[f64], labels: &[bool]) -> Result<Vec<PrPoint>, EvalError> {
    check_inputs(scores, labels)?;
    let (p, _) = class_counts(labels);
    if p == 0 {
        return Err(EvalError::NoPositives);
    }
    let mut order = ascending(scores);
    order.reverse();
    let mut out = Vec::new();
    let (mut tp, mut flagged) = (0u64, 0u64);
    let mut i = 0;
    while i < order.len() {
        let s = scores[order[i]];
        while i < order.len() && scores[order[i]] == s {
            tp += u64::from(labels[order[i]]);
            flagged += 1;
            i += 1;
        }
        out.push(PrPoint {
            threshold: s,
            precision: tp as f64 / flagged as f64,
            recall: tp as f64 / p as f64,
        });
    }
    Ok(out)
}

/// Percentile with linear interpolation between closest ranks.
pub fn percentile(sorted: &[f64], q: f64) -> f64 {
    assert!(!sorted.is_empty(), "percentile of empty sample");
    let pos = q / 100.0 * (sorted.len() - 1) as f64;
    let lo = pos.floor() as usize;
    let hi = pos.ceil() as usize;
    sorted[lo] + (sorted[hi] - sorted[lo]) * (pos - lo as f64)
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct BootstrapConfig {
    pub n_resamples: usize,
    pub seed: u64,
    /// Total single-class redraws allowed before giving up.
    pub max_retries: usize,
}

impl Default for BootstrapConfig {
    fn default() -> Self {
        Self {
            n_resamples: 1000,
            seed: 0,
            max_retries: 10_000,
        }
    }
}

/// 95% percentile interval of `metric` under resampling of groups (patients)
/// with replacement. `groups[i]` is the group of item `i`. Resamples on which
/// the metric is undefined (single class) are redrawn.
pub fn bootstrap_ci(
    scores: &[f64],
    labels: &[bool],
    groups: &[usize],
    metric: fn(&[f64], &[bool]) -> Result<f64, EvalError>,
    cfg: &BootstrapConfig,
) -> Result<(f64, f64), EvalError> {
    check_inputs(scores, labels)?;
    if groups.len() != scores.len() {
        return Err(EvalError::Length {
            scores: scores.len(),
            labels: groups.len(),
        });
    }
    if cfg.n_resamples < 100 {
        return Err(EvalError::Config(format!("n_resamples {} < 100", cfg.n_resamples)));
    }
    let n_groups = groups.iter().map(|&g| g + 1).max().unwrap_or(0);
    let mut members: Vec<Vec<usize>> = vec![Vec::new(); n_groups];
    for (i, &g) in groups.iter().enumerate() {
        members[g].push(i);
    }
    members.retain(|m| !m.is_empty());
    if members.is_empty() {
        return Err(EvalError::SingleClass);
    }
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut values = Vec::with_capacity(cfg.n_resamples);
    let mut s = Vec::new();
    let mut l = Vec::new();
    let mut failures = 0;
    while values.len() < cfg.n_resamples {
        s.clear();
        l.clear();
        for _ in 0..members.len() {
            for &i in &members[rng.random_range(0..members.len())] {
                s.push(scores[i]);
                l.push(labels[i]);
            }
        }
        match metric(&s, &l) {
            Ok(v) => values.push(v),
            Err(EvalError::SingleClass) | Err(EvalError::NoPositives) => {
                failures += 1;
                if failures > cfg.max_retries {
                    return Err(EvalError::RetriesExhausted(failures));
                }
            }
            Err(e) => return Err(e),
        }
    }
    values.sort_by(|a, b| a.partial_cmp(b).unwrap_or(Ordering::Equal));
    Ok((percentile(&values, 2.5), percentile(&values, 97.5)))
}

/// One line of a metrics file.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricRecord {
    pub metric: String,
    pub value: Option<f64>,
    pub ci_lo: Option<f64>,
    pub ci_hi: Option<f64>,
    pub n: usize,
    pub config_hash: String,
}

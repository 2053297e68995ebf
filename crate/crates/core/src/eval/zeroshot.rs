use serde::{Deserialize, Serialize};

use super::labels::ResolvedLabelSet;
use super::EvalError;
use crate::loss_opt::sigmoid;
use crate::model::{forward_rows, ModelParams};
use crate::sequence::AttentionMask;
use crate::tokenizer::{TokenId, TokenizedTrajectory, TokenizedVisit, SEP_ID};

pub const ONE_YEAR_DAYS: u32 = 365;

#[derive(Debug, Clone, PartialEq)]
pub struct WindowExample {
    pub patient_id: String,
    /// Index of the last history visit.
    pub anchor_visit: usize,
    pub anchor_days: u32,
    /// Visits up to and including the anchor.
    pub history: Vec<TokenizedVisit>,
    pub horizon_days: u32,
    pub label: bool,
    pub score: f64,
}

/// Where every candidate anchor went.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct CurationCounts {
    pub candidates: usize,
    pub included: usize,
    pub excluded_history: usize,
    pub excluded_1y: usize,
    pub excluded_followup: usize,
}

impl CurationCounts {
    pub fn is_partition(&self) -> bool {
        self.candidates == self.included + self.excluded_history + self.excluded_1y + self.excluded_followup
    }
}

/// Builds labeled windows from held-out trajectories. Every visit with at
/// least a year of prior history is a candidate anchor. Candidates whose
/// history already holds a label code, or whose onset falls within a year
/// after the anchor, are excluded; the rest are positive when onset falls in
/// `(anchor + 365, anchor + horizon]`, negative when follow-up reaches the end
/// of the horizon without onset, and excluded otherwise.
pub fn curate_zero_shot_windows(
    trajs: &[TokenizedTrajectory],
    label: &ResolvedLabelSet,
    horizon_days: u32,
) -> Result<(Vec<WindowExample>, CurationCounts), EvalError> {
    if horizon_days <= ONE_YEAR_DAYS {
        return Err(EvalError::Config(format!("horizon {horizon_days} must exceed {ONE_YEAR_DAYS} days")));
    }
    let mut counts = CurationCounts::default();
    let mut out = Vec::new();
    for traj in trajs {
        let Some(first) = traj.visits.first() else { continue };
        let last_time = traj.visits.last().map_or(0, |v| v.time_days);
        let onset = traj.first_visit_with_any(&label.ids);
        for (a, visit) in traj.visits.iter().enumerate() {
            let t = visit.time_days;
            if t - first.time_days < ONE_YEAR_DAYS {
                continue;
            }
            counts.candidates += 1;
            if onset.is_some_and(|o| o <= a) {
                counts.excluded_history += 1;
                continue;
            }
            let onset_time = onset.map(|o| traj.visits[o].time_days);
            let label_value = match onset_time {
                Some(ot) if ot <= t + ONE_YEAR_DAYS => {
                    counts.excluded_1y += 1;
                    continue;
                }
                Some(ot) if ot <= t + horizon_days => true,
                _ if last_time >= t + horizon_days => false,
                _ => {
                    counts.excluded_followup += 1;
                    continue;
                }
            };
            counts.included += 1;
            out.push(WindowExample {
                patient_id: traj.patient_id.clone(),
                anchor_visit: a,
                anchor_days: t,
                history: traj.visits[..=a].to_vec(),
                horizon_days,
                label: label_value,
                score: f64::NAN,
            });
        }
    }
    Ok((out, counts))
}

/// Query times `anchor + 365 + (horizon - 365) * j / grid` for `j = 1..=grid`.
pub fn query_times(anchor_days: u32, horizon_days: u32, grid: usize) -> Vec<f64> {
    let start = f64::from(anchor_days) + f64::from(ONE_YEAR_DAYS);
    let span = f64::from(horizon_days - ONE_YEAR_DAYS);
    (1..=grid).map(|j| start + span * j as f64 / grid as f64).collect()
}

/// Token layout of a history followed by one separator per query time. The
/// history uses the training layout (a separator between visits, positioned at
/// the next visit's time); each query separator closes the last visit and sees
/// the whole history plus itself, never the other queries. The oldest visits
/// are dropped if the result would not fit in `block_size`.
pub fn query_sequence(
    history: &[TokenizedVisit],
    queries: &[f64],
    block_size: usize,
) -> Result<(Vec<TokenId>, Vec<f64>, AttentionMask), EvalError> {
    if history.is_empty() || queries.is_empty() {
        return Err(EvalError::Data("query needs a non-empty history and at least one query time".into()));
    }
    if queries.len() >= block_size {
        return Err(EvalError::Config(format!("{} queries do not fit block_size {block_size}", queries.len())));
    }
    let budget = block_size - queries.len();
    let mut start = history.len();
    let mut used = 0;
    while start > 0 {
        let cost = history[start - 1].token_ids.len() + usize::from(start < history.len());
        if used + cost > budget {
            break;
        }
        used += cost;
        start -= 1;
    }
    let mut kept_last_events = None;
    if start == history.len() {
        // Even the anchor visit alone is too long: keep its first events.
        start = history.len() - 1;
        kept_last_events = Some(budget);
    }
    let visits = &history[start..];
    let mut tokens = Vec::new();
    let mut positions = Vec::new();
    let mut visit_ids = Vec::new();
    for (i, v) in visits.iter().enumerate() {
        let events = match kept_last_events {
            Some(n) if i + 1 == visits.len() => &v.token_ids[..n.min(v.token_ids.len())],
            _ => &v.token_ids[..],
        };
        for &t in events {
            tokens.push(t);
            positions.push(f64::from(v.time_days));
            visit_ids.push(i);
        }
        if let Some(next) = visits.get(i + 1) {
            tokens.push(SEP_ID);
            positions.push(f64::from(next.time_days));
            visit_ids.push(i);
        }
    }
    let hist_len = tokens.len();
    for &q in queries {
        tokens.push(SEP_ID);
        positions.push(q);
    }
    let n = tokens.len();
    let mut allowed = vec![false; n * n];
    for q in 0..n {
        let row = &mut allowed[q * n..(q + 1) * n];
        if q < hist_len {
            for k in 0..hist_len {
                row[k] = visit_ids[k] <= visit_ids[q];
            }
        } else {
            row[..hist_len].fill(true);
            row[q] = true;
        }
    }
    Ok((tokens, positions, AttentionMask::new(n, allowed)))
}

/// Risk score of one window: for each query time, `sigmoid` of the summed
/// label-set logits at a separator placed at that time; the maximum over the
/// grid is returned.
pub fn condition_score(
    params: &ModelParams,
    window: &WindowExample,
    label: &ResolvedLabelSet,
    grid: usize,
) -> Result<f64, EvalError> {
    if label.ids.is_empty() {
        return Err(EvalError::EmptyLabelSet(label.name.clone()));
    }
    if grid == 0 {
        return Err(EvalError::Config("query grid size must be positive".into()));
    }
    let queries = query_times(window.anchor_days, window.horizon_days, grid);
    let (tokens, positions, mask) = query_sequence(&window.history, &queries, params.config.block_size)?;
    let rows: Vec<usize> = (tokens.len() - grid..tokens.len()).collect();
    let logits = forward_rows(params, &tokens, &positions, &mask, &rows)?;
    Ok(logits
        .rows()
        .into_iter()
        .map(|r| sigmoid(label.ids.iter().map(|&k| r[k as usize]).sum()))
        .fold(f64::NEG_INFINITY, f64::max))
}

/// Scores every window in place.
pub fn score_windows(
    params: &ModelParams,
    windows: &mut [WindowExample],
    label: &ResolvedLabelSet,
    grid: usize,
) -> Result<(), EvalError> {
    for w in windows.iter_mut() {
        w.score = condition_score(params, w, label, grid)?;
    }
    Ok(())
}

use std::collections::{BTreeMap, HashMap};

use super::labels::ResolvedLabelSet;
use super::EvalError;
use crate::loss_opt::sigmoid;
use crate::model::{forward_rows, ModelParams};
use crate::sequence::{prepare_training_sequences, PackedBatch, PackingMode};
use crate::tokenizer::{TokenId, TokenizedTrajectory};

/// Model output at one separator of a trajectory.
#[derive(Debug, Clone, PartialEq)]
pub struct SepPrediction {
    pub patient_id: String,
    /// Index of the visit being predicted; the separator closes visit
    /// `target_visit - 1`.
    pub target_visit: usize,
    pub prediction_time: u32,
    pub target_time: u32,
    pub logits: Vec<f64>,
    /// Tokens of the target visit.
    pub target: Vec<TokenId>,
}

impl SepPrediction {
    pub fn prob(&self, token: TokenId) -> f64 {
        sigmoid(self.logits[token as usize])
    }
}

/// Runs every trajectory through the model and collects one prediction per
/// separator. Each separator sees exactly its own history; trajectories longer
/// than the context are cut into chunks at visit boundaries.
pub fn rolling_predictions(params: &ModelParams, trajs: &[TokenizedTrajectory]) -> Result<Vec<SepPrediction>, EvalError> {
    let mut out = Vec::new();
    for traj in trajs {
        let (chunks, _) = prepare_training_sequences(std::slice::from_ref(traj), 1.0, 0.0, params.config.block_size)
            .map_err(|e| EvalError::Data(e.to_string()))?;
        for chunk in &chunks {
            let batch = PackedBatch::single(chunk, PackingMode::Isolated);
            let rows: Vec<usize> = batch.seq.sep_slots.iter().map(|s| s.index).collect();
            let mask = batch.attention_mask();
            let logits = forward_rows(params, &batch.seq.token_ids, &batch.seq.positions, &mask, &rows)?;
            for ((slot, target), row) in batch.seq.sep_slots.iter().zip(&batch.targets).zip(logits.rows()) {
                let tv = slot.target_visit;
                out.push(SepPrediction {
                    patient_id: traj.patient_id.clone(),
                    target_visit: tv,
                    prediction_time: traj.visits[tv - 1].time_days,
                    target_time: traj.visits[tv].time_days,
                    logits: row.to_vec(),
                    target: target.positives.iter().map(|p| p.token).collect(),
                });
            }
        }
    }
    Ok(out)
}

/// One separator reduced to a single condition.
#[derive(Debug, Clone, PartialEq)]
pub struct ConditionSep {
    pub patient_id: String,
    pub target_visit: usize,
    /// `sigmoid` of the summed label-set logits.
    pub score: f64,
    /// A label-set token is in the target visit.
    pub positive: bool,
    /// First visit of the patient's trajectory holding a label-set token.
    pub onset_visit: Option<usize>,
}

/// `sigmoid(sum of logits over the label set)`.
pub fn condition_probability(logits: &[f64], label: &ResolvedLabelSet) -> f64 {
    sigmoid(label.ids.iter().map(|&k| logits[k as usize]).sum())
}

pub fn condition_seps(preds: &[SepPrediction], label: &ResolvedLabelSet, trajs: &[TokenizedTrajectory]) -> Vec<ConditionSep> {
    let onsets: HashMap<&str, Option<usize>> = trajs
        .iter()
        .map(|t| (t.patient_id.as_str(), t.first_visit_with_any(&label.ids)))
        .collect();
    preds
        .iter()
        .map(|p| ConditionSep {
            patient_id: p.patient_id.clone(),
            target_visit: p.target_visit,
            score: condition_probability(&p.logits, label),
            positive: label.any_in(&p.target),
            onset_visit: onsets.get(p.patient_id.as_str()).copied().flatten(),
        })
        .collect()
}

/// Threshold maximizing F1 when flagging `score >= threshold`, scanning every
/// distinct score; ties go to the higher threshold.
pub fn select_threshold(scores: &[f64], positives: &[bool]) -> Result<f64, EvalError> {
    if scores.len() != positives.len() {
        return Err(EvalError::Length {
            scores: scores.len(),
            labels: positives.len(),
        });
    }
    let total_pos = positives.iter().filter(|&&p| p).count();
    if total_pos == 0 {
        return Err(EvalError::NoPositives);
    }
    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_by(|&a, &b| scores[b].total_cmp(&scores[a]));
    let (mut tp, mut fp) = (0usize, 0usize);
    let mut best = (f64::NEG_INFINITY, f64::NAN);
    let mut i = 0;
    while i < order.len() {
        let s = scores[order[i]];
        while i < order.len() && scores[order[i]] == s {
            if positives[order[i]] {
                tp += 1;
            } else {
                fp += 1;
            }
            i += 1;
        }
        let f1 = 2.0 * tp as f64 / (2 * tp + fp + (total_pos - tp)) as f64;
        if f1 > best.0 {
            best = (f1, s);
        }
    }
    Ok(best.1)
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PrecisionRecall {
    pub tp: usize,
    pub fp: usize,
    pub fn_: usize,
    /// `None` when nothing is flagged.
    pub precision: Option<f64>,
    /// `None` when there are no positives.
    pub recall: Option<f64>,
}

/// Strict next-visit matching: a flagged separator counts only if the
/// condition is in the very next visit.
pub fn next_visit_precision_recall(seps: &[ConditionSep], threshold: f64) -> PrecisionRecall {
    let (mut tp, mut fp, mut fn_) = (0, 0, 0);
    for s in seps {
        match (s.score >= threshold, s.positive) {
            (true, true) => tp += 1,
            (true, false) => fp += 1,
            (false, true) => fn_ += 1,
            (false, false) => {}
        }
    }
    PrecisionRecall {
        tp,
        fp,
        fn_,
        precision: (tp + fp > 0).then(|| tp as f64 / (tp + fp) as f64),
        recall: (tp + fn_ > 0).then(|| tp as f64 / (tp + fn_) as f64),
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct OnTimeStats {
    pub tp_total: usize,
    pub tp_on_time: usize,
    /// `None` when there are no true-positive patients.
    pub rate: Option<f64>,
}

/// Patient-level on-time rate. A patient is a true positive if the condition
/// appears in the trajectory and any separator is flagged; it is on time if
/// the earliest flagged separator targets a visit at or before the onset.
/// Patients whose onset is the first visit have no separator that could
/// precede it and are left out.
pub fn on_time_rate(seps: &[ConditionSep], threshold: f64) -> OnTimeStats {
    let mut earliest: BTreeMap<&str, (usize, Option<usize>)> = BTreeMap::new();
    for s in seps {
        let Some(onset) = s.onset_visit else { continue };
        if onset == 0 || s.score < threshold {
            continue;
        }
        let e = earliest.entry(&s.patient_id).or_insert((s.target_visit, Some(onset)));
        e.0 = e.0.min(s.target_visit);
    }
    let tp_total = earliest.len();
    let tp_on_time = earliest.values().filter(|(first, onset)| Some(*first) <= *onset).count();
    OnTimeStats {
        tp_total,
        tp_on_time,
        rate: (tp_total > 0).then(|| tp_on_time as f64 / tp_total as f64),
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn sep(pid: &str, target_visit: usize, score: f64, positive: bool, onset: Option<usize>) -> ConditionSep {
        ConditionSep {
            patient_id: pid.into(),
            target_visit,
            score,
            positive,
            onset_visit: onset,
        }
    }

    fn brute_force_f1(scores: &[f64], pos: &[bool], t: f64) -> f64 {
        let tp = scores.iter().zip(pos).filter(|(&s, &p)| s >= t && p).count() as f64;
        let fp = scores.iter().zip(pos).filter(|(&s, &p)| s >= t && !p).count() as f64;
        let fneg = scores.iter().zip(pos).filter(|(&s, &p)| s < t && p).count() as f64;
        2.0 * tp / (2.0 * tp + fp + fneg)
    }

    #[test]
    fn perfect_separation_picks_upper_threshold() {
        assert_eq!(select_threshold(&[0.1, 0.9], &[false, true]).unwrap(), 0.9);
    }

    #[test]
    fn four_point_scan_matches_brute_force() {
        let scores = [0.2, 0.6, 0.4, 0.8];
        let pos = [true, false, true, true];
        let t = select_threshold(&scores, &pos).unwrap();
        let best = scores.iter().map(|&c| brute_force_f1(&scores, &pos, c)).fold(f64::MIN, f64::max);
        assert_eq!(brute_force_f1(&scores, &pos, t), best);
        let highest_best = scores
            .iter()
            .copied()
            .filter(|&c| brute_force_f1(&scores, &pos, c) == best)
            .fold(f64::MIN, f64::max);
        assert_eq!(t, highest_best);
    }

    #[test]
    fn all_negative_validation_is_an_error() {
        assert!(matches!(select_threshold(&[0.3, 0.4], &[false, false]), Err(EvalError::NoPositives)));
    }

    #[test]
    fn single_sep_hit() {
        let pr = next_visit_precision_recall(&[sep("a", 1, 0.9, true, Some(1))], 0.5);
        assert_eq!((pr.precision, pr.recall), (Some(1.0), Some(1.0)));
    }

    #[test]
    fn flag_two_visits_early_is_a_false_positive() {
        // Condition first appears at visit 3; the separator targeting visit 2 flags it.
        let seps = [sep("a", 1, 0.1, false, Some(3)), sep("a", 2, 0.9, false, Some(3)), sep("a", 3, 0.2, true, Some(3))];
        let pr = next_visit_precision_recall(&seps, 0.5);
        assert_eq!((pr.tp, pr.fp, pr.fn_), (0, 1, 1));
        assert_eq!(pr.precision, Some(0.0));
    }

    #[test]
    fn five_sep_enumeration() {
        let seps = [
            sep("a", 1, 0.7, true, Some(1)),
            sep("a", 2, 0.3, true, Some(1)),
            sep("b", 1, 0.8, false, None),
            sep("b", 2, 0.6, false, None),
            sep("c", 1, 0.1, false, None),
        ];
        let pr = next_visit_precision_recall(&seps, 0.5);
        assert_eq!((pr.tp, pr.fp, pr.fn_), (1, 2, 1));
        assert_eq!(pr.precision, Some(1.0 / 3.0));
        assert_eq!(pr.recall, Some(0.5));
        assert_eq!(next_visit_precision_recall(&seps, 0.95).precision, None);
    }

    #[test]
    fn on_time_rules() {
        // Onset at visit 5, first flagged at the separator targeting visit 3.
        let early = [sep("a", 3, 0.9, false, Some(5)), sep("a", 6, 0.9, true, Some(5))];
        assert_eq!(on_time_rate(&early, 0.5).rate, Some(1.0));
        // Flagged exactly at onset counts.
        let exact = [sep("a", 4, 0.1, false, Some(5)), sep("a", 5, 0.9, true, Some(5))];
        assert_eq!(on_time_rate(&exact, 0.5).rate, Some(1.0));
        // Only after onset.
        let late = [sep("a", 5, 0.1, true, Some(5)), sep("a", 6, 0.9, true, Some(5))];
        let s = on_time_rate(&late, 0.5);
        assert_eq!((s.tp_total, s.tp_on_time, s.rate), (1, 0, Some(0.0)));
        // Never-developing patients and unflagged patients are not true positives.
        let none = [sep("b", 1, 0.9, false, None), sep("c", 1, 0.1, false, Some(2))];
        assert_eq!(on_time_rate(&none, 0.5).rate, None);
    }
}

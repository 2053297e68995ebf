//! Training-sequence assembly: separator tokens and time positions, next-visit
//! targets with repeat-decay weights, packing, and the visit-block mask.
//!
//! Layout of one patient with visits at days `[0, 30, 90]`:
//!
//! ```text
//! tokens     e  e  <sep>  e  <sep>  e  e
//! position   0  0   30    30  90    90 90
//! visit      0  0   0     1   1     2  2
//! ```
//!
//! A separator carries the *next* visit's time as its position but belongs to
//! the visit it terminates for masking. There is no separator after the final
//! visit of a training sequence.

use std::collections::HashMap;

use log::warn;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::loss_opt::repeat_weight;
use crate::tokenizer::{TokenId, TokenizedTrajectory, PAD_ID, SEP_ID};

#[derive(Debug, Error, PartialEq)]
pub enum SequenceError {
    #[error("trajectory {0} has fewer than two visits")]
    TooFewVisits(String),
    #[error("block_size {0} is too small to hold a visit and its separator")]
    BlockTooSmall(usize),
    #[error("invalid repeat-decay parameters: decay={decay}, w_min={w_min}")]
    BadWeights { decay: f64, w_min: f64 },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PackingMode {
    /// Later patients in a packed row may attend to earlier ones.
    #[default]
    Cross,
    /// Patients in a packed row never see each other.
    Isolated,
}

impl std::str::FromStr for PackingMode {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "cross" => Ok(PackingMode::Cross),
            "isolated" => Ok(PackingMode::Isolated),
            _ => Err(format!("unknown packing mode {s:?} (expected cross or isolated)")),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct SepSlot {
    /// Index of the separator token in the sequence.
    pub index: usize,
    /// Index (in the source trajectory) of the visit this separator predicts.
    pub target_visit: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct PositionedSequence {
    pub token_ids: Vec<TokenId>,
    /// Elapsed days, one per token.
    pub positions: Vec<f64>,
    /// Span-local visit index used for masking.
    pub visit_ids: Vec<u32>,
    pub sep_slots: Vec<SepSlot>,
    /// Half-open `[start, end)` token ranges, one per patient (or chunk).
    pub patient_spans: Vec<(usize, usize)>,
}

impl PositionedSequence {
    pub fn len(&self) -> usize {
        self.token_ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.token_ids.is_empty()
    }

    /// End of the last patient span; everything after it is padding.
    pub fn real_len(&self) -> usize {
        self.patient_spans.last().map_or(0, |s| s.1)
    }

    /// Span index of every token, `None` for padding.
    pub fn span_ids(&self) -> Vec<Option<usize>> {
        let mut out = vec![None; self.len()];
        for (s, &(start, end)) in self.patient_spans.iter().enumerate() {
            for slot in &mut out[start..end] {
                *slot = Some(s);
            }
        }
        out
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PositiveTarget {
    pub token: TokenId,
    /// Number of history visits (up to and including the current one) that
    /// contain the token.
    pub repeat_count: u32,
    pub weight: f64,
}

/// Sparse next-visit target: tokens not listed are negatives with weight 1.
#[derive(Debug, Clone, PartialEq)]
pub struct TargetBlock {
    pub target_visit: usize,
    pub positives: Vec<PositiveTarget>,
}

impl TargetBlock {
    pub fn dense_targets(&self, vocab_size: usize) -> Vec<f64> {
        let mut v = vec![0.0; vocab_size];
        for p in &self.positives {
            v[p.token as usize] = 1.0;
        }
        v
    }

    pub fn dense_weights(&self, vocab_size: usize) -> Vec<f64> {
        let mut w = vec![1.0; vocab_size];
        for p in &self.positives {
            w[p.token as usize] = p.weight;
        }
        w
    }
}

/// Lays out one trajectory as a training sequence.
pub fn assign_positions(traj: &TokenizedTrajectory) -> Result<PositionedSequence, SequenceError> {
    if traj.visits.len() < 2 {
        return Err(SequenceError::TooFewVisits(traj.patient_id.clone()));
    }
    Ok(layout_visits(traj, 0..traj.visits.len(), usize::MAX, &mut 0))
}

/// Lays out `visits[range]`, appending a separator after every visit that has
/// a successor in the full trajectory. Visits longer than `max_events` are
/// truncated and counted.
fn layout_visits(
    traj: &TokenizedTrajectory,
    range: std::ops::Range<usize>,
    max_events: usize,
    truncated: &mut usize,
) -> PositionedSequence {
    let mut seq = PositionedSequence {
        token_ids: Vec::new(),
        positions: Vec::new(),
        visit_ids: Vec::new(),
        sep_slots: Vec::new(),
        patient_spans: Vec::new(),
    };
    let first = range.start;
    for i in range {
        let visit = &traj.visits[i];
        let local = (i - first) as u32;
        let events = if visit.token_ids.len() > max_events {
            *truncated += 1;
            &visit.token_ids[..max_events]
        } else {
            &visit.token_ids[..]
        };
        for &t in events {
            seq.token_ids.push(t);
            seq.positions.push(visit.time_days as f64);
            seq.visit_ids.push(local);
        }
        if let Some(next) = traj.visits.get(i + 1) {
            seq.sep_slots.push(SepSlot {
                index: seq.token_ids.len(),
                target_visit: i + 1,
            });
            seq.token_ids.push(SEP_ID);
            seq.positions.push(next.time_days as f64);
            seq.visit_ids.push(local);
        }
    }
    seq.patient_spans.push((0, seq.token_ids.len()));
    seq
}

/// Next-visit targets for every separator of the trajectory, with positive
/// weights `max(decay^c, w_min)` where `c` counts history visits holding the
/// token.
pub fn build_targets_and_weights(
    traj: &TokenizedTrajectory,
    decay: f64,
    w_min: f64,
) -> Result<Vec<TargetBlock>, SequenceError> {
    if !(decay > 0.0 && decay <= 1.0) || !(0.0..1.0).contains(&w_min) {
        return Err(SequenceError::BadWeights { decay, w_min });
    }
    let mut counts: HashMap<TokenId, u32> = HashMap::new();
    let mut blocks = Vec::with_capacity(traj.visits.len().saturating_sub(1));
    for i in 0..traj.visits.len().saturating_sub(1) {
        for &t in &traj.visits[i].token_ids {
            *counts.entry(t).or_default() += 1;
        }
        let positives = traj.visits[i + 1]
            .token_ids
            .iter()
            .map(|&token| {
                let repeat_count = counts.get(&token).copied().unwrap_or(0);
                PositiveTarget {
                    token,
                    repeat_count,
                    weight: repeat_weight(repeat_count, decay, w_min),
                }
            })
            .collect();
        blocks.push(TargetBlock {
            target_visit: i + 1,
            positives,
        });
    }
    Ok(blocks)
}

/// One packable unit: a trajectory (or a chunk of one) with its targets,
/// aligned with `seq.sep_slots`.
#[derive(Debug, Clone, PartialEq)]
pub struct TrainingSequence {
    pub patient_id: String,
    pub seq: PositionedSequence,
    pub targets: Vec<TargetBlock>,
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
pub struct PackStats {
    pub chunks: usize,
    pub truncated_visits: usize,
    pub dropped_chunks: usize,
}

/// Splits a trajectory into chunks of at most `block_size` tokens at visit
/// boundaries, without overlap. A chunk's trailing separator predicts the
/// first visit of the following chunk. Chunks without any separator carry no
/// target and are dropped.
pub fn chunk_trajectory(
    traj: &TokenizedTrajectory,
    targets: &[TargetBlock],
    block_size: usize,
    stats: &mut PackStats,
) -> Result<Vec<TrainingSequence>, SequenceError> {
    if block_size < 2 {
        return Err(SequenceError::BlockTooSmall(block_size));
    }
    if traj.visits.len() < 2 {
        return Err(SequenceError::TooFewVisits(traj.patient_id.clone()));
    }
    let n = traj.visits.len();
    let max_events = block_size - 1;
    let unit_len = |i: usize| traj.visits[i].token_ids.len().min(max_events) + usize::from(i + 1 < n);

    let mut out = Vec::new();
    let mut start = 0;
    while start < n {
        let mut end = start;
        let mut used = 0;
        while end < n && used + unit_len(end) <= block_size {
            used += unit_len(end);
            end += 1;
        }
        let mut seq = layout_visits(traj, start..end, max_events, &mut stats.truncated_visits);
        if seq.sep_slots.is_empty() {
            stats.dropped_chunks += 1;
        } else {
            let chunk_targets = seq.sep_slots.iter().map(|s| targets[s.target_visit - 1].clone()).collect();
            seq.patient_spans = vec![(0, seq.len())];
            out.push(TrainingSequence {
                patient_id: traj.patient_id.clone(),
                seq,
                targets: chunk_targets,
            });
            stats.chunks += 1;
        }
        start = end;
    }
    if stats.truncated_visits > 0 {
        warn!("{}: truncated {} visits to {} events", traj.patient_id, stats.truncated_visits, max_events);
    }
    Ok(out)
}

/// Targets plus block-sized chunks for a whole split.
pub fn prepare_training_sequences(
    trajs: &[TokenizedTrajectory],
    decay: f64,
    w_min: f64,
    block_size: usize,
) -> Result<(Vec<TrainingSequence>, PackStats), SequenceError> {
    let mut stats = PackStats::default();
    let mut out = Vec::with_capacity(trajs.len());
    for traj in trajs {
        let targets = build_targets_and_weights(traj, decay, w_min)?;
        out.extend(chunk_trajectory(traj, &targets, block_size, &mut stats)?);
    }
    Ok((out, stats))
}

/// A fixed-length row of packed sequences, padded with `PAD_ID`.
#[derive(Debug, Clone, PartialEq)]
pub struct PackedBatch {
    pub seq: PositionedSequence,
    /// Aligned with `seq.sep_slots`.
    pub targets: Vec<TargetBlock>,
    /// Aligned with `seq.patient_spans`.
    pub patient_ids: Vec<String>,
    pub mode: PackingMode,
}

impl PackedBatch {
    pub fn block_size(&self) -> usize {
        self.seq.len()
    }

    pub fn attention_mask(&self) -> AttentionMask {
        build_attention_mask(&self.seq, self.mode)
    }

    /// Wraps a single unpacked sequence (no padding).
    pub fn single(item: &TrainingSequence, mode: PackingMode) -> Self {
        Self {
            seq: item.seq.clone(),
            targets: item.targets.clone(),
            patient_ids: vec![item.patient_id.clone()],
            mode,
        }
    }
}

/// Greedy first-fit packing in input order: each item goes into the first
/// row with room for it, or opens a new row.
pub fn pack_sequences(
    items: &[TrainingSequence],
    block_size: usize,
    mode: PackingMode,
) -> Result<Vec<PackedBatch>, SequenceError> {
    let mut rows: Vec<(usize, Vec<usize>)> = Vec::new();
    for (idx, item) in items.iter().enumerate() {
        let len = item.seq.len();
        if len > block_size {
            return Err(SequenceError::BlockTooSmall(block_size));
        }
        match rows.iter_mut().find(|(used, _)| used + len <= block_size) {
            Some((used, members)) => {
                *used += len;
                members.push(idx);
            }
            None => rows.push((len, vec![idx])),
        }
    }
    Ok(rows
        .into_iter()
        .map(|(_, members)| {
            let mut seq = PositionedSequence {
                token_ids: Vec::with_capacity(block_size),
                positions: Vec::with_capacity(block_size),
                visit_ids: Vec::with_capacity(block_size),
                sep_slots: Vec::new(),
                patient_spans: Vec::new(),
            };
            let mut targets = Vec::new();
            let mut patient_ids = Vec::new();
            for idx in members {
                let item = &items[idx];
                let offset = seq.len();
                seq.token_ids.extend_from_slice(&item.seq.token_ids);
                seq.positions.extend_from_slice(&item.seq.positions);
                seq.visit_ids.extend_from_slice(&item.seq.visit_ids);
                seq.sep_slots.extend(item.seq.sep_slots.iter().map(|s| SepSlot {
                    index: s.index + offset,
                    target_visit: s.target_visit,
                }));
                seq.patient_spans.push((offset, seq.len()));
                targets.extend(item.targets.iter().cloned());
                patient_ids.push(item.patient_id.clone());
            }
            let pad = block_size - seq.len();
            seq.token_ids.extend(std::iter::repeat_n(PAD_ID, pad));
            seq.positions.extend(std::iter::repeat_n(0.0, pad));
            seq.visit_ids.extend(std::iter::repeat_n(0, pad));
            PackedBatch {
                seq,
                targets,
                patient_ids,
                mode,
            }
        })
        .collect())
}

/// Dense boolean mask, `allowed(q, k)` meaning query `q` may attend key `k`.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct AttentionMask {
    n: usize,
    allowed: Vec<bool>,
}

impl AttentionMask {
    pub fn new(n: usize, allowed: Vec<bool>) -> Self {
        assert_eq!(allowed.len(), n * n, "mask must be n x n");
        Self { n, allowed }
    }

    pub fn len(&self) -> usize {
        self.n
    }

    pub fn is_empty(&self) -> bool {
        self.n == 0
    }

    #[inline]
    pub fn allowed(&self, q: usize, k: usize) -> bool {
        self.allowed[q * self.n + k]
    }

    pub fn row(&self, q: usize) -> &[bool] {
        &self.allowed[q * self.n..(q + 1) * self.n]
    }

    /// Leading `n x n` block.
    pub fn truncated(&self, n: usize) -> AttentionMask {
        let allowed = (0..n).flat_map(|q| self.row(q)[..n].iter().copied()).collect();
        AttentionMask { n, allowed }
    }

    /// One line per query row, `1` for allowed keys.
    pub fn to_grid_text(&self) -> String {
        let mut out = String::with_capacity(self.n * (self.n + 1));
        for q in 0..self.n {
            for &a in self.row(q) {
                out.push(if a { '1' } else { '0' });
            }
            out.push('\n');
        }
        out
    }
}

/// Visit-block causal mask. Within a patient span a query sees every key whose
/// visit index is not later than its own. Cross mode also opens all earlier
/// spans; padding never attends and is never attended.
pub fn build_attention_mask(seq: &PositionedSequence, mode: PackingMode) -> AttentionMask {
    let n = seq.len();
    let spans = seq.span_ids();
    let mut allowed = vec![false; n * n];
    for q in 0..n {
        let Some(sq) = spans[q] else { continue };
        let row = &mut allowed[q * n..(q + 1) * n];
        for k in 0..n {
            row[k] = match spans[k] {
                Some(sk) if sk == sq => seq.visit_ids[k] <= seq.visit_ids[q],
                Some(sk) => mode == PackingMode::Cross && sk < sq,
                None => false,
            };
        }
    }
    AttentionMask { n, allowed }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tokenizer::TokenizedVisit;
    use proptest::prelude::*;

    fn traj(times: &[u32], sizes: &[usize]) -> TokenizedTrajectory {
        let mut next = 2;
        TokenizedTrajectory {
            patient_id: "P".into(),
            visits: times
                .iter()
                .zip(sizes)
                .map(|(&t, &n)| {
                    let ids = (next..next + n as TokenId).collect();
                    next += n as TokenId;
                    TokenizedVisit {
                        time_days: t,
                        token_ids: ids,
                    }
                })
                .collect(),
        }
    }

    fn visits(sets: &[&[TokenId]]) -> TokenizedTrajectory {
        TokenizedTrajectory {
            patient_id: "P".into(),
            visits: sets
                .iter()
                .enumerate()
                .map(|(i, s)| TokenizedVisit {
                    time_days: 10 * i as u32,
                    token_ids: s.to_vec(),
                })
                .collect(),
        }
    }

    #[test]
    fn positions_follow_layout_rule() {
        let seq = assign_positions(&traj(&[0, 30, 90], &[2, 1, 2])).unwrap();
        assert_eq!(seq.token_ids, vec![2, 3, SEP_ID, 4, SEP_ID, 5, 6]);
        assert_eq!(seq.positions, vec![0.0, 0.0, 30.0, 30.0, 90.0, 90.0, 90.0]);
        assert_eq!(seq.visit_ids, vec![0, 0, 0, 1, 1, 2, 2]);
        assert_eq!(
            seq.sep_slots,
            vec![SepSlot { index: 2, target_visit: 1 }, SepSlot { index: 4, target_visit: 2 }]
        );
    }

    #[test]
    fn two_visits_one_sep() {
        let seq = assign_positions(&traj(&[0, 45], &[1, 1])).unwrap();
        assert_eq!(seq.sep_slots.len(), 1);
        assert_eq!(seq.positions[seq.sep_slots[0].index], 45.0);
        assert!(assign_positions(&traj(&[0], &[3])).is_err());
    }

    #[test]
    fn weights_match_decay_formula() {
        // token 5 appears in all four visits, token 6 only in the last.
        let t = visits(&[&[5], &[5], &[5], &[5, 6]]);
        let blocks = build_targets_and_weights(&t, 0.5, 0.01).unwrap();
        assert_eq!(blocks[0].positives, vec![PositiveTarget { token: 5, repeat_count: 1, weight: 0.5 }]);
        assert_eq!(blocks[2].positives[0].repeat_count, 3);
        assert_eq!(blocks[2].positives[0].weight, 0.125);
        assert_eq!(blocks[2].positives[1], PositiveTarget { token: 6, repeat_count: 0, weight: 1.0 });

        let flat = build_targets_and_weights(&t, 1.0, 0.3).unwrap();
        assert!(flat.iter().flat_map(|b| &b.positives).all(|p| p.weight == 1.0));

        let long: Vec<&[TokenId]> = vec![&[5]; 22];
        let blocks = build_targets_and_weights(&visits(&long), 0.5, 0.01).unwrap();
        assert_eq!(blocks[19].positives[0].repeat_count, 20);
        assert_eq!(blocks[19].positives[0].weight, 0.01);
    }

    #[test]
    fn bad_weight_params_rejected() {
        let t = visits(&[&[5], &[5]]);
        assert!(build_targets_and_weights(&t, 0.0, 0.01).is_err());
        assert!(build_targets_and_weights(&t, 0.5, 1.0).is_err());
    }

    #[test]
    fn dense_views_respect_bounds() {
        let t = visits(&[&[2, 3], &[3, 4], &[2, 3, 4]]);
        for b in build_targets_and_weights(&t, 0.5, 0.2).unwrap() {
            let v = b.dense_targets(6);
            let w = b.dense_weights(6);
            for k in 0..6 {
                if v[k] == 0.0 {
                    assert_eq!(w[k], 1.0);
                } else {
                    assert!((0.2..=1.0).contains(&w[k]));
                }
            }
        }
    }

    fn item(id: &str, len_visits: &[usize]) -> TrainingSequence {
        let times: Vec<u32> = (0..len_visits.len() as u32).map(|i| i * 10).collect();
        let mut t = traj(&times, len_visits);
        t.patient_id = id.into();
        let targets = build_targets_and_weights(&t, 1.0, 0.0).unwrap();
        TrainingSequence {
            patient_id: id.into(),
            seq: assign_positions(&t).unwrap(),
            targets,
        }
    }

    #[test]
    fn first_fit_arithmetic() {
        // 199 events + 1 sep = 200 tokens; 299 + 1 = 300 tokens.
        let a = item("A", &[100, 99]);
        let b = item("B", &[150, 149]);
        assert_eq!((a.seq.len(), b.seq.len()), (200, 300));
        let packed = pack_sequences(&[a, b], 512, PackingMode::Cross).unwrap();
        assert_eq!(packed.len(), 1);
        assert_eq!(packed[0].seq.patient_spans, vec![(0, 200), (200, 500)]);
        assert_eq!(packed[0].seq.token_ids[500..].iter().filter(|&&t| t == PAD_ID).count(), 12);
        assert_eq!(packed[0].seq.sep_slots[1].index, 350);
    }

    #[test]
    fn long_trajectory_chunks_at_visit_boundaries() {
        let t = traj(&[0, 10, 20, 30, 40], &[3, 3, 3, 3, 3]);
        let targets = build_targets_and_weights(&t, 1.0, 0.0).unwrap();
        let mut stats = PackStats::default();
        let chunks = chunk_trajectory(&t, &targets, 9, &mut stats).unwrap();
        // Units are 4,4,4,4,3 tokens: chunks [0,1], [2,3], [4] with the last dropped.
        assert_eq!(chunks.len(), 2);
        assert_eq!(stats.dropped_chunks, 1);
        let slots: Vec<usize> = chunks.iter().flat_map(|c| c.seq.sep_slots.iter().map(|s| s.target_visit)).collect();
        assert_eq!(slots, vec![1, 2, 3, 4]);
        assert_eq!(chunks[1].seq.positions[0], 20.0);
        assert_eq!(chunks[1].seq.visit_ids[0], 0);
        for c in &chunks {
            for (s, tb) in c.seq.sep_slots.iter().zip(&c.targets) {
                assert_eq!(s.target_visit, tb.target_visit);
            }
        }
    }

    #[test]
    fn oversized_visit_truncated() {
        let t = traj(&[0, 10], &[20, 2]);
        let targets = build_targets_and_weights(&t, 1.0, 0.0).unwrap();
        let mut stats = PackStats::default();
        let chunks = chunk_trajectory(&t, &targets, 8, &mut stats).unwrap();
        assert_eq!(stats.truncated_visits, 1);
        assert_eq!(chunks[0].seq.len(), 8);
        assert_eq!(chunks[0].seq.token_ids[7], SEP_ID);
    }

    #[test]
    fn two_visit_mask_by_hand() {
        let seq = assign_positions(&traj(&[0, 10], &[2, 1])).unwrap();
        // tokens: a b sep c ; visits 0 0 0 1
        let m = build_attention_mask(&seq, PackingMode::Cross);
        let expected = "1110\n1110\n1110\n1111\n";
        assert_eq!(m.to_grid_text(), expected);
    }

    #[test]
    fn single_visit_is_all_to_all() {
        let seq = PositionedSequence {
            token_ids: vec![2, 3, 4],
            positions: vec![0.0; 3],
            visit_ids: vec![0; 3],
            sep_slots: vec![],
            patient_spans: vec![(0, 3)],
        };
        let m = build_attention_mask(&seq, PackingMode::Isolated);
        assert!((0..3).all(|q| (0..3).all(|k| m.allowed(q, k))));
    }

    #[test]
    fn cross_mode_opens_earlier_spans_and_hides_pad() {
        let packed = pack_sequences(&[item("A", &[1, 1]), item("B", &[1, 1])], 8, PackingMode::Cross).unwrap();
        let m = packed[0].attention_mask();
        // A: tokens 0..3, B: 3..6, pad 6..8
        assert!(m.allowed(3, 0) && m.allowed(5, 2));
        assert!(!m.allowed(0, 3));
        for q in 0..8 {
            assert!(!m.allowed(q, 6) && !m.allowed(q, 7));
            assert!(!m.allowed(6, q) && !m.allowed(7, q));
        }
    }

    fn random_items(lengths: &[Vec<usize>]) -> Vec<TrainingSequence> {
        lengths
            .iter()
            .enumerate()
            .map(|(i, l)| item(&format!("P{i}"), l))
            .collect()
    }

    proptest! {
        #[test]
        fn isolated_mask_is_block_diagonal(lengths in prop::collection::vec(prop::collection::vec(1usize..4, 2..5), 1..5)) {
            let items = random_items(&lengths);
            let packed = pack_sequences(&items, 64, PackingMode::Isolated).unwrap();
            for row in &packed {
                let m = row.attention_mask();
                let n = row.block_size();
                let mut expected = vec![false; n * n];
                for &(start, end) in &row.seq.patient_spans {
                    let own = PositionedSequence {
                        token_ids: row.seq.token_ids[start..end].to_vec(),
                        positions: row.seq.positions[start..end].to_vec(),
                        visit_ids: row.seq.visit_ids[start..end].to_vec(),
                        sep_slots: vec![],
                        patient_spans: vec![(0, end - start)],
                    };
                    let block = build_attention_mask(&own, PackingMode::Isolated);
                    for q in 0..end - start {
                        for k in 0..end - start {
                            expected[(start + q) * n + start + k] = block.allowed(q, k);
                        }
                    }
                }
                prop_assert_eq!(m, AttentionMask::new(n, expected));
            }
        }

        #[test]
        fn causality_and_packing_conservation(lengths in prop::collection::vec(prop::collection::vec(1usize..5, 2..6), 1..6)) {
            let items = random_items(&lengths);
            let packed = pack_sequences(&items, 48, PackingMode::Cross).unwrap();
            let mut before: Vec<TokenId> = items.iter().flat_map(|i| i.seq.token_ids.clone()).collect();
            let mut after: Vec<TokenId> = packed.iter().flat_map(|p| p.seq.token_ids.iter().copied().filter(|&t| t != PAD_ID)).collect();
            before.sort_unstable();
            after.sort_unstable();
            prop_assert_eq!(before, after);
            for row in &packed {
                let m = row.attention_mask();
                let spans = row.seq.span_ids();
                for q in 0..row.block_size() {
                    for k in 0..row.block_size() {
                        if spans[q].is_some() && spans[q] == spans[k] && row.seq.visit_ids[k] > row.seq.visit_ids[q] {
                            prop_assert!(!m.allowed(q, k));
                        }
                    }
                }
                for &(s, e) in &row.seq.patient_spans {
                    prop_assert!(row.seq.positions[s..e].windows(2).all(|w| w[0] <= w[1]));
                }
            }
        }

        #[test]
        fn repeat_counts_match_naive_scan(sets in prop::collection::vec(prop::collection::btree_set(2u32..8, 1..5), 2..8)) {
            let t = TokenizedTrajectory {
                patient_id: "P".into(),
                visits: sets.iter().enumerate().map(|(i, s)| TokenizedVisit { time_days: i as u32, token_ids: s.iter().copied().collect() }).collect(),
            };
            let blocks = build_targets_and_weights(&t, 0.5, 0.05).unwrap();
            for (i, block) in blocks.iter().enumerate() {
                for p in &block.positives {
                    let naive = t.visits[..=i].iter().filter(|v| v.token_ids.contains(&p.token)).count() as u32;
                    prop_assert_eq!(p.repeat_count, naive);
                    prop_assert!(p.weight >= 0.05 && p.weight <= 1.0);
                }
            }
        }
    }
}

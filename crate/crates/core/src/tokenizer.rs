//! Token vocabulary with quantile bins, and visit-grouped tokenization.
//!
//! Bin edges for a continuous code with `n_bins` bins are the nearest-rank
//! quantiles of its sorted training values: for `k = 1..n_bins` the edge is
//! `x[ceil(k * N / n_bins) - 1]` (0-based, `N` values). Equal edges are
//! collapsed. A value falls into bin `#{edges <= value}`, i.e. bins are
//! left-closed and right-open and a value equal to an edge goes up.

use std::collections::{BTreeMap, BTreeSet, HashMap};
use std::fmt;
use std::io::{BufRead, Write};

use log::warn;
use thiserror::Error;

use crate::cohort::{EventDescriptor, EventKind, PatientTrajectory};

pub type TokenId = u32;

pub const PAD_ID: TokenId = 0;
pub const SEP_ID: TokenId = 1;

#[derive(Debug, Error)]
pub enum TokenizerError {
    #[error("cannot bin a NaN value")]
    NanValue,
    #[error("n_bins must be at least 2, got {0}")]
    TooFewBins(usize),
    #[error("vocabulary file line {line}: {reason}")]
    Parse { line: usize, reason: String },
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

#[derive(Debug, Clone, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub enum TokenKey {
    Pad,
    Sep,
    Categorical { kind: EventKind, code: String },
    Binned { kind: EventKind, code: String, bin: usize },
}

impl TokenKey {
    pub fn categorical(kind: EventKind, code: impl Into<String>) -> Self {
        TokenKey::Categorical {
            kind,
            code: code.into(),
        }
    }

    pub fn parse(s: &str) -> Option<Self> {
        match s {
            "<pad>" => return Some(TokenKey::Pad),
            "<sep>" => return Some(TokenKey::Sep),
            _ => {}
        }
        let (prefix, rest) = s.split_once(':')?;
        let kind = EventKind::from_prefix(prefix)?;
        if kind.is_continuous() {
            let (code, bin) = rest.rsplit_once('#')?;
            Some(TokenKey::Binned {
                kind,
                code: code.to_string(),
                bin: bin.parse().ok()?,
            })
        } else {
            Some(TokenKey::categorical(kind, rest))
        }
    }
}

impl fmt::Display for TokenKey {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            TokenKey::Pad => f.write_str("<pad>"),
            TokenKey::Sep => f.write_str("<sep>"),
            TokenKey::Categorical { kind, code } => write!(f, "{kind}:{code}"),
            TokenKey::Binned { kind, code, bin } => write!(f, "{kind}:{code}#{bin}"),
        }
    }
}

/// Bin index of `value`: the number of edges less than or equal to it.
pub fn bin_value(value: f64, edges: &[f64]) -> Result<usize, TokenizerError> {
    if value.is_nan() {
        return Err(TokenizerError::NanValue);
    }
    Ok(edges.partition_point(|&e| e <= value))
}

/// Nearest-rank quantile edges at `k / n_bins` for `k = 1..n_bins`, with
/// duplicates collapsed. `sorted` must be ascending and non-empty.
pub fn quantile_edges(sorted: &[f64], n_bins: usize) -> Vec<f64> {
    let n = sorted.len();
    let mut edges: Vec<f64> = (1..n_bins)
        .map(|k| {
            let rank = (k * n).div_ceil(n_bins).max(1);
            sorted[rank - 1]
        })
        .collect();
    edges.dedup();
    edges
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct BinningConfig {
    pub lab_bins: usize,
    pub age_bins: usize,
}

impl Default for BinningConfig {
    fn default() -> Self {
        Self {
            lab_bins: 10,
            age_bins: 10,
        }
    }
}

impl BinningConfig {
    fn bins_for(&self, kind: EventKind) -> usize {
        match kind {
            EventKind::AgeBin => self.age_bins,
            _ => self.lab_bins,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Vocabulary {
    keys: Vec<TokenKey>,
    index: HashMap<TokenKey, TokenId>,
    bin_edges: BTreeMap<(EventKind, String), Vec<f64>>,
}

impl Vocabulary {
    fn from_parts(categorical: BTreeSet<TokenKey>, bin_edges: BTreeMap<(EventKind, String), Vec<f64>>) -> Self {
        let mut keys = vec![TokenKey::Pad, TokenKey::Sep];
        let mut all: BTreeSet<TokenKey> = categorical;
        for ((kind, code), edges) in &bin_edges {
            for bin in 0..=edges.len() {
                all.insert(TokenKey::Binned {
                    kind: *kind,
                    code: code.clone(),
                    bin,
                });
            }
        }
        keys.extend(all);
        let index = keys.iter().enumerate().map(|(i, k)| (k.clone(), i as TokenId)).collect();
        Self { keys, index, bin_edges }
    }

    pub fn len(&self) -> usize {
        self.keys.len()
    }

    pub fn is_empty(&self) -> bool {
        self.keys.is_empty()
    }

    pub fn id(&self, key: &TokenKey) -> Option<TokenId> {
        self.index.get(key).copied()
    }

    pub fn key(&self, id: TokenId) -> Option<&TokenKey> {
        self.keys.get(id as usize)
    }

    pub fn keys(&self) -> &[TokenKey] {
        &self.keys
    }

    pub fn edges(&self, kind: EventKind, code: &str) -> Option<&[f64]> {
        self.bin_edges.get(&(kind, code.to_string())).map(Vec::as_slice)
    }

    pub fn bin_edges(&self) -> &BTreeMap<(EventKind, String), Vec<f64>> {
        &self.bin_edges
    }

    /// Token for one event, or `None` if the code was never seen in training.
    pub fn event_token(&self, event: &EventDescriptor) -> Result<Option<TokenId>, TokenizerError> {
        if event.kind.is_continuous() {
            let Some(edges) = self.edges(event.kind, &event.code) else {
                return Ok(None);
            };
            let value = event.value.ok_or(TokenizerError::NanValue)?;
            let bin = bin_value(value, edges)?;
            Ok(self.id(&TokenKey::Binned {
                kind: event.kind,
                code: event.code.clone(),
                bin,
            }))
        } else {
            Ok(self.id(&TokenKey::categorical(event.kind, event.code.as_str())))
        }
    }

    /// Text form: a `token` line per id followed by an `edges` line per
    /// continuous code. Floats use the shortest round-trip representation.
    pub fn write_text<W: Write>(&self, mut out: W) -> Result<(), TokenizerError> {
        writeln!(out, "# nextvisit vocabulary v1 size={}", self.len())?;
        for (id, key) in self.keys.iter().enumerate() {
            writeln!(out, "token\t{id}\t{key}")?;
        }
        for ((kind, code), edges) in &self.bin_edges {
            let joined: Vec<String> = edges.iter().map(|e| format!("{e:?}")).collect();
            writeln!(out, "edges\t{kind}:{code}\t{}", joined.join(","))?;
        }
        out.flush()?;
        Ok(())
    }

    pub fn read_text<R: BufRead>(input: R) -> Result<Self, TokenizerError> {
        let mut keys = Vec::new();
        let mut bin_edges = BTreeMap::new();
        for (idx, line) in input.lines().enumerate() {
            let line = line?;
            let fail = |reason: String| TokenizerError::Parse { line: idx + 1, reason };
            if line.starts_with('#') || line.trim().is_empty() {
                continue;
            }
            let fields: Vec<&str> = line.split('\t').collect();
            match fields.as_slice() {
                ["token", id, key] => {
                    let id: usize = id.parse().map_err(|e| fail(format!("bad id: {e}")))?;
                    if id != keys.len() {
                        return Err(fail(format!("expected id {}, found {id}", keys.len())));
                    }
                    keys.push(TokenKey::parse(key).ok_or_else(|| fail(format!("bad token key {key:?}")))?);
                }
                ["edges", code, values] => {
                    let (prefix, code) = code.split_once(':').ok_or_else(|| fail("bad edge code".into()))?;
                    let kind = EventKind::from_prefix(prefix).ok_or_else(|| fail(format!("bad kind {prefix:?}")))?;
                    let edges = if values.is_empty() {
                        Vec::new()
                    } else {
                        values
                            .split(',')
                            .map(|v| v.parse::<f64>().map_err(|e| fail(format!("bad edge {v:?}: {e}"))))
                            .collect::<Result<Vec<_>, _>>()?
                    };
                    if edges.windows(2).any(|w| w[0] >= w[1]) {
                        return Err(fail("edges not strictly ascending".into()));
                    }
                    bin_edges.insert((kind, code.to_string()), edges);
                }
                _ => return Err(fail(format!("unrecognized line {line:?}"))),
            }
        }
        if keys.first() != Some(&TokenKey::Pad) || keys.get(1) != Some(&TokenKey::Sep) {
            return Err(TokenizerError::Parse {
                line: 0,
                reason: "ids 0 and 1 must be <pad> and <sep>".into(),
            });
        }
        let index: HashMap<TokenKey, TokenId> = keys.iter().enumerate().map(|(i, k)| (k.clone(), i as TokenId)).collect();
        if index.len() != keys.len() {
            return Err(TokenizerError::Parse {
                line: 0,
                reason: "duplicate token keys".into(),
            });
        }
        Ok(Self { keys, index, bin_edges })
    }
}

/// Builds the vocabulary from training trajectories only.
pub fn build_vocabulary(train: &[PatientTrajectory], bins: BinningConfig) -> Result<Vocabulary, TokenizerError> {
    for n in [bins.lab_bins, bins.age_bins] {
        if n < 2 {
            return Err(TokenizerError::TooFewBins(n));
        }
    }
    let mut categorical = BTreeSet::new();
    let mut values: BTreeMap<(EventKind, String), Vec<f64>> = BTreeMap::new();
    let events = train
        .iter()
        .flat_map(|p| p.static_demographics.iter().chain(p.visits.iter().flat_map(|v| v.events.iter())));
    for event in events {
        if event.kind.is_continuous() {
            match event.value {
                Some(v) if !v.is_nan() => values.entry((event.kind, event.code.clone())).or_default().push(v),
                _ => return Err(TokenizerError::NanValue),
            }
        } else {
            categorical.insert(TokenKey::categorical(event.kind, event.code.as_str()));
        }
    }
    let mut bin_edges = BTreeMap::new();
    for ((kind, code), mut vals) in values {
        vals.sort_by(f64::total_cmp);
        let n_bins = bins.bins_for(kind);
        let edges = quantile_edges(&vals, n_bins);
        if edges.len() + 1 < n_bins {
            warn!("{kind}:{code}: only {} distinct bins of {n_bins} requested", edges.len() + 1);
        }
        bin_edges.insert((kind, code), edges);
    }
    Ok(Vocabulary::from_parts(categorical, bin_edges))
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct TokenizedVisit {
    pub time_days: u32,
    /// Deduplicated event ids in ascending order; never contains pad or sep.
    pub token_ids: Vec<TokenId>,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct TokenizedTrajectory {
    pub patient_id: String,
    pub visits: Vec<TokenizedVisit>,
}

impl TokenizedTrajectory {
    /// First visit index containing any of `ids`.
    pub fn first_visit_with_any(&self, ids: &[TokenId]) -> Option<usize> {
        self.visits.iter().position(|v| v.token_ids.iter().any(|t| ids.contains(t)))
    }
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
pub struct TokenizeStats {
    pub unknown_events: usize,
    pub dropped_visits: usize,
    pub excluded_trajectories: usize,
}

impl TokenizeStats {
    pub fn merge(&mut self, other: TokenizeStats) {
        self.unknown_events += other.unknown_events;
        self.dropped_visits += other.dropped_visits;
        self.excluded_trajectories += other.excluded_trajectories;
    }
}

/// Tokenizes one patient. Demographics are placed in the first visit.
/// Returns `None` when fewer than two non-empty visits remain.
pub fn tokenize_trajectory(
    patient: &PatientTrajectory,
    vocab: &Vocabulary,
    stats: &mut TokenizeStats,
) -> Result<Option<TokenizedTrajectory>, TokenizerError> {
    let mut visits = Vec::with_capacity(patient.visits.len());
    for (i, visit) in patient.visits.iter().enumerate() {
        let demographics = if i == 0 { patient.static_demographics.as_slice() } else { &[] };
        let mut ids = Vec::with_capacity(visit.events.len() + demographics.len());
        for event in demographics.iter().chain(&visit.events) {
            match vocab.event_token(event)? {
                Some(id) => ids.push(id),
                None => stats.unknown_events += 1,
            }
        }
        ids.sort_unstable();
        ids.dedup();
        if ids.is_empty() {
            stats.dropped_visits += 1;
            continue;
        }
        visits.push(TokenizedVisit {
            time_days: visit.time_days,
            token_ids: ids,
        });
    }
    if visits.len() < 2 {
        stats.excluded_trajectories += 1;
        return Ok(None);
    }
    Ok(Some(TokenizedTrajectory {
        patient_id: patient.patient_id.clone(),
        visits,
    }))
}

pub fn tokenize_cohort(
    patients: &[PatientTrajectory],
    vocab: &Vocabulary,
) -> Result<(Vec<TokenizedTrajectory>, TokenizeStats), TokenizerError> {
    let mut stats = TokenizeStats::default();
    let mut out = Vec::with_capacity(patients.len());
    for p in patients {
        if let Some(t) = tokenize_trajectory(p, vocab, &mut stats)? {
            out.push(t);
        }
    }
    if stats.unknown_events > 0 {
        warn!("dropped {} events with codes unknown to the vocabulary", stats.unknown_events);
    }
    Ok((out, stats))
}

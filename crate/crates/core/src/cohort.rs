//! Synthetic longitudinal cohorts with planted event dynamics.
//!
//! Every patient is generated from its own ChaCha stream derived from
//! `(rng_seed, patient_index)`, so a cohort is bit-identical for a fixed
//! config and patients could be generated in any order.

use std::cmp::Ordering;
use std::collections::{BTreeMap, BTreeSet};
use std::fmt;
use std::io::{BufRead, Write};
use std::str::FromStr;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Geometric, Normal, Poisson};
use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Error)]
pub enum CohortError {
    #[error("invalid cohort configuration: {0}")]
    Config(String),
    #[error("invalid split fractions: {0}")]
    Fractions(String),
    #[error("cohort record on line {line}: {source}")]
    Parse {
        line: usize,
        #[source]
        source: serde_json::Error,
    },
    #[error("invalid trajectory {patient_id}: {reason}")]
    Trajectory { patient_id: String, reason: String },
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum EventKind {
    Demographic,
    AgeBin,
    DiagnosisCode,
    MedicationCode,
    LabCodeWithValue,
}

impl EventKind {
    /// Kinds whose events carry a real value and are quantile-binned.
    pub fn is_continuous(self) -> bool {
        matches!(self, EventKind::AgeBin | EventKind::LabCodeWithValue)
    }

    /// Short prefix used in token keys and label-set files.
    pub fn prefix(self) -> &'static str {
        match self {
            EventKind::Demographic => "dem",
            EventKind::AgeBin => "age",
            EventKind::DiagnosisCode => "dx",
            EventKind::MedicationCode => "rx",
            EventKind::LabCodeWithValue => "lab",
        }
    }

    pub fn from_prefix(prefix: &str) -> Option<Self> {
        Some(match prefix {
            "dem" => EventKind::Demographic,
            "age" => EventKind::AgeBin,
            "dx" => EventKind::DiagnosisCode,
            "rx" => EventKind::MedicationCode,
            "lab" => EventKind::LabCodeWithValue,
            _ => return None,
        })
    }
}

impl fmt::Display for EventKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.prefix())
    }
}

/// One clinical event. Age events carry the age in years as their value so
/// that the tokenizer can bin them like lab results.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct EventDescriptor {
    pub kind: EventKind,
    pub code: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub value: Option<f64>,
}

impl EventDescriptor {
    pub fn categorical(kind: EventKind, code: impl Into<String>) -> Self {
        Self {
            kind,
            code: code.into(),
            value: None,
        }
    }

    pub fn valued(kind: EventKind, code: impl Into<String>, value: f64) -> Self {
        Self {
            kind,
            code: code.into(),
            value: Some(value),
        }
    }

    pub fn validate(&self) -> Result<(), String> {
        if self.code.is_empty() {
            return Err("empty event code".into());
        }
        match (self.kind.is_continuous(), self.value) {
            (true, None) => Err(format!("{}:{} is missing its value", self.kind, self.code)),
            (false, Some(_)) => Err(format!("{}:{} must not carry a value", self.kind, self.code)),
            (true, Some(v)) if v.is_nan() => Err(format!("{}:{} has a NaN value", self.kind, self.code)),
            _ => Ok(()),
        }
    }

    fn sort_key(&self) -> (EventKind, &str, u64) {
        (self.kind, &self.code, self.value.map_or(0, f64::to_bits))
    }
}

impl PartialEq for EventDescriptor {
    fn eq(&self, other: &Self) -> bool {
        self.sort_key() == other.sort_key()
    }
}

impl Eq for EventDescriptor {}

impl PartialOrd for EventDescriptor {
    fn partial_cmp(&self, other: &Self) -> Option<Ordering> {
        Some(self.cmp(other))
    }
}

impl Ord for EventDescriptor {
    fn cmp(&self, other: &Self) -> Ordering {
        let (ka, ca, _) = self.sort_key();
        let (kb, cb, _) = other.sort_key();
        ka.cmp(&kb).then_with(|| ca.cmp(cb)).then_with(|| {
            let va = self.value.unwrap_or(0.0);
            let vb = other.value.unwrap_or(0.0);
            va.total_cmp(&vb)
        })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Visit {
    pub time_days: u32,
    pub events: Vec<EventDescriptor>,
}

impl Visit {
    /// Builds a visit with canonical (sorted, deduplicated) events.
    pub fn new(time_days: u32, mut events: Vec<EventDescriptor>) -> Self {
        events.sort();
        events.dedup();
        Self { time_days, events }
    }

    pub fn contains_code(&self, kind: EventKind, code: &str) -> bool {
        self.events.iter().any(|e| e.kind == kind && e.code == code)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PatientTrajectory {
    pub patient_id: String,
    pub static_demographics: Vec<EventDescriptor>,
    pub visits: Vec<Visit>,
}

impl PatientTrajectory {
    pub fn validate(&self) -> Result<(), CohortError> {
        let fail = |reason: String| CohortError::Trajectory {
            patient_id: self.patient_id.clone(),
            reason,
        };
        if self.visits.len() < 2 {
            return Err(fail(format!("{} visits, need at least 2", self.visits.len())));
        }
        if self.visits[0].time_days != 0 {
            return Err(fail("first visit is not at day 0".into()));
        }
        for pair in self.visits.windows(2) {
            if pair[1].time_days <= pair[0].time_days {
                return Err(fail("visit times are not strictly increasing".into()));
            }
        }
        for visit in &self.visits {
            if visit.events.is_empty() {
                return Err(fail(format!("empty visit at day {}", visit.time_days)));
            }
            for event in &visit.events {
                event.validate().map_err(&fail)?;
            }
        }
        for event in &self.static_demographics {
            event.validate().map_err(&fail)?;
        }
        Ok(())
    }

    /// Index of the first visit containing any of the given codes.
    pub fn first_visit_with(&self, kind: EventKind, code: &str) -> Option<usize> {
        self.visits.iter().position(|v| v.contains_code(kind, code))
    }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct Cohort {
    pub patients: Vec<PatientTrajectory>,
}

impl Cohort {
    pub fn len(&self) -> usize {
        self.patients.len()
    }

    pub fn is_empty(&self) -> bool {
        self.patients.is_empty()
    }

    /// Writes one JSON record per patient per line.
    pub fn write_jsonl<W: Write>(&self, mut out: W) -> Result<(), CohortError> {
        for patient in &self.patients {
            serde_json::to_writer(&mut out, patient).map_err(std::io::Error::other)?;
            out.write_all(b"\n")?;
        }
        out.flush()?;
        Ok(())
    }

    pub fn read_jsonl<R: BufRead>(input: R) -> Result<Self, CohortError> {
        let mut patients = Vec::new();
        for (idx, line) in input.lines().enumerate() {
            let line = line?;
            if line.trim().is_empty() {
                continue;
            }
            let patient: PatientTrajectory = serde_json::from_str(&line)
                .map_err(|source| CohortError::Parse { line: idx + 1, source })?;
            patient.validate()?;
            patients.push(patient);
        }
        Ok(Self { patients })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Persistence {
    Once,
    ChronicRepeat,
}

/// When any trigger code is present in visit `i`, the effect code is emitted
/// in visit `i + lag_visits` with `probability`. A chronic effect then
/// recurs in each later visit with `repeat_probability`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PlantedRule {
    pub triggers: Vec<CodeRef>,
    pub effect: CodeRef,
    pub lag_visits: usize,
    pub persistence: Persistence,
    pub probability: f64,
    #[serde(default = "one")]
    pub repeat_probability: f64,
}

fn one() -> f64 {
    1.0
}

/// A `(kind, code)` pair written as `dx:CODE` in text form.
#[derive(Debug, Clone, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub struct CodeRef {
    pub kind: EventKind,
    pub code: String,
}

impl CodeRef {
    pub fn new(kind: EventKind, code: impl Into<String>) -> Self {
        Self {
            kind,
            code: code.into(),
        }
    }
}

impl fmt::Display for CodeRef {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}:{}", self.kind, self.code)
    }
}

impl FromStr for CodeRef {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        let (prefix, code) = s.split_once(':').ok_or_else(|| format!("expected kind:code, got {s:?}"))?;
        let kind = EventKind::from_prefix(prefix).ok_or_else(|| format!("unknown event kind {prefix:?}"))?;
        if kind.is_continuous() {
            return Err(format!("{s:?}: planted codes must be categorical"));
        }
        if code.is_empty() {
            return Err(format!("{s:?}: empty code"));
        }
        Ok(Self::new(kind, code))
    }
}

impl fmt::Display for PlantedRule {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let triggers: Vec<String> = self.triggers.iter().map(ToString::to_string).collect();
        let persistence = match self.persistence {
            Persistence::Once => "once",
            Persistence::ChronicRepeat => "chronic",
        };
        write!(
            f,
            "{} -> {} lag={} p={} {}",
            triggers.join(","),
            self.effect,
            self.lag_visits,
            self.probability,
            persistence
        )?;
        if self.persistence == Persistence::ChronicRepeat && self.repeat_probability != 1.0 {
            write!(f, " repeat={}", self.repeat_probability)?;
        }
        Ok(())
    }
}

impl FromStr for PlantedRule {
    type Err = String;

    /// Parses `dx:A,dx:B -> dx:C lag=1 p=0.5 chronic`.
    fn from_str(s: &str) -> Result<Self, Self::Err> {
        let (lhs, rhs) = s.split_once("->").ok_or_else(|| format!("rule {s:?} has no '->'"))?;
        let triggers = lhs
            .split(',')
            .map(|t| t.trim().parse())
            .collect::<Result<Vec<CodeRef>, _>>()?;
        let mut parts = rhs.split_whitespace();
        let effect: CodeRef = parts.next().ok_or_else(|| format!("rule {s:?} has no effect"))?.parse()?;
        let mut rule = PlantedRule {
            triggers,
            effect,
            lag_visits: 1,
            persistence: Persistence::Once,
            probability: 1.0,
            repeat_probability: 1.0,
        };
        for part in parts {
            match part.split_once('=') {
                Some(("lag", v)) => rule.lag_visits = v.parse().map_err(|e| format!("lag {v:?}: {e}"))?,
                Some(("p", v)) => rule.probability = v.parse().map_err(|e| format!("p {v:?}: {e}"))?,
                Some(("repeat", v)) => {
                    rule.repeat_probability = v.parse().map_err(|e| format!("repeat {v:?}: {e}"))?
                }
                None if part == "once" => rule.persistence = Persistence::Once,
                None if part == "chronic" => rule.persistence = Persistence::ChronicRepeat,
                _ => return Err(format!("unrecognized rule field {part:?}")),
            }
        }
        Ok(rule)
    }
}

/// A code emitted independently of the background vocabulary with a fixed
/// per-visit probability, optionally at most once per patient.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SporadicCode {
    pub code: CodeRef,
    pub per_visit_probability: f64,
    pub once_per_patient: bool,
}

impl fmt::Display for SporadicCode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{} p={}", self.code, self.per_visit_probability)?;
        if self.once_per_patient {
            f.write_str(" once")?;
        }
        Ok(())
    }
}

impl FromStr for SporadicCode {
    type Err = String;

    /// Parses `dx:TRIG p=0.05 once`.
    fn from_str(s: &str) -> Result<Self, Self::Err> {
        let mut parts = s.split_whitespace();
        let code: CodeRef = parts.next().ok_or("empty sporadic code")?.parse()?;
        let mut out = SporadicCode {
            code,
            per_visit_probability: 0.0,
            once_per_patient: false,
        };
        for part in parts {
            match part.split_once('=') {
                Some(("p", v)) => out.per_visit_probability = v.parse().map_err(|e| format!("p {v:?}: {e}"))?,
                None if part == "once" => out.once_per_patient = true,
                _ => return Err(format!("unrecognized sporadic field {part:?}")),
            }
        }
        Ok(out)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct VocabSizes {
    pub demographic: usize,
    pub diagnosis: usize,
    pub medication: usize,
    pub lab: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CohortConfig {
    pub n_patients: usize,
    pub vocab_sizes: VocabSizes,
    /// Mean visit count per patient (at least 2).
    pub mean_visits: f64,
    pub max_visits: usize,
    /// Gaps are `min_gap_days + Geometric`, with overall mean `mean_gap_days`.
    pub mean_gap_days: f64,
    pub min_gap_days: u32,
    /// Poisson means of background events per visit.
    pub diagnoses_per_visit: f64,
    pub medications_per_visit: f64,
    pub labs_per_visit: f64,
    /// Background codes are drawn with Zipf weights `1 / (rank + 1)^s`.
    pub zipf_exponent: f64,
    pub start_age_years: (f64, f64),
    pub sporadic_codes: Vec<SporadicCode>,
    pub planted_rules: Vec<PlantedRule>,
    pub rng_seed: u64,
}

impl Default for CohortConfig {
    fn default() -> Self {
        Self {
            n_patients: 1000,
            vocab_sizes: VocabSizes {
                demographic: 4,
                diagnosis: 40,
                medication: 20,
                lab: 4,
            },
            mean_visits: 10.0,
            max_visits: 60,
            mean_gap_days: 60.0,
            min_gap_days: 20,
            diagnoses_per_visit: 2.0,
            medications_per_visit: 1.0,
            labs_per_visit: 1.0,
            zipf_exponent: 1.0,
            start_age_years: (30.0, 80.0),
            sporadic_codes: Vec::new(),
            planted_rules: Vec::new(),
            rng_seed: 7,
        }
    }
}

impl CohortConfig {
    pub fn validate(&self) -> Result<(), CohortError> {
        let bad = |msg: &str| Err(CohortError::Config(msg.to_string()));
        if self.n_patients == 0 {
            return bad("n_patients must be positive");
        }
        let v = &self.vocab_sizes;
        if v.demographic == 0 || v.diagnosis == 0 || v.medication == 0 || v.lab == 0 {
            return bad("every vocabulary size must be positive");
        }
        if !(self.mean_visits >= 2.0) || self.max_visits < 2 || (self.max_visits as f64) < self.mean_visits {
            return bad("need 2 <= mean_visits <= max_visits");
        }
        if self.min_gap_days == 0 || !(self.mean_gap_days >= self.min_gap_days as f64) {
            return bad("need 1 <= min_gap_days <= mean_gap_days");
        }
        for rate in [self.diagnoses_per_visit, self.medications_per_visit, self.labs_per_visit] {
            if !(rate >= 0.0) || !rate.is_finite() {
                return bad("per-visit event rates must be finite and non-negative");
            }
        }
        if !(self.zipf_exponent >= 0.0) {
            return bad("zipf_exponent must be non-negative");
        }
        let (lo, hi) = self.start_age_years;
        if !(lo >= 0.0 && hi >= lo) {
            return bad("start_age_years must be an ascending non-negative range");
        }
        for s in &self.sporadic_codes {
            if !(0.0..=1.0).contains(&s.per_visit_probability) {
                return Err(CohortError::Config(format!("sporadic {s}: probability outside [0, 1]")));
            }
        }
        for rule in &self.planted_rules {
            if rule.triggers.is_empty() {
                return Err(CohortError::Config(format!("rule {rule}: no trigger codes")));
            }
            if rule.lag_visits == 0 {
                return Err(CohortError::Config(format!("rule {rule}: lag_visits must be >= 1")));
            }
            if !(0.0..=1.0).contains(&rule.probability) {
                return Err(CohortError::Config(format!("rule {rule}: probability outside [0, 1]")));
            }
            if !(0.0..=1.0).contains(&rule.repeat_probability) {
                return Err(CohortError::Config(format!("rule {rule}: repeat probability outside [0, 1]")));
            }
        }
        Ok(())
    }
}

struct Background {
    diagnosis: Vec<f64>,
    medication: Vec<f64>,
    lab: Vec<f64>,
    lab_moments: Vec<(f64, f64)>,
}

fn zipf_cdf(n: usize, s: f64) -> Vec<f64> {
    let mut acc = 0.0;
    let mut cdf: Vec<f64> = (0..n)
        .map(|r| {
            acc += 1.0 / ((r + 1) as f64).powf(s);
            acc
        })
        .collect();
    for c in &mut cdf {
        *c /= acc;
    }
    cdf
}

fn sample_cdf<R: Rng>(cdf: &[f64], rng: &mut R) -> usize {
    let u: f64 = rng.random();
    cdf.partition_point(|&c| c < u).min(cdf.len() - 1)
}

pub fn diagnosis_code(i: usize) -> String {
    format!("D{i:03}")
}

pub fn medication_code(i: usize) -> String {
    format!("M{i:03}")
}

pub fn lab_code(i: usize) -> String {
    format!("L{i:02}")
}

pub const AGE_CODE: &str = "AGE";

/// Generates the cohort described by `config`.
pub fn generate_cohort(config: &CohortConfig) -> Result<Cohort, CohortError> {
    config.validate()?;
    let v = &config.vocab_sizes;
    let background = Background {
        diagnosis: zipf_cdf(v.diagnosis, config.zipf_exponent),
        medication: zipf_cdf(v.medication, config.zipf_exponent),
        lab: zipf_cdf(v.lab, config.zipf_exponent),
        // Code-specific means and spreads, fixed by the lab index.
        lab_moments: (0..v.lab).map(|i| (50.0 + 25.0 * i as f64, 5.0 + 2.0 * i as f64)).collect(),
    };
    let patients = (0..config.n_patients)
        .map(|idx| generate_patient(config, &background, idx))
        .collect();
    Ok(Cohort { patients })
}

fn patient_rng(seed: u64, patient_index: usize) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(patient_index as u64);
    rng
}

fn generate_patient(config: &CohortConfig, bg: &Background, index: usize) -> PatientTrajectory {
    let mut rng = patient_rng(config.rng_seed, index);

    let n_visits = {
        let extra_mean = config.mean_visits - 2.0;
        let extra = if extra_mean > 0.0 {
            Geometric::new(1.0 / (extra_mean + 1.0)).unwrap().sample(&mut rng) as usize
        } else {
            0
        };
        (2 + extra).min(config.max_visits)
    };
    let gap_extra = config.mean_gap_days - config.min_gap_days as f64;
    let gap_dist = (gap_extra > 0.0).then(|| Geometric::new(1.0 / (gap_extra + 1.0)).unwrap());
    let mut times = Vec::with_capacity(n_visits);
    let mut t = 0u32;
    for i in 0..n_visits {
        if i > 0 {
            let extra = gap_dist.as_ref().map_or(0, |g| g.sample(&mut rng)) as u32;
            t = t.saturating_add(config.min_gap_days + extra);
        }
        times.push(t);
    }

    let demographic = EventDescriptor::categorical(
        EventKind::Demographic,
        format!("G{}", rng.random_range(0..config.vocab_sizes.demographic)),
    );
    let (age_lo, age_hi) = config.start_age_years;
    let start_age = if age_hi > age_lo { rng.random_range(age_lo..age_hi) } else { age_lo };

    let poisson = |mean: f64| (mean > 0.0).then(|| Poisson::new(mean).unwrap());
    let dx_count = poisson(config.diagnoses_per_visit);
    let rx_count = poisson(config.medications_per_visit);
    let lab_count = poisson(config.labs_per_visit);
    let lab_noise: Vec<Normal<f64>> = bg.lab_moments.iter().map(|&(m, s)| Normal::new(m, s).unwrap()).collect();

    let mut scheduled: BTreeMap<usize, BTreeSet<CodeRef>> = BTreeMap::new();
    let mut chronic: BTreeMap<CodeRef, (usize, f64)> = BTreeMap::new();
    let mut sporadic_used = vec![false; config.sporadic_codes.len()];
    let mut visits = Vec::with_capacity(n_visits);

    for (i, &time_days) in times.iter().enumerate() {
        let mut events = Vec::new();
        let age = start_age + time_days as f64 / 365.25;
        events.push(EventDescriptor::valued(EventKind::AgeBin, AGE_CODE, (age * 10.0).round() / 10.0));

        let draw = |rng: &mut ChaCha8Rng, dist: &Option<Poisson<f64>>| dist.as_ref().map_or(0, |d| d.sample(rng) as usize);
        for _ in 0..draw(&mut rng, &dx_count) {
            let code = diagnosis_code(sample_cdf(&bg.diagnosis, &mut rng));
            events.push(EventDescriptor::categorical(EventKind::DiagnosisCode, code));
        }
        for _ in 0..draw(&mut rng, &rx_count) {
            let code = medication_code(sample_cdf(&bg.medication, &mut rng));
            events.push(EventDescriptor::categorical(EventKind::MedicationCode, code));
        }
        for _ in 0..draw(&mut rng, &lab_count) {
            let which = sample_cdf(&bg.lab, &mut rng);
            let value = lab_noise[which].sample(&mut rng);
            events.push(EventDescriptor::valued(EventKind::LabCodeWithValue, lab_code(which), (value * 100.0).round() / 100.0));
        }
        for (s, used) in config.sporadic_codes.iter().zip(sporadic_used.iter_mut()) {
            if s.once_per_patient && *used {
                continue;
            }
            if rng.random::<f64>() < s.per_visit_probability {
                *used = true;
                events.push(EventDescriptor::categorical(s.code.kind, s.code.code.clone()));
            }
        }
        if let Some(due) = scheduled.remove(&i) {
            events.extend(due.into_iter().map(|c| EventDescriptor::categorical(c.kind, c.code)));
        }
        for (code, &(onset, repeat)) in &chronic {
            // Onset itself is always emitted through `scheduled`.
            if onset < i && (repeat >= 1.0 || rng.random::<f64>() < repeat) {
                events.push(EventDescriptor::categorical(code.kind, code.code.clone()));
            }
        }
        let visit = Visit::new(time_days, events);

        for rule in &config.planted_rules {
            let fired = rule.triggers.iter().any(|t| visit.contains_code(t.kind, &t.code));
            // Draw unconditionally on the trigger so the stream layout does
            // not depend on which rules happened to fire earlier.
            let u: f64 = rng.random();
            if !fired || u >= rule.probability {
                continue;
            }
            let target = i + rule.lag_visits;
            if target >= n_visits {
                continue;
            }
            scheduled.entry(target).or_default().insert(rule.effect.clone());
            if rule.persistence == Persistence::ChronicRepeat {
                let entry = chronic.entry(rule.effect.clone()).or_insert((target, rule.repeat_probability));
                entry.0 = entry.0.min(target);
                entry.1 = entry.1.max(rule.repeat_probability);
            }
        }
        visits.push(visit);
    }

    PatientTrajectory {
        patient_id: format!("P{index:06}"),
        static_demographics: vec![demographic],
        visits,
    }
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct CohortSplit {
    pub train: Cohort,
    pub val: Cohort,
    pub test: Cohort,
}

/// Patient-level random partition. Train and validation sizes are rounded
/// from the fractions; test receives the remainder.
pub fn split_cohort(cohort: &Cohort, fractions: [f64; 3], seed: u64) -> Result<CohortSplit, CohortError> {
    if fractions.iter().any(|f| !(0.0..=1.0).contains(f)) {
        return Err(CohortError::Fractions(format!("{fractions:?} has entries outside [0, 1]")));
    }
    let total: f64 = fractions.iter().sum();
    if (total - 1.0).abs() > 1e-9 {
        return Err(CohortError::Fractions(format!("{fractions:?} sums to {total}, not 1")));
    }
    let n = cohort.len();
    let mut order: Vec<usize> = (0..n).collect();
    order.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    let n_train = ((fractions[0] * n as f64).round() as usize).min(n);
    let n_val = ((fractions[1] * n as f64).round() as usize).min(n - n_train);
    let take = |idx: &[usize]| Cohort {
        patients: idx.iter().map(|&i| cohort.patients[i].clone()).collect(),
    };
    Ok(CohortSplit {
        train: take(&order[..n_train]),
        val: take(&order[n_train..n_train + n_val]),
        test: take(&order[n_train + n_val..]),
    })
}

//! Condition label sets: tab-separated `disease, type, description, code`
//! rows, where `type` is `Diagnosis` or `Medication`.

use std::collections::BTreeSet;
use std::io::{Read, Write};

use log::warn;
use serde::{Deserialize, Serialize};

use super::EvalError;
use crate::cohort::EventKind;
use crate::tokenizer::{TokenId, TokenKey, Vocabulary};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
struct Row {
    disease: String,
    #[serde(rename = "type")]
    kind: String,
    description: String,
    code: String,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct LabelCode {
    pub kind: EventKind,
    pub code: String,
    pub description: String,
}

impl LabelCode {
    pub fn key(&self) -> TokenKey {
        TokenKey::categorical(self.kind, self.code.clone())
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ConditionLabelSet {
    pub name: String,
    pub codes: Vec<LabelCode>,
}

/// A label set mapped onto a vocabulary.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ResolvedLabelSet {
    pub name: String,
    /// Sorted, deduplicated.
    pub ids: Vec<TokenId>,
    pub unresolved: Vec<String>,
}

impl ResolvedLabelSet {
    pub fn contains(&self, id: TokenId) -> bool {
        self.ids.binary_search(&id).is_ok()
    }

    pub fn any_in(&self, tokens: &[TokenId]) -> bool {
        tokens.iter().any(|&t| self.contains(t))
    }
}

fn parse_kind(s: &str) -> Option<EventKind> {
    match s.trim().to_ascii_lowercase().as_str() {
        "diagnosis" | "dx" => Some(EventKind::DiagnosisCode),
        "medication" | "rx" => Some(EventKind::MedicationCode),
        _ => None,
    }
}

fn kind_name(kind: EventKind) -> &'static str {
    match kind {
        EventKind::MedicationCode => "Medication",
        _ => "Diagnosis",
    }
}

impl ConditionLabelSet {
    pub fn new(name: impl Into<String>, codes: Vec<LabelCode>) -> Result<Self, EvalError> {
        let name = name.into();
        if codes.is_empty() {
            return Err(EvalError::EmptyLabelSet(name));
        }
        Ok(Self { name, codes })
    }

    /// Maps codes to token ids; codes missing from the vocabulary are
    /// reported and skipped. Fails only if nothing resolves.
    pub fn resolve(&self, vocab: &Vocabulary) -> Result<ResolvedLabelSet, EvalError> {
        let mut ids = BTreeSet::new();
        let mut unresolved = Vec::new();
        for c in &self.codes {
            match vocab.id(&c.key()) {
                Some(id) => {
                    ids.insert(id);
                }
                None => unresolved.push(c.key().to_string()),
            }
        }
        if !unresolved.is_empty() {
            warn!("label set {}: unresolved codes {}", self.name, unresolved.join(", "));
        }
        if ids.is_empty() {
            return Err(EvalError::EmptyLabelSet(self.name.clone()));
        }
        Ok(ResolvedLabelSet {
            name: self.name.clone(),
            ids: ids.into_iter().collect(),
            unresolved,
        })
    }
}

/// Reads every label set in a file, in order of first appearance.
pub fn read_label_sets<R: Read>(input: R) -> Result<Vec<ConditionLabelSet>, EvalError> {
    let mut reader = csv::ReaderBuilder::new().delimiter(b'\t').from_reader(input);
    let mut sets: Vec<ConditionLabelSet> = Vec::new();
    for (i, row) in reader.deserialize::<Row>().enumerate() {
        let row = row.map_err(|e| EvalError::LabelFile(format!("row {}: {e}", i + 1)))?;
        let kind = parse_kind(&row.kind)
            .ok_or_else(|| EvalError::LabelFile(format!("row {}: unknown type {:?}", i + 1, row.kind)))?;
        let code = LabelCode {
            kind,
            code: row.code.trim().to_string(),
            description: row.description,
        };
        match sets.iter_mut().find(|s| s.name == row.disease) {
            Some(s) => s.codes.push(code),
            None => sets.push(ConditionLabelSet {
                name: row.disease,
                codes: vec![code],
            }),
        }
    }
    Ok(sets)
}

pub fn write_label_sets<W: Write>(sets: &[ConditionLabelSet], out: W) -> Result<(), EvalError> {
    let mut writer = csv::WriterBuilder::new().delimiter(b'\t').from_writer(out);
    for set in sets {
        for c in &set.codes {
            writer
                .serialize(Row {
                    disease: set.name.clone(),
                    kind: kind_name(c.kind).into(),
                    description: c.description.clone(),
                    code: c.code.clone(),
                })
                .map_err(|e| EvalError::LabelFile(e.to_string()))?;
        }
    }
    writer.flush()?;
    Ok(())
}

/// Finds a label set by name.
pub fn find_label_set<'a>(sets: &'a [ConditionLabelSet], name: &str) -> Result<&'a ConditionLabelSet, EvalError> {
    sets.iter()
        .find(|s| s.name == name)
        .ok_or_else(|| EvalError::LabelFile(format!("no label set named {name:?}")))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::cohort::{EventDescriptor, PatientTrajectory, Visit};
    use crate::tokenizer::{build_vocabulary, BinningConfig};

    const FILE: &str = "disease\ttype\tdescription\tcode\n\
        slow\tDiagnosis\tslow onset\tSLOW\n\
        slow\tMedication\ttreatment\tTREAT\n\
        other\tDiagnosis\tunrelated\tD001\n\
        slow\tDiagnosis\tnot in data\tMISSING\n";

    fn vocab() -> Vocabulary {
        let ev = |k, c: &str| EventDescriptor::categorical(k, c);
        let p = PatientTrajectory {
            patient_id: "P1".into(),
            static_demographics: vec![],
            visits: vec![
                Visit::new(0, vec![ev(EventKind::DiagnosisCode, "SLOW"), ev(EventKind::DiagnosisCode, "D001")]),
                Visit::new(10, vec![ev(EventKind::MedicationCode, "TREAT")]),
            ],
        };
        build_vocabulary(&[p], BinningConfig::default()).unwrap()
    }

    #[test]
    fn parses_groups_and_resolves() {
        let sets = read_label_sets(FILE.as_bytes()).unwrap();
        assert_eq!(sets.len(), 2);
        assert_eq!(sets[0].name, "slow");
        assert_eq!(sets[0].codes.len(), 3);
        let v = vocab();
        let r = sets[0].resolve(&v).unwrap();
        assert_eq!(r.ids.len(), 2);
        assert_eq!(r.unresolved, vec!["dx:MISSING".to_string()]);
        assert!(r.contains(v.id(&TokenKey::categorical(EventKind::MedicationCode, "TREAT")).unwrap()));
    }

    #[test]
    fn nothing_resolvable_is_an_error() {
        let set = ConditionLabelSet::new(
            "x",
            vec![LabelCode {
                kind: EventKind::DiagnosisCode,
                code: "NOPE".into(),
                description: String::new(),
            }],
        )
        .unwrap();
        assert!(matches!(set.resolve(&vocab()), Err(EvalError::EmptyLabelSet(_))));
        assert!(ConditionLabelSet::new("y", vec![]).is_err());
    }

    #[test]
    fn write_read_round_trip() {
        let sets = read_label_sets(FILE.as_bytes()).unwrap();
        let mut buf = Vec::new();
        write_label_sets(&sets, &mut buf).unwrap();
        assert_eq!(read_label_sets(&buf[..]).unwrap(), sets);
    }

    #[test]
    fn bad_type_rejected() {
        let bad = "disease\ttype\tdescription\tcode\nx\tProcedure\tp\tP1\n";
        assert!(read_label_sets(bad.as_bytes()).is_err());
    }
}

//! Trip-purpose labels for short check-in sequences and purpose scoring.

mod external;
mod heuristic;

pub use external::{parse_reply, purpose_prompt, ExternalConfig, ExternalLabeler, KEY_ENV};
pub use heuristic::{features, HeuristicLabeler, RuleTable, SequenceFeatures, DEFAULT_RULES};

use std::collections::BTreeMap;
use std::fmt;
use std::fs;
use std::path::Path;

use ndarray::Array2;
use rand::Rng;

use crate::corpus::{PoiTable, Sequence};
use crate::error::{Error, Result};
use crate::tensor::{gaussian, Matrix, Vector};

pub const PURPOSES: [&str; 11] = [
    "Business Trip",
    "Work Commute",
    "Tourism",
    "Short Vacation",
    "Cultural & Entertainment",
    "Shopping & Dining",
    "Social Events",
    "Fitness & Wellness",
    "Daily Commute",
    "Medical & Health Visits",
    "Education & Training",
];
pub const NUM_PURPOSES: usize = PURPOSES.len();

/// Index of a purpose label, matched case-insensitively with `and` accepted for `&`.
pub fn purpose_index(label: &str) -> Option<usize> {
    let norm = |s: &str| s.to_lowercase().replace(" and ", " & ").split_whitespace().collect::<Vec<_>>().join(" ");
    let wanted = norm(label);
    PURPOSES.iter().position(|p| norm(p) == wanted)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum LabelSource {
    Heuristic,
    External,
}

impl fmt::Display for LabelSource {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            LabelSource::Heuristic => "heuristic",
            LabelSource::External => "external",
        })
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct LabeledSequence {
    pub sequence_id: String,
    pub label: usize,
    pub source: LabelSource,
}

pub trait Labeler: Sync {
    fn label(&self, sequence: &Sequence, pois: &PoiTable) -> LabeledSequence;

    /// Labels a batch; implementations may run requests concurrently but
    /// must return results in input order.
    fn label_all(&self, sequences: &[Sequence], pois: &PoiTable) -> Vec<LabeledSequence> {
        sequences.iter().map(|s| self.label(s, pois)).collect()
    }
}

pub fn assign_purpose(sequence: &Sequence, pois: &PoiTable, labeler: &dyn Labeler) -> LabeledSequence {
    labeler.label(sequence, pois)
}

/// Purpose logits `E_pur · e`, with `E_pur` stored as `L × d`.
pub fn score_purposes(purpose_matrix: &Matrix, embedding: &Vector) -> Result<Vector> {
    if purpose_matrix.ncols() != embedding.len() {
        return Err(Error::usage("purpose matrix width does not match the embedding"));
    }
    Ok(purpose_matrix.dot(embedding))
}

pub fn init_purpose_matrix(d: usize, rng: &mut impl Rng) -> Matrix {
    gaussian(NUM_PURPOSES, d, 0.02, rng)
}

pub fn zero_purpose_matrix(d: usize) -> Matrix {
    Array2::zeros((NUM_PURPOSES, d))
}

pub fn write_labels(path: &Path, labels: &[LabeledSequence]) -> Result<()> {
    let mut out = String::new();
    for l in labels {
        out.push_str(&format!("{}\t{}\t{}\n", l.sequence_id, PURPOSES[l.label], l.source));
    }
    fs::write(path, out).map_err(|e| Error::io(path, e))
}

pub fn read_labels(path: &Path) -> Result<Vec<LabeledSequence>> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let mut out = Vec::new();
    for (n, line) in text.lines().enumerate().filter(|(_, l)| !l.trim().is_empty()) {
        let fields: Vec<&str> = line.split('\t').collect();
        let bad = || Error::data(format!("{}:{}: malformed label row", path.display(), n + 1));
        if fields.len() != 3 {
            return Err(bad());
        }
        let label = purpose_index(fields[1]).ok_or_else(bad)?;
        let source = match fields[2] {
            "heuristic" => LabelSource::Heuristic,
            "external" => LabelSource::External,
            _ => return Err(bad()),
        };
        out.push(LabeledSequence {
            sequence_id: fields[0].to_string(),
            label,
            source,
        });
    }
    Ok(out)
}

/// Pairs sequences with cached labels by sequence id.
pub fn join_labels(sequences: &[Sequence], labels: &[LabeledSequence]) -> Result<Vec<(Sequence, usize)>> {
    let by_id: BTreeMap<&str, usize> = labels.iter().map(|l| (l.sequence_id.as_str(), l.label)).collect();
    sequences
        .iter()
        .map(|s| {
            let key = s.key();
            by_id
                .get(key.as_str())
                .map(|&l| (s.clone(), l))
                .ok_or_else(|| Error::data(format!("no purpose label for sequence {key}")))
        })
        .collect()
}

//! Deterministic purpose labels from a versioned rule table.

use std::collections::BTreeMap;

use serde::Deserialize;

use super::{purpose_index, LabelSource, LabeledSequence, Labeler};
use crate::corpus::{PoiTable, Sequence};
use crate::error::{Error, Result};
use crate::geo::haversine_km;

pub const DEFAULT_RULES: &str = include_str!("../../data/purpose_rules.toml");

#[derive(Debug, Clone, Deserialize)]
#[serde(deny_unknown_fields)]
struct ClassShare {
    class: String,
    share: f64,
}

#[derive(Debug, Clone, Deserialize)]
#[serde(deny_unknown_fields)]
struct Rule {
    label: String,
    #[serde(default)]
    classes: Vec<String>,
    min_share: Option<f64>,
    min_class_share: Option<ClassShare>,
    min_span_km: Option<f64>,
    max_span_km: Option<f64>,
    min_hours: Option<f64>,
    min_weekday_share: Option<f64>,
    max_weekday_share: Option<f64>,
    min_rush_share: Option<f64>,
}

#[derive(Debug, Clone, Deserialize)]
#[serde(deny_unknown_fields)]
struct RawTable {
    version: u32,
    default_label: String,
    classes: BTreeMap<String, Vec<String>>,
    rules: Vec<Rule>,
    dominant: BTreeMap<String, String>,
}

#[derive(Debug, Clone)]
pub struct RuleTable {
    pub version: u32,
    raw: RawTable,
    rule_labels: Vec<usize>,
    dominant: BTreeMap<String, usize>,
    default_label: usize,
}

fn label_of(name: &str) -> Result<usize> {
    purpose_index(name).ok_or_else(|| Error::usage(format!("rule table names unknown purpose {name:?}")))
}

impl RuleTable {
    pub fn parse(text: &str) -> Result<Self> {
        let raw: RawTable = toml::from_str(text).map_err(|e| Error::usage(format!("invalid purpose rule table: {e}")))?;
        let rule_labels = raw.rules.iter().map(|r| label_of(&r.label)).collect::<Result<Vec<_>>>()?;
        for rule in &raw.rules {
            let named = rule.classes.iter().chain(rule.min_class_share.as_ref().map(|c| &c.class));
            for class in named {
                if !raw.classes.contains_key(class) {
                    return Err(Error::usage(format!("rule for {:?} uses undefined class {class:?}", rule.label)));
                }
            }
        }
        let dominant = raw
            .dominant
            .iter()
            .map(|(k, v)| Ok((k.clone(), label_of(v)?)))
            .collect::<Result<BTreeMap<_, _>>>()?;
        Ok(Self {
            version: raw.version,
            default_label: label_of(&raw.default_label)?,
            rule_labels,
            dominant,
            raw,
        })
    }

    pub fn builtin() -> Self {
        Self::parse(DEFAULT_RULES).expect("built-in rule table is valid")
    }

    fn classes_of(&self, category: &str) -> Vec<&str> {
        let words: String = category
            .to_lowercase()
            .split(|c: char| !c.is_alphanumeric())
            .filter(|w| !w.is_empty())
            .collect::<Vec<_>>()
            .join(" ");
        let padded = format!(" {words} ");
        self.raw
            .classes
            .iter()
            .filter(|(_, kws)| kws.iter().any(|k| padded.contains(&format!(" {k} "))))
            .map(|(c, _)| c.as_str())
            .collect()
    }

    pub fn classify(&self, f: &SequenceFeatures) -> usize {
        let share_any = |classes: &[String]| -> f64 {
            if f.n == 0 {
                return 0.0;
            }
            f.item_classes.iter().filter(|cs| cs.iter().any(|c| classes.contains(c))).count() as f64 / f.n as f64
        };
        let class_share = |c: &str| f.class_shares.get(c).copied().unwrap_or(0.0);
        for (rule, &label) in self.raw.rules.iter().zip(&self.rule_labels) {
            let ok = rule.min_share.is_none_or(|m| share_any(&rule.classes) >= m)
                && rule.min_class_share.as_ref().is_none_or(|c| class_share(&c.class) >= c.share)
                && rule.min_span_km.is_none_or(|m| f.span_km >= m)
                && rule.max_span_km.is_none_or(|m| f.span_km <= m)
                && rule.min_hours.is_none_or(|m| f.duration_hours >= m)
                && rule.min_weekday_share.is_none_or(|m| f.weekday_share >= m)
                && rule.max_weekday_share.is_none_or(|m| f.weekday_share <= m)
                && rule.min_rush_share.is_none_or(|m| f.rush_share >= m);
            if ok {
                return label;
            }
        }
        let dominant = f
            .class_shares
            .iter()
            .filter(|(_, &s)| s > 0.0)
            .max_by(|a, b| a.1.total_cmp(b.1).then(b.0.cmp(a.0)));
        dominant
            .and_then(|(c, _)| self.dominant.get(c).copied())
            .unwrap_or(self.default_label)
    }
}

/// Deterministic features of a short sequence.
#[derive(Debug, Clone, PartialEq)]
pub struct SequenceFeatures {
    pub n: usize,
    /// Classes matched by each check-in's POI category.
    pub item_classes: Vec<Vec<String>>,
    pub class_shares: BTreeMap<String, f64>,
    /// Largest pairwise distance between visited POIs.
    pub span_km: f64,
    pub duration_hours: f64,
    pub weekday_share: f64,
    /// Share of check-ins at 06-10 or 16-20 UTC.
    pub rush_share: f64,
}

const DAY: i64 = 86_400;

fn is_weekday(ts: i64) -> bool {
    // 1970-01-01 was a Thursday; 0 = Monday
    (ts.div_euclid(DAY) + 3).rem_euclid(7) < 5
}

fn hour_of(ts: i64) -> i64 {
    ts.rem_euclid(DAY) / 3600
}

pub fn features(seq: &Sequence, pois: &PoiTable, table: &RuleTable) -> SequenceFeatures {
    let n = seq.len();
    let item_classes: Vec<Vec<String>> = seq
        .items
        .iter()
        .map(|it| table.classes_of(&pois.get(it.poi).category).into_iter().map(String::from).collect())
        .collect();
    let mut class_shares: BTreeMap<String, f64> = table.raw.classes.keys().map(|k| (k.clone(), 0.0)).collect();
    for cs in &item_classes {
        for c in cs {
            *class_shares.get_mut(c).expect("known class") += 1.0 / n as f64;
        }
    }
    let mut span_km: f64 = 0.0;
    for (i, a) in seq.items.iter().enumerate() {
        for b in &seq.items[i + 1..] {
            let (pa, pb) = (pois.get(a.poi), pois.get(b.poi));
            span_km = span_km.max(haversine_km(pa.lat, pa.lon, pb.lat, pb.lon));
        }
    }
    let share = |pred: &dyn Fn(i64) -> bool| if n == 0 { 0.0 } else { seq.items.iter().filter(|it| pred(it.timestamp)).count() as f64 / n as f64 };
    SequenceFeatures {
        n,
        item_classes,
        class_shares,
        span_km,
        duration_hours: match (seq.items.first(), seq.items.last()) {
            (Some(a), Some(b)) => (b.timestamp - a.timestamp) as f64 / 3600.0,
            _ => 0.0,
        },
        weekday_share: share(&is_weekday),
        rush_share: share(&|t| matches!(hour_of(t), 6..=9 | 16..=19)),
    }
}

#[derive(Debug, Clone)]
pub struct HeuristicLabeler {
    pub table: RuleTable,
}

impl Default for HeuristicLabeler {
    fn default() -> Self {
        Self { table: RuleTable::builtin() }
    }
}

impl HeuristicLabeler {
    pub fn label_index(&self, seq: &Sequence, pois: &PoiTable) -> usize {
        self.table.classify(&features(seq, pois, &self.table))
    }
}

impl Labeler for HeuristicLabeler {
    fn label(&self, sequence: &Sequence, pois: &PoiTable) -> LabeledSequence {
        LabeledSequence {
            sequence_id: sequence.key(),
            label: self.label_index(sequence, pois),
            source: LabelSource::Heuristic,
        }
    }
}

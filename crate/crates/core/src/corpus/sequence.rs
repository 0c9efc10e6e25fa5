use std::collections::{BTreeMap, BTreeSet};

use super::{CheckIn, OwnerKind, PoiTable};

pub const DEFAULT_MAX_LEN: usize = 200;
pub const DEFAULT_GAP_DAYS: f64 = 5.0;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct CheckInItem {
    /// Row of the POI in its [`PoiTable`].
    pub poi: usize,
    pub timestamp: i64,
}

/// A chronologically ordered check-in sequence with per-step deltas.
#[derive(Debug, Clone, PartialEq)]
pub struct Sequence {
    pub owner_id: String,
    pub owner_kind: OwnerKind,
    pub items: Vec<CheckInItem>,
    /// Seconds since the previous item; 0 for the first.
    pub temporal_deltas: Vec<i64>,
    /// Kilometers from the previous item; 0 for the first.
    pub spatial_deltas: Vec<f64>,
}

impl Sequence {
    /// Builds a sequence from items that are already in chronological order.
    pub fn from_items(owner_id: impl Into<String>, owner_kind: OwnerKind, items: Vec<CheckInItem>, pois: &PoiTable) -> Self {
        let mut temporal_deltas = Vec::with_capacity(items.len());
        let mut spatial_deltas = Vec::with_capacity(items.len());
        for (i, item) in items.iter().enumerate() {
            if i == 0 {
                temporal_deltas.push(0);
                spatial_deltas.push(0.0);
            } else {
                let prev = items[i - 1];
                temporal_deltas.push(item.timestamp - prev.timestamp);
                spatial_deltas.push(pois.distance_km(prev.poi, item.poi));
            }
        }
        Self {
            owner_id: owner_id.into(),
            owner_kind,
            items,
            temporal_deltas,
            spatial_deltas,
        }
    }

    pub fn len(&self) -> usize {
        self.items.len()
    }

    pub fn is_empty(&self) -> bool {
        self.items.is_empty()
    }

    /// The first `n` items as their own sequence (deltas are unaffected by truncating the tail).
    pub fn prefix(&self, n: usize) -> Sequence {
        let n = n.min(self.items.len());
        Sequence {
            owner_id: self.owner_id.clone(),
            owner_kind: self.owner_kind,
            items: self.items[..n].to_vec(),
            temporal_deltas: self.temporal_deltas[..n].to_vec(),
            spatial_deltas: self.spatial_deltas[..n].to_vec(),
        }
    }

    /// The most recent `n` items, deltas recomputed so the first is 0.
    pub fn suffix(&self, n: usize, pois: &PoiTable) -> Sequence {
        let start = self.items.len().saturating_sub(n);
        Sequence::from_items(self.owner_id.clone(), self.owner_kind, self.items[start..].to_vec(), pois)
    }

    /// Items strictly before `t`.
    pub fn before(&self, t: i64) -> Sequence {
        let n = self.items.partition_point(|i| i.timestamp < t);
        self.prefix(n)
    }

    pub fn poi_set(&self) -> BTreeSet<usize> {
        self.items.iter().map(|i| i.poi).collect()
    }

    /// Key used for caches and label files: `kind:owner:first_ts:len`.
    pub fn key(&self) -> String {
        format!(
            "{}:{}:{}:{}",
            self.owner_kind,
            self.owner_id,
            self.items.first().map_or(0, |i| i.timestamp),
            self.items.len()
        )
    }
}

/// One sequence per owner, sorted chronologically, keeping the most recent
/// `max_len` items. Check-ins with unknown POIs are skipped.
pub fn build_sequences(checkins: &[CheckIn], pois: &PoiTable, max_len: usize) -> Vec<Sequence> {
    let mut by_owner: BTreeMap<(OwnerKind, &str), Vec<CheckInItem>> = BTreeMap::new();
    for c in checkins {
        let Some(poi) = pois.index_of(&c.poi_id) else { continue };
        by_owner
            .entry((c.owner_kind, c.owner_id.as_str()))
            .or_default()
            .push(CheckInItem { poi, timestamp: c.timestamp });
    }
    by_owner
        .into_iter()
        .map(|((kind, owner), mut items)| {
            items.sort_by(|a, b| {
                (a.timestamp, &pois.get(a.poi).id).cmp(&(b.timestamp, &pois.get(b.poi).id))
            });
            if items.len() > max_len {
                items.drain(..items.len() - max_len);
            }
            Sequence::from_items(owner, kind, items, pois)
        })
        .collect()
}

/// Cuts before every item whose gap to its predecessor exceeds `gap_days`.
pub fn split_by_gap(sequence: &Sequence, gap_days: f64, pois: &PoiTable) -> Vec<Sequence> {
    let limit = gap_days * 86_400.0;
    let mut pieces = Vec::new();
    let mut current: Vec<CheckInItem> = Vec::new();
    for (item, &dt) in sequence.items.iter().zip(&sequence.temporal_deltas) {
        if !current.is_empty() && dt as f64 > limit {
            pieces.push(std::mem::take(&mut current));
        }
        current.push(*item);
    }
    if !current.is_empty() {
        pieces.push(current);
    }
    pieces
        .into_iter()
        .map(|items| Sequence::from_items(sequence.owner_id.clone(), sequence.owner_kind, items, pois))
        .collect()
}

/// A prefix to encode and the item that follows it.
#[derive(Debug, Clone, PartialEq)]
pub struct PrefixTarget {
    pub prefix: Sequence,
    pub target: CheckInItem,
}

#[derive(Debug, Clone, PartialEq)]
pub struct LooSplit {
    pub train: Sequence,
    pub validation: PrefixTarget,
    pub test: PrefixTarget,
}

/// Leave-one-out: last item for test, second-to-last for validation, the rest
/// for training. Sequences shorter than 3 are excluded (`None`).
pub fn leave_one_out(sequence: &Sequence) -> Option<LooSplit> {
    let m = sequence.len();
    if m < 3 {
        return None;
    }
    let train = sequence.prefix(m - 2);
    Some(LooSplit {
        validation: PrefixTarget {
            prefix: train.clone(),
            target: sequence.items[m - 2],
        },
        test: PrefixTarget {
            prefix: sequence.prefix(m - 1),
            target: sequence.items[m - 1],
        },
        train,
    })
}

/// Train/validation/test structures for a whole corpus.
#[derive(Debug, Clone, Default)]
pub struct DatasetSplit {
    /// Evaluable sequences (length >= 3) that take part in training.
    pub entries: Vec<LooSplit>,
    /// Sequences of length 2, usable only for self-supervised pretraining.
    pub short: Vec<Sequence>,
    /// Held-out group sequences; evaluated but never trained on.
    pub cold_start: Vec<LooSplit>,
    pub cold_start_ids: BTreeSet<String>,
}

impl DatasetSplit {
    pub fn groups(&self) -> impl Iterator<Item = &LooSplit> {
        self.entries.iter().filter(|e| e.train.owner_kind == OwnerKind::Group)
    }

    pub fn users(&self) -> impl Iterator<Item = &LooSplit> {
        self.entries.iter().filter(|e| e.train.owner_kind == OwnerKind::User)
    }
}

/// Applies leave-one-out to every sequence, routing `cold_start_ids` groups to
/// the held-out list.
pub fn build_split(sequences: &[Sequence], cold_start_ids: &BTreeSet<String>) -> DatasetSplit {
    let mut split = DatasetSplit {
        cold_start_ids: cold_start_ids.clone(),
        ..Default::default()
    };
    for seq in sequences {
        let held_out = seq.owner_kind == OwnerKind::Group && cold_start_ids.contains(&seq.owner_id);
        match leave_one_out(seq) {
            Some(loo) if held_out => split.cold_start.push(loo),
            Some(loo) => split.entries.push(loo),
            None => {
                log::warn!("excluding {} {} from evaluation: only {} check-ins", seq.owner_kind, seq.owner_id, seq.len());
                if seq.len() >= 2 && !held_out {
                    split.short.push(seq.clone());
                }
            }
        }
    }
    split
}

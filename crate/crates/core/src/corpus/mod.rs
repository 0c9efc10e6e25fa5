//! Check-in data: ingestion, group mining, sequence construction and splitting,
//! geographic candidate generation, and synthetic corpora.

mod candidates;
mod groups;
mod io;
mod sequence;
mod synth;

use std::collections::{BTreeSet, HashMap};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub use candidates::{candidate_set, with_target};
pub use groups::{group_id_for, mine_groups, DEFAULT_WINDOW_SECONDS};
pub use io::{load_dataset, read_checkins, read_groups, write_checkins, write_groups, write_pois, write_social, LoadReport};
pub use sequence::{
    build_sequences, build_split, leave_one_out, split_by_gap, CheckInItem, DatasetSplit, LooSplit,
    PrefixTarget, Sequence, DEFAULT_GAP_DAYS, DEFAULT_MAX_LEN,
};
pub use synth::{generate_synthetic, SynthConfig, CATEGORY_PALETTE};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Poi {
    pub id: String,
    pub name: String,
    pub category: String,
    pub lat: f64,
    pub lon: f64,
    pub address: Option<String>,
    pub description: Option<String>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum OwnerKind {
    User,
    Group,
}

impl std::fmt::Display for OwnerKind {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            OwnerKind::User => f.write_str("user"),
            OwnerKind::Group => f.write_str("group"),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct CheckIn {
    pub owner_id: String,
    pub owner_kind: OwnerKind,
    pub poi_id: String,
    pub timestamp: i64,
}

/// POIs in load order. A POI's position in the table is its row in the POI
/// embedding matrix and the offset of its vocabulary token.
#[derive(Debug, Clone, Default)]
pub struct PoiTable {
    pois: Vec<Poi>,
    index: HashMap<String, usize>,
}

impl PoiTable {
    pub fn new(pois: Vec<Poi>) -> Result<Self> {
        let mut index = HashMap::with_capacity(pois.len());
        for (i, p) in pois.iter().enumerate() {
            validate_poi(p)?;
            if index.insert(p.id.clone(), i).is_some() {
                return Err(Error::data(format!("duplicate id {:?} in POI table", p.id)));
            }
        }
        Ok(Self { pois, index })
    }

    pub fn len(&self) -> usize {
        self.pois.len()
    }

    pub fn is_empty(&self) -> bool {
        self.pois.is_empty()
    }

    pub fn get(&self, idx: usize) -> &Poi {
        &self.pois[idx]
    }

    pub fn index_of(&self, id: &str) -> Option<usize> {
        self.index.get(id).copied()
    }

    pub fn iter(&self) -> impl Iterator<Item = &Poi> {
        self.pois.iter()
    }

    pub fn as_slice(&self) -> &[Poi] {
        &self.pois
    }

    pub fn distance_km(&self, a: usize, b: usize) -> f64 {
        let (pa, pb) = (&self.pois[a], &self.pois[b]);
        crate::geo::haversine_km(pa.lat, pa.lon, pb.lat, pb.lon)
    }
}

pub(crate) fn validate_poi(p: &Poi) -> Result<()> {
    if p.id.is_empty() || p.id.chars().any(|c| c.is_whitespace() || c == '>' || c == '<') {
        return Err(Error::data(format!(
            "POI id {:?} must be non-empty without whitespace or angle brackets",
            p.id
        )));
    }
    if !(-90.0..=90.0).contains(&p.lat) || !p.lat.is_finite() {
        return Err(Error::data(format!("POI {:?}: latitude {} outside [-90, 90]", p.id, p.lat)));
    }
    if !(-180.0..=180.0).contains(&p.lon) || !p.lon.is_finite() {
        return Err(Error::data(format!("POI {:?}: longitude {} outside [-180, 180]", p.id, p.lon)));
    }
    Ok(())
}

/// Undirected friendship edges stored as ordered pairs `(min, max)`.
#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct SocialGraph {
    edges: BTreeSet<(String, String)>,
}

impl SocialGraph {
    pub fn new() -> Self {
        Self::default()
    }

    /// Adds an edge; self-edges are ignored. Returns whether the edge was new.
    pub fn add_edge(&mut self, a: &str, b: &str) -> bool {
        if a == b {
            return false;
        }
        let key = if a < b {
            (a.to_string(), b.to_string())
        } else {
            (b.to_string(), a.to_string())
        };
        self.edges.insert(key)
    }

    pub fn connected(&self, a: &str, b: &str) -> bool {
        if a == b {
            return false;
        }
        let key = if a < b { (a, b) } else { (b, a) };
        self.edges.contains(&(key.0.to_string(), key.1.to_string()))
    }

    pub fn len(&self) -> usize {
        self.edges.len()
    }

    pub fn is_empty(&self) -> bool {
        self.edges.is_empty()
    }

    pub fn edges(&self) -> impl Iterator<Item = (&str, &str)> {
        self.edges.iter().map(|(a, b)| (a.as_str(), b.as_str()))
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Group {
    pub id: String,
    /// Sorted, distinct member ids.
    pub member_ids: Vec<String>,
}

/// A loaded or generated corpus.
#[derive(Debug, Clone)]
pub struct Dataset {
    pub checkins: Vec<CheckIn>,
    pub pois: PoiTable,
    pub social: SocialGraph,
}

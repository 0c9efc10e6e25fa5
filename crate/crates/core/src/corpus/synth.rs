//! Deterministic synthetic corpora with a planted, learnable signal.
//!
//! Users are partitioned into preference clusters. Each cluster owns a
//! geographic neighborhood and a themed set of categories; a user's next POI
//! comes from their cluster with probability `in_cluster_prob`, favoring a
//! small personal set of favorites. Check-ins arrive in short trips separated
//! by more than five days. Planted groups of socially linked users co-visit
//! POIs drawn from their members' favorites.

use std::collections::BTreeSet;

use rand::seq::{IndexedRandom, SliceRandom};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::{CheckIn, Dataset, OwnerKind, Poi, PoiTable, SocialGraph};
use crate::error::{Error, Result};

/// Category themes; cluster `c` uses theme `c % len`.
pub const CATEGORY_PALETTE: &[&[&str]] = &[
    &["Office", "Coworking Space", "Coffee Shop"],
    &["Museum", "Theater", "Art Gallery"],
    &["Restaurant", "Mall", "Bar"],
    &["Gym", "Park", "Yoga Studio"],
    &["University", "Library", "Bookstore"],
    &["Hospital", "Pharmacy", "Clinic"],
    &["Hotel", "Beach", "Landmark"],
    &["Stadium", "Concert Hall", "Nightclub"],
];

const STREETS: &[&str] = &["Main St", "Broadway", "Park Ave", "Elm St", "Harbor Rd", "Hill St"];
const BASE_TIME: i64 = 1_700_000_000;
const HOUR: i64 = 3600;
const DAY: i64 = 86_400;

#[derive(Debug, Clone, PartialEq)]
pub struct SynthConfig {
    pub n_users: usize,
    pub n_pois: usize,
    pub n_clusters: usize,
    pub checkins_per_user: usize,
    /// Planted groups per user, e.g. 0.6 gives 120 groups for 200 users.
    pub group_rate: f64,
    pub in_cluster_prob: f64,
    pub favorite_prob: f64,
    pub favorites_per_user: usize,
    pub trip_len: usize,
}

impl Default for SynthConfig {
    fn default() -> Self {
        Self {
            n_users: 200,
            n_pois: 300,
            n_clusters: 5,
            checkins_per_user: 50,
            group_rate: 0.6,
            in_cluster_prob: 0.8,
            favorite_prob: 0.6,
            favorites_per_user: 6,
            trip_len: 5,
        }
    }
}

impl SynthConfig {
    fn validate(&self) -> Result<()> {
        if self.n_users == 0 || self.n_pois == 0 || self.n_clusters == 0 || self.checkins_per_user == 0 || self.trip_len == 0 {
            return Err(Error::usage("synthetic config counts must all be positive"));
        }
        if self.n_pois < 2 * self.n_clusters {
            return Err(Error::usage("need at least two POIs per cluster"));
        }
        for (name, p) in [("group_rate", self.group_rate), ("in_cluster_prob", self.in_cluster_prob), ("favorite_prob", self.favorite_prob)] {
            if !(0.0..=1.0).contains(&p) {
                return Err(Error::usage(format!("{name} must lie in [0, 1]")));
            }
        }
        Ok(())
    }

    pub fn user_cluster(&self, user: usize) -> usize {
        user % self.n_clusters
    }

    pub fn poi_cluster(&self, poi: usize) -> usize {
        poi % self.n_clusters
    }
}

pub fn user_id(i: usize) -> String {
    format!("u{i:05}")
}

pub fn poi_id(i: usize) -> String {
    format!("p{i:05}")
}

pub fn generate_synthetic(config: &SynthConfig, seed: u64) -> Result<Dataset> {
    config.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let k = config.n_clusters;

    // POIs
    let mut pois = Vec::with_capacity(config.n_pois);
    for i in 0..config.n_pois {
        let c = config.poi_cluster(i);
        let center_lat = 40.70 + 0.06 * (c / 3) as f64;
        let center_lon = -74.00 + 0.08 * (c % 3) as f64;
        let theme = CATEGORY_PALETTE[c % CATEGORY_PALETTE.len()];
        let category = *theme.choose(&mut rng).expect("non-empty theme");
        let lat = center_lat + rng.random_range(-0.012..0.012);
        let lon = center_lon + rng.random_range(-0.015..0.015);
        pois.push(Poi {
            id: poi_id(i),
            name: format!("{category} {i}"),
            category: category.to_string(),
            lat: (lat * 1e6).round() / 1e6,
            lon: (lon * 1e6).round() / 1e6,
            address: Some(format!("{} {}", rng.random_range(1..400), STREETS.choose(&mut rng).unwrap())),
            description: (i % 4 != 0).then(|| format!("{category} in district {c}")),
        });
    }
    let cluster_pois: Vec<Vec<usize>> = (0..k).map(|c| (0..config.n_pois).filter(|&p| p % k == c).collect()).collect();
    let other_pois: Vec<Vec<usize>> = (0..k).map(|c| (0..config.n_pois).filter(|&p| p % k != c).collect()).collect();

    // favorites
    let favorites: Vec<Vec<usize>> = (0..config.n_users)
        .map(|u| {
            let pool = &cluster_pois[config.user_cluster(u)];
            let n = config.favorites_per_user.min(pool.len());
            pool.choose_multiple(&mut rng, n).copied().collect()
        })
        .collect();

    // social graph: dense inside clusters, sparse across
    let mut social = SocialGraph::new();
    for a in 0..config.n_users {
        for b in a + 1..config.n_users {
            let p = if config.user_cluster(a) == config.user_cluster(b) { 0.25 } else { 0.002 };
            if rng.random_bool(p) {
                social.add_edge(&user_id(a), &user_id(b));
            }
        }
    }

    // trips
    let n_trips = config.checkins_per_user.div_ceil(config.trip_len);
    let mut slots: Vec<Vec<(usize, i64)>> = Vec::with_capacity(config.n_users);
    for u in 0..config.n_users {
        let c = config.user_cluster(u);
        let mut rows = Vec::with_capacity(config.checkins_per_user);
        for trip in 0..n_trips {
            let start = BASE_TIME + trip as i64 * 8 * DAY + rng.random_range(0..12 * HOUR);
            let n = config.trip_len.min(config.checkins_per_user - trip * config.trip_len);
            let mut times: Vec<i64> = (0..n).map(|_| start + rng.random_range(0..48 * HOUR)).collect();
            times.sort_unstable();
            for t in times {
                let poi = if rng.random_bool(config.in_cluster_prob) {
                    if rng.random_bool(config.favorite_prob) {
                        *favorites[u].choose(&mut rng).unwrap()
                    } else {
                        *cluster_pois[c].choose(&mut rng).unwrap()
                    }
                } else {
                    *other_pois[c].choose(&mut rng).unwrap()
                };
                rows.push((poi, t));
            }
        }
        slots.push(rows);
    }

    // planted groups
    let n_groups = (config.group_rate * config.n_users as f64).round() as usize;
    let mut used: Vec<BTreeSet<usize>> = vec![BTreeSet::new(); config.n_users];
    for g in 0..n_groups {
        let c = g % k;
        let mut pool: Vec<usize> = (0..config.n_users).filter(|&u| config.user_cluster(u) == c).collect();
        if pool.len() < 2 {
            continue;
        }
        pool.shuffle(&mut rng);
        let size = rng.random_range(2..=4).min(pool.len());
        let members = &pool[..size];
        for (i, &a) in members.iter().enumerate() {
            for &b in &members[i + 1..] {
                social.add_edge(&user_id(a), &user_id(b));
            }
        }
        let n_events = rng.random_range(4..=10);
        for _ in 0..n_events {
            for _attempt in 0..20 {
                let trip = rng.random_range(0..n_trips);
                let slot = trip * config.trip_len + rng.random_range(0..config.trip_len);
                if slot >= config.checkins_per_user || members.iter().any(|&m| used[m].contains(&slot)) {
                    continue;
                }
                let poi = if rng.random_bool(config.in_cluster_prob) {
                    let m = *members.choose(&mut rng).unwrap();
                    *favorites[m].choose(&mut rng).unwrap()
                } else {
                    *cluster_pois[c].choose(&mut rng).unwrap()
                };
                let t = BASE_TIME + trip as i64 * 8 * DAY + rng.random_range(12 * HOUR..48 * HOUR);
                for &m in members {
                    used[m].insert(slot);
                    slots[m][slot] = (poi, t + rng.random_range(0..600));
                }
                break;
            }
        }
    }

    let mut checkins = Vec::with_capacity(config.n_users * config.checkins_per_user);
    for (u, rows) in slots.into_iter().enumerate() {
        let mut rows = rows;
        rows.sort_by_key(|&(p, t)| (t, p));
        for (poi, t) in rows {
            checkins.push(CheckIn {
                owner_id: user_id(u),
                owner_kind: OwnerKind::User,
                poi_id: poi_id(poi),
                timestamp: t,
            });
        }
    }
    Ok(Dataset {
        checkins,
        pois: PoiTable::new(pois)?,
        social,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::corpus::{build_sequences, mine_groups, split_by_gap};

    #[test]
    fn deterministic_given_seed() {
        let cfg = SynthConfig {
            n_users: 30,
            n_pois: 40,
            ..Default::default()
        };
        let a = generate_synthetic(&cfg, 7).unwrap();
        let b = generate_synthetic(&cfg, 7).unwrap();
        assert_eq!(a.checkins, b.checkins);
        assert_eq!(a.pois.as_slice(), b.pois.as_slice());
        assert_eq!(a.social, b.social);
        let c = generate_synthetic(&cfg, 8).unwrap();
        assert_ne!(a.checkins, c.checkins);
    }

    #[test]
    fn counts_and_planted_frequency() {
        let cfg = SynthConfig::default();
        let ds = generate_synthetic(&cfg, 3).unwrap();
        assert_eq!(ds.checkins.len(), 10_000);
        let in_cluster = ds
            .checkins
            .iter()
            .filter(|c| {
                let u: usize = c.owner_id[1..].parse().unwrap();
                let p: usize = c.poi_id[1..].parse().unwrap();
                cfg.user_cluster(u) == cfg.poi_cluster(p)
            })
            .count() as f64
            / ds.checkins.len() as f64;
        assert!((in_cluster - 0.8).abs() <= 0.05, "in-cluster frequency {in_cluster}");
    }

    #[test]
    fn trips_split_and_groups_are_mined() {
        let cfg = SynthConfig::default();
        let ds = generate_synthetic(&cfg, 11).unwrap();
        let seqs = build_sequences(&ds.checkins, &ds.pois, 200);
        let pieces = split_by_gap(&seqs[0], 5.0, &ds.pois);
        assert_eq!(pieces.len(), 10);
        let (groups, events) = mine_groups(&ds.checkins, &ds.social, 1800);
        assert!(groups.len() >= 30, "{} groups", groups.len());
        assert!(events.len() >= 150, "{} group check-ins", events.len());
    }

    #[test]
    fn zero_counts_are_usage_errors() {
        let cfg = SynthConfig {
            n_users: 0,
            ..Default::default()
        };
        assert_eq!(generate_synthetic(&cfg, 1).unwrap_err().exit_code(), 1);
    }
}

//! Brute-force re-implementations of the sequence protocol, checked
//! exhaustively against the library.

use llmgpr::corpus::{candidate_set, leave_one_out, split_by_gap, CheckInItem, OwnerKind, Poi, PoiTable, Sequence};
use llmgpr::training::prefix_targets;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use std::collections::BTreeSet;

const DAY: i64 = 86_400;
const GAP_DAYS: f64 = 5.0;

/// POIs scattered at random so no two distances from an anchor tie.
pub fn scattered_pois(n: usize, seed: u64) -> PoiTable {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    PoiTable::new(
        (0..n)
            .map(|i| Poi {
                id: format!("q{i:02}"),
                name: format!("q{i}"),
                category: "Park".into(),
                lat: 40.6 + rng.random_range(0.0..0.2),
                lon: -74.1 + rng.random_range(0.0..0.2),
                address: None,
                description: None,
            })
            .collect(),
    )
    .unwrap()
}

/// Gaps of one hour, exactly the split threshold, or above it, chosen from the item.
fn timestamps(pois: &[usize]) -> Vec<i64> {
    let mut t = 0;
    pois.iter()
        .enumerate()
        .map(|(i, &p)| {
            if i > 0 {
                t += match (p + i) % 4 {
                    0 => 6 * DAY,
                    1 => 5 * DAY,
                    _ => 3600,
                };
            }
            t
        })
        .collect()
}

fn items_of(seq: &Sequence) -> Vec<(usize, i64)> {
    seq.items.iter().map(|i| (i.poi, i.timestamp)).collect()
}

fn check_one(table: &PoiTable, pois: &[usize]) -> Result<(), String> {
    let ts = timestamps(pois);
    let raw: Vec<(usize, i64)> = pois.iter().copied().zip(ts.iter().copied()).collect();
    let items: Vec<CheckInItem> = raw.iter().map(|&(poi, timestamp)| CheckInItem { poi, timestamp }).collect();
    let seq = Sequence::from_items("s", OwnerKind::User, items, table);
    let m = raw.len();

    // prefix/target pairs
    let got: Vec<(Vec<(usize, i64)>, (usize, i64))> = prefix_targets(&seq)
        .iter()
        .map(|pt| (items_of(&pt.prefix), (pt.target.poi, pt.target.timestamp)))
        .collect();
    let mut want = Vec::new();
    for k in 1..m {
        want.push((raw[..k].to_vec(), raw[k]));
    }
    if got != want {
        return Err(format!("prefix_targets mismatch on {pois:?}"));
    }

    // leave-one-out
    let loo = leave_one_out(&seq);
    match (m >= 3, loo) {
        (false, None) => {}
        (true, Some(l)) => {
            let ok = items_of(&l.train) == raw[..m - 2]
                && items_of(&l.validation.prefix) == raw[..m - 2]
                && (l.validation.target.poi, l.validation.target.timestamp) == raw[m - 2]
                && items_of(&l.test.prefix) == raw[..m - 1]
                && (l.test.target.poi, l.test.target.timestamp) == raw[m - 1];
            if !ok {
                return Err(format!("leave_one_out mismatch on {pois:?}"));
            }
        }
        _ => return Err(format!("leave_one_out applicability wrong for length {m}")),
    }

    // gap split: a piece ends wherever the next gap is strictly above the threshold
    let mut want_pieces: Vec<Vec<(usize, i64)>> = vec![vec![raw[0]]];
    for k in 1..m {
        if (raw[k].1 - raw[k - 1].1) as f64 > GAP_DAYS * DAY as f64 {
            want_pieces.push(Vec::new());
        }
        want_pieces.last_mut().unwrap().push(raw[k]);
    }
    let pieces = split_by_gap(&seq, GAP_DAYS, table);
    let got_pieces: Vec<Vec<(usize, i64)>> = pieces.iter().map(items_of).collect();
    if got_pieces != want_pieces {
        return Err(format!("split_by_gap mismatch on {pois:?}"));
    }
    for p in &pieces {
        let deltas: Vec<i64> = (0..p.len()).map(|k| if k == 0 { 0 } else { p.items[k].timestamp - p.items[k - 1].timestamp }).collect();
        if p.temporal_deltas != deltas || p.spatial_deltas[0] != 0.0 {
            return Err(format!("split_by_gap deltas not recomputed on {pois:?}"));
        }
    }
    Ok(())
}

/// Every POI sequence of length `1..=max_len` over `n_pois` POIs.
pub fn check_sequences(max_len: usize, n_pois: usize) -> Result<usize, String> {
    let table = scattered_pois(n_pois, 1);
    let mut count = 0;
    for len in 1..=max_len {
        let mut digits = vec![0usize; len];
        loop {
            check_one(&table, &digits)?;
            count += 1;
            // odometer increment
            let mut i = 0;
            while i < len {
                digits[i] += 1;
                if digits[i] < n_pois {
                    break;
                }
                digits[i] = 0;
                i += 1;
            }
            if i == len {
                break;
            }
        }
    }
    Ok(count)
}

fn haversine(a: &Poi, b: &Poi) -> f64 {
    let r = 6371.0;
    let (p1, p2) = (a.lat.to_radians(), b.lat.to_radians());
    let (dp, dl) = ((b.lat - a.lat).to_radians(), (b.lon - a.lon).to_radians());
    let h = (dp / 2.0).sin().powi(2) + p1.cos() * p2.cos() * (dl / 2.0).sin().powi(2);
    2.0 * r * h.sqrt().asin()
}

/// Every anchor and every visited set of at most `max_visited` POIs, for several `h`.
pub fn check_candidates(max_visited: usize, n_pois: usize) -> Result<usize, String> {
    let table = scattered_pois(n_pois, 2);
    let all = table.as_slice();
    let mut count = 0;
    for mask in 0u32..(1 << n_pois) {
        if mask.count_ones() as usize > max_visited {
            continue;
        }
        let visited: BTreeSet<usize> = (0..n_pois).filter(|i| mask & (1 << i) != 0).collect();
        for anchor in 0..n_pois {
            let mut order: Vec<usize> = (0..n_pois).filter(|i| !visited.contains(i)).collect();
            order.sort_by(|&a, &b| haversine(&all[anchor], &all[a]).total_cmp(&haversine(&all[anchor], &all[b])));
            for h in [1, 3, n_pois / 2, n_pois, 500] {
                let want: Vec<usize> = order.iter().copied().take(h).collect();
                if candidate_set(&table, anchor, &visited, h) != want {
                    return Err(format!("candidate_set mismatch: anchor {anchor}, visited {visited:?}, h {h}"));
                }
                count += 1;
            }
        }
    }
    Ok(count)
}

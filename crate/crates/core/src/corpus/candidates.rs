use std::collections::BTreeSet;

use super::PoiTable;

/// The `h` POIs nearest to `anchor` that the owner has not visited, ordered by
/// ascending haversine distance (ties by POI id).
pub fn candidate_set(pois: &PoiTable, anchor: usize, visited: &BTreeSet<usize>, h: usize) -> Vec<usize> {
    let mut scored: Vec<(f64, usize)> = (0..pois.len())
        .filter(|i| !visited.contains(i))
        .map(|i| (pois.distance_km(anchor, i), i))
        .collect();
    let by_distance = |a: &(f64, usize), b: &(f64, usize)| {
        a.0.total_cmp(&b.0).then_with(|| pois.get(a.1).id.cmp(&pois.get(b.1).id))
    };
    if scored.len() > h && h > 0 {
        scored.select_nth_unstable_by(h - 1, by_distance);
        scored.truncate(h);
    }
    scored.sort_by(by_distance);
    scored.truncate(h);
    scored.into_iter().map(|(_, i)| i).collect()
}

/// Appends the ground truth unless it is already a candidate.
pub fn with_target(mut candidates: Vec<usize>, target: usize) -> Vec<usize> {
    if !candidates.contains(&target) {
        candidates.push(target);
    }
    candidates
}

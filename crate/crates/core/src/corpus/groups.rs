use std::collections::{BTreeMap, BTreeSet};

use sha2::{Digest, Sha256};

use super::{CheckIn, Group, OwnerKind, SocialGraph};

/// Co-presence window used when none is configured: half an hour.
pub const DEFAULT_WINDOW_SECONDS: i64 = 1800;

/// Stable group identifier derived from the sorted member ids.
pub fn group_id_for(sorted_members: &[String]) -> String {
    let mut h = Sha256::new();
    for m in sorted_members {
        h.update(m.as_bytes());
        h.update([0x1f]);
    }
    format!("g_{}", &hex::encode(h.finalize())[..16])
}

/// Mines groups from co-visits of socially connected users.
///
/// Check-ins at one POI are scanned in time order. A window opens at the
/// earliest unassigned check-in and covers everything within `window_seconds`
/// of it. Inside a window every maximal clique (size >= 2) of the social
/// subgraph induced by the visitors becomes one group check-in, stamped with
/// the earliest member timestamp. Member sets that recur across events share
/// one group id.
pub fn mine_groups(checkins: &[CheckIn], social: &SocialGraph, window_seconds: i64) -> (Vec<Group>, Vec<CheckIn>) {
    let mut by_poi: BTreeMap<&str, Vec<(i64, &str)>> = BTreeMap::new();
    for c in checkins.iter().filter(|c| c.owner_kind == OwnerKind::User) {
        by_poi.entry(c.poi_id.as_str()).or_default().push((c.timestamp, c.owner_id.as_str()));
    }

    let mut groups: BTreeMap<Vec<String>, String> = BTreeMap::new();
    let mut events: BTreeSet<CheckIn> = BTreeSet::new();
    if social.is_empty() {
        return (Vec::new(), Vec::new());
    }

    for (poi, mut visits) in by_poi {
        visits.sort_unstable();
        let mut start = 0;
        while start < visits.len() {
            let t0 = visits[start].0;
            let mut end = start;
            while end < visits.len() && visits[end].0 - t0 <= window_seconds {
                end += 1;
            }
            // earliest timestamp per visitor inside the window
            let mut first_seen: BTreeMap<&str, i64> = BTreeMap::new();
            for &(t, u) in &visits[start..end] {
                first_seen.entry(u).or_insert(t);
            }
            let users: Vec<&str> = first_seen.keys().copied().collect();
            for clique in maximal_cliques(&users, social) {
                let members: Vec<String> = clique.iter().map(|u| u.to_string()).collect();
                let ts = clique.iter().map(|u| first_seen[u]).min().unwrap_or(t0);
                let id = groups
                    .entry(members.clone())
                    .or_insert_with(|| group_id_for(&members))
                    .clone();
                events.insert(CheckIn {
                    owner_id: id,
                    owner_kind: OwnerKind::Group,
                    poi_id: poi.to_string(),
                    timestamp: ts,
                });
            }
            start = end;
        }
    }

    let mut out: Vec<Group> = groups
        .into_iter()
        .map(|(member_ids, id)| Group { id, member_ids })
        .collect();
    out.sort();
    let mut group_checkins: Vec<CheckIn> = events.into_iter().collect();
    group_checkins.sort_by(|a, b| (&a.owner_id, a.timestamp, &a.poi_id).cmp(&(&b.owner_id, b.timestamp, &b.poi_id)));
    (out, group_checkins)
}

/// Maximal cliques of size >= 2 (Bron-Kerbosch with pivoting). Output cliques
/// are sorted internally and listed in lexicographic order.
fn maximal_cliques<'a>(users: &[&'a str], social: &SocialGraph) -> Vec<Vec<&'a str>> {
    let n = users.len();
    let adj: Vec<BTreeSet<usize>> = (0..n)
        .map(|i| (0..n).filter(|&j| j != i && social.connected(users[i], users[j])).collect())
        .collect();
    let mut out = Vec::new();
    let candidates: BTreeSet<usize> = (0..n).filter(|&i| !adj[i].is_empty()).collect();
    bron_kerbosch(&adj, Vec::new(), candidates, BTreeSet::new(), &mut out);
    let mut cliques: Vec<Vec<&str>> = out
        .into_iter()
        .filter(|c| c.len() >= 2)
        .map(|c| {
            let mut names: Vec<&str> = c.into_iter().map(|i| users[i]).collect();
            names.sort_unstable();
            names
        })
        .collect();
    cliques.sort();
    cliques
}

fn bron_kerbosch(
    adj: &[BTreeSet<usize>],
    r: Vec<usize>,
    mut p: BTreeSet<usize>,
    mut x: BTreeSet<usize>,
    out: &mut Vec<Vec<usize>>,
) {
    if p.is_empty() && x.is_empty() {
        out.push(r);
        return;
    }
    let pivot = p.iter().chain(x.iter()).max_by_key(|&&u| adj[u].intersection(&p).count()).copied();
    let Some(pivot) = pivot else { return };
    let todo: Vec<usize> = p.difference(&adj[pivot]).copied().collect();
    for v in todo {
        let mut r2 = r.clone();
        r2.push(v);
        let p2 = p.intersection(&adj[v]).copied().collect();
        let x2 = x.intersection(&adj[v]).copied().collect();
        bron_kerbosch(adj, r2, p2, x2, out);
        p.remove(&v);
        x.insert(v);
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn ci(u: &str, p: &str, t: i64) -> CheckIn {
        CheckIn {
            owner_id: u.into(),
            owner_kind: OwnerKind::User,
            poi_id: p.into(),
            timestamp: t,
        }
    }

    fn linked(pairs: &[(&str, &str)]) -> SocialGraph {
        let mut g = SocialGraph::new();
        for (a, b) in pairs {
            g.add_edge(a, b);
        }
        g
    }

    #[test]
    fn linked_users_at_same_place_form_a_group() {
        let rows = vec![ci("u1", "p1", 100), ci("u2", "p1", 110)];
        let (groups, events) = mine_groups(&rows, &linked(&[("u1", "u2")]), 1800);
        assert_eq!(groups.len(), 1);
        assert_eq!(groups[0].member_ids, vec!["u1".to_string(), "u2".to_string()]);
        assert_eq!(events.len(), 1);
        assert_eq!((events[0].poi_id.as_str(), events[0].timestamp), ("p1", 100));
        assert_eq!(events[0].owner_id, groups[0].id);
        assert_eq!(events[0].owner_kind, OwnerKind::Group);
    }

    #[test]
    fn strangers_do_not_form_groups() {
        let rows = vec![ci("u1", "p1", 100), ci("u2", "p1", 110)];
        let (groups, events) = mine_groups(&rows, &linked(&[("u1", "u3")]), 1800);
        assert!(groups.is_empty() && events.is_empty());
        let (groups, _) = mine_groups(&rows, &SocialGraph::new(), 1800);
        assert!(groups.is_empty());
    }

    #[test]
    fn visits_outside_window_do_not_form_groups() {
        let rows = vec![ci("u1", "p1", 100), ci("u2", "p1", 100 + 7200)];
        let (groups, _) = mine_groups(&rows, &linked(&[("u1", "u2")]), 1800);
        assert!(groups.is_empty());
    }

    #[test]
    fn repeated_member_sets_share_an_id_and_cliques_are_maximal() {
        let rows = vec![
            ci("a", "p1", 100),
            ci("b", "p1", 200),
            ci("c", "p1", 300),
            ci("a", "p2", 10_000),
            ci("b", "p2", 10_050),
            ci("c", "p2", 10_020),
        ];
        let g = linked(&[("a", "b"), ("b", "c"), ("a", "c")]);
        let (groups, events) = mine_groups(&rows, &g, 1800);
        assert_eq!(groups.len(), 1);
        assert_eq!(groups[0].member_ids.len(), 3);
        assert_eq!(events.len(), 2);
        assert_eq!(events[1].timestamp, 10_000);

        // path a-b-c without a-c: two maximal cliques {a,b} and {b,c}
        let g = linked(&[("a", "b"), ("b", "c")]);
        let (groups, events) = mine_groups(&rows[..3], &g, 1800);
        assert_eq!(groups.len(), 2);
        assert_eq!(events.len(), 2);
    }

    proptest! {
        #[test]
        fn permutation_invariant_and_min_timestamp(
            rows in prop::collection::vec((0u8..5, 0u8..3, 1i64..5000), 1..30),
            seed in any::<u64>(),
        ) {
            let checkins: Vec<CheckIn> = rows
                .iter()
                .map(|(u, p, t)| ci(&format!("u{u}"), &format!("p{p}"), *t))
                .collect();
            let social = linked(&[("u0", "u1"), ("u1", "u2"), ("u0", "u2"), ("u3", "u4"), ("u2", "u3")]);
            let (g1, e1) = mine_groups(&checkins, &social, 1800);

            let mut shuffled = checkins.clone();
            use rand::{seq::SliceRandom, SeedableRng};
            shuffled.shuffle(&mut rand_chacha::ChaCha8Rng::seed_from_u64(seed));
            let (g2, e2) = mine_groups(&shuffled, &social, 1800);
            prop_assert_eq!(&g1, &g2);
            prop_assert_eq!(&e1, &e2);

            // each group check-in carries the earliest timestamp among its members' visits there
            for e in &e1 {
                let group = g1.iter().find(|g| g.id == e.owner_id).unwrap();
                let member_times: Vec<i64> = checkins
                    .iter()
                    .filter(|c| c.poi_id == e.poi_id && group.member_ids.contains(&c.owner_id))
                    .map(|c| c.timestamp)
                    .filter(|&t| t >= e.timestamp && t - e.timestamp <= 1800)
                    .collect();
                prop_assert_eq!(member_times.iter().copied().min(), Some(e.timestamp));
            }
        }
    }
}

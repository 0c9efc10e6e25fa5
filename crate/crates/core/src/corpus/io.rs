use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use super::{CheckIn, Dataset, Group, OwnerKind, Poi, PoiTable, SocialGraph};
use crate::error::{Error, Result};

/// Rows skipped during ingestion because they could not be parsed.
#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct LoadReport {
    pub checkins: usize,
    pub pois: usize,
    pub social_edges: usize,
    pub malformed: Vec<String>,
}

fn read_file(path: &Path) -> Result<String> {
    if !path.exists() {
        return Err(Error::data(format!("missing input file {}", path.display())));
    }
    fs::read_to_string(path).map_err(|e| Error::io(path, e))
}

fn file_label(path: &Path) -> String {
    path.file_name()
        .map(|n| n.to_string_lossy().into_owned())
        .unwrap_or_else(|| path.display().to_string())
}

fn non_empty(s: &str) -> Option<String> {
    let s = s.trim();
    (!s.is_empty()).then(|| s.to_string())
}

/// Reads `owner_id<TAB>poi_id<TAB>timestamp` rows.
pub(crate) fn parse_checkins(
    text: &str,
    label: &str,
    kind: OwnerKind,
    malformed: &mut Vec<String>,
) -> Result<Vec<CheckIn>> {
    let mut out = Vec::new();
    for (lineno, line) in text.lines().enumerate().map(|(i, l)| (i + 1, l)) {
        if line.trim().is_empty() {
            continue;
        }
        let fields: Vec<&str> = line.split('\t').collect();
        if fields.len() != 3 {
            malformed.push(format!("{label} line {lineno}: expected 3 fields, found {}", fields.len()));
            continue;
        }
        let Ok(timestamp) = fields[2].trim().parse::<i64>() else {
            malformed.push(format!("{label} line {lineno}: unparsable timestamp {:?}", fields[2]));
            continue;
        };
        if timestamp <= 0 {
            return Err(Error::data(format!(
                "{label} line {lineno}: timestamp {timestamp} must be positive"
            )));
        }
        out.push(CheckIn {
            owner_id: fields[0].trim().to_string(),
            owner_kind: kind,
            poi_id: fields[1].trim().to_string(),
            timestamp,
        });
    }
    Ok(out)
}

fn parse_pois(text: &str, label: &str, malformed: &mut Vec<String>) -> Result<Vec<Poi>> {
    let mut out = Vec::new();
    for (lineno, line) in text.lines().enumerate().map(|(i, l)| (i + 1, l)) {
        if line.trim().is_empty() {
            continue;
        }
        let fields: Vec<&str> = line.split('\t').collect();
        if !(5..=7).contains(&fields.len()) {
            malformed.push(format!("{label} line {lineno}: expected 5 to 7 fields, found {}", fields.len()));
            continue;
        }
        let (Ok(lat), Ok(lon)) = (fields[3].trim().parse::<f64>(), fields[4].trim().parse::<f64>()) else {
            malformed.push(format!("{label} line {lineno}: unparsable coordinates"));
            continue;
        };
        let poi = Poi {
            id: fields[0].trim().to_string(),
            name: fields[1].trim().to_string(),
            category: fields[2].trim().to_string(),
            lat,
            lon,
            address: fields.get(5).and_then(|s| non_empty(s)),
            description: fields.get(6).and_then(|s| non_empty(s)),
        };
        super::validate_poi(&poi).map_err(|e| Error::data(format!("{label} line {lineno}: {e}")))?;
        out.push(poi);
    }
    Ok(out)
}

fn parse_social(text: &str, label: &str, malformed: &mut Vec<String>) -> SocialGraph {
    let mut graph = SocialGraph::new();
    for (lineno, line) in text.lines().enumerate().map(|(i, l)| (i + 1, l)) {
        if line.trim().is_empty() {
            continue;
        }
        let fields: Vec<&str> = line.split('\t').map(str::trim).collect();
        if fields.len() != 2 || fields[0].is_empty() || fields[1].is_empty() {
            malformed.push(format!("{label} line {lineno}: expected 2 user ids"));
            continue;
        }
        if fields[0] == fields[1] {
            malformed.push(format!("{label} line {lineno}: self edge ignored"));
            continue;
        }
        graph.add_edge(fields[0], fields[1]);
    }
    graph
}

pub(crate) fn check_refs(checkins: &[CheckIn], pois: &PoiTable, label: &str) -> Result<()> {
    let bad: Vec<String> = checkins
        .iter()
        .enumerate()
        .filter(|(_, c)| pois.index_of(&c.poi_id).is_none())
        .map(|(i, c)| format!("row {} (poi {:?})", i + 1, c.poi_id))
        .collect();
    if bad.is_empty() {
        return Ok(());
    }
    let shown: Vec<&str> = bad.iter().take(10).map(String::as_str).collect();
    Err(Error::data(format!(
        "{label}: {} check-ins reference unknown POIs: {}{}",
        bad.len(),
        shown.join(", "),
        if bad.len() > shown.len() { ", ..." } else { "" }
    )))
}

/// Loads check-ins (all owned by users), POIs and the social graph.
pub fn load_dataset(checkins_path: &Path, pois_path: &Path, social_path: &Path) -> Result<(Dataset, LoadReport)> {
    let mut malformed = Vec::new();
    let poi_text = read_file(pois_path)?;
    let checkin_text = read_file(checkins_path)?;
    let social_text = read_file(social_path)?;

    let pois = PoiTable::new(parse_pois(&poi_text, &file_label(pois_path), &mut malformed)?)?;
    let label = file_label(checkins_path);
    let checkins = parse_checkins(&checkin_text, &label, OwnerKind::User, &mut malformed)?;
    check_refs(&checkins, &pois, &label)?;
    let social = parse_social(&social_text, &file_label(social_path), &mut malformed);

    for m in &malformed {
        log::warn!("skipped malformed row: {m}");
    }
    let report = LoadReport {
        checkins: checkins.len(),
        pois: pois.len(),
        social_edges: social.len(),
        malformed,
    };
    Ok((Dataset { checkins, pois, social }, report))
}

/// Reads a check-in file whose rows all belong to owners of `kind`.
pub fn read_checkins(path: &Path, kind: OwnerKind, pois: &PoiTable) -> Result<Vec<CheckIn>> {
    let text = read_file(path)?;
    let label = file_label(path);
    let mut malformed = Vec::new();
    let rows = parse_checkins(&text, &label, kind, &mut malformed)?;
    if !malformed.is_empty() {
        return Err(Error::data(malformed.join("; ")));
    }
    check_refs(&rows, pois, &label)?;
    Ok(rows)
}

/// Reads `group_id<TAB>member_1,member_2,...`.
pub fn read_groups(path: &Path) -> Result<Vec<Group>> {
    let text = read_file(path)?;
    let mut out = Vec::new();
    for (lineno, line) in text.lines().enumerate().map(|(i, l)| (i + 1, l)) {
        if line.trim().is_empty() {
            continue;
        }
        let Some((id, members)) = line.split_once('\t') else {
            return Err(Error::data(format!("{} line {lineno}: expected 2 fields", path.display())));
        };
        let mut member_ids: Vec<String> = members.split(',').map(|m| m.trim().to_string()).collect();
        member_ids.sort();
        member_ids.dedup();
        if member_ids.len() < 2 || member_ids.iter().any(String::is_empty) {
            return Err(Error::data(format!(
                "{} line {lineno}: a group needs at least 2 distinct members",
                path.display()
            )));
        }
        out.push(Group {
            id: id.trim().to_string(),
            member_ids,
        });
    }
    Ok(out)
}

fn write_text(path: &Path, text: &str) -> Result<()> {
    if let Some(parent) = path.parent() {
        fs::create_dir_all(parent).map_err(|e| Error::io(parent, e))?;
    }
    fs::write(path, text).map_err(|e| Error::io(path, e))
}

pub fn write_checkins(path: &Path, checkins: &[CheckIn]) -> Result<()> {
    let mut s = String::new();
    for c in checkins {
        let _ = writeln!(s, "{}\t{}\t{}", c.owner_id, c.poi_id, c.timestamp);
    }
    write_text(path, &s)
}

pub fn write_pois(path: &Path, pois: &PoiTable) -> Result<()> {
    let mut s = String::new();
    for p in pois.iter() {
        let _ = writeln!(
            s,
            "{}\t{}\t{}\t{}\t{}\t{}\t{}",
            p.id,
            p.name,
            p.category,
            p.lat,
            p.lon,
            p.address.as_deref().unwrap_or(""),
            p.description.as_deref().unwrap_or("")
        );
    }
    write_text(path, &s)
}

pub fn write_social(path: &Path, social: &SocialGraph) -> Result<()> {
    let mut s = String::new();
    for (a, b) in social.edges() {
        let _ = writeln!(s, "{a}\t{b}");
    }
    write_text(path, &s)
}

pub fn write_groups(path: &Path, groups: &[Group]) -> Result<()> {
    let mut s = String::new();
    for g in groups {
        let _ = writeln!(s, "{}\t{}", g.id, g.member_ids.join(","));
    }
    write_text(path, &s)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn write(dir: &Path, name: &str, body: &str) -> std::path::PathBuf {
        let p = dir.join(name);
        fs::write(&p, body).unwrap();
        p
    }

    #[test]
    fn loads_small_tables() {
        let dir = tempfile::tempdir().unwrap();
        let c = write(dir.path(), "checkins.tsv", "u1\tp1\t100\nu2\tp1\t110\nu1\tp2\t5000\n");
        let p = write(
            dir.path(),
            "pois.tsv",
            "p1\tJoe's\tCafe\t40.7\t-74.0\t1 Main St\t\np2\tBig Mall\tMall\t40.71\t-74.01\t\t\n",
        );
        let s = write(dir.path(), "social.tsv", "u1\tu2\n");
        let (ds, report) = load_dataset(&c, &p, &s).unwrap();
        assert_eq!((ds.checkins.len(), ds.pois.len(), ds.social.len()), (3, 2, 1));
        assert!(report.malformed.is_empty());
        assert_eq!(ds.pois.get(0).address.as_deref(), Some("1 Main St"));
        assert_eq!(ds.pois.get(0).description, None);
    }

    #[test]
    fn latitude_out_of_range_names_the_row() {
        let dir = tempfile::tempdir().unwrap();
        let c = write(dir.path(), "checkins.tsv", "u1\tp1\t100\n");
        let p = write(dir.path(), "pois.tsv", "p1\ta\tb\t40\t-74\t\t\np2\ta\tb\t91\t-74\t\t\n");
        let s = write(dir.path(), "social.tsv", "");
        let err = load_dataset(&c, &p, &s).unwrap_err();
        assert_eq!(err.exit_code(), 2);
        assert!(err.to_string().contains("line 2"), "{err}");
    }

    #[test]
    fn duplicate_poi_and_unknown_reference_are_data_errors() {
        let dir = tempfile::tempdir().unwrap();
        let c = write(dir.path(), "checkins.tsv", "u1\tp9\t100\n");
        let p = write(dir.path(), "pois.tsv", "p1\ta\tb\t40\t-74\n");
        let s = write(dir.path(), "social.tsv", "");
        let err = load_dataset(&c, &p, &s).unwrap_err();
        assert!(err.to_string().contains("p9"), "{err}");

        let p = write(dir.path(), "pois.tsv", "p1\ta\tb\t40\t-74\np1\ta\tb\t41\t-74\n");
        let err = load_dataset(&c, &p, &s).unwrap_err();
        assert!(err.to_string().contains("duplicate id"));
    }

    #[test]
    fn missing_file_and_malformed_rows() {
        let dir = tempfile::tempdir().unwrap();
        let c = write(dir.path(), "checkins.tsv", "u1\tp1\t100\nbroken row\nu1\tp1\tnot-a-time\n");
        let p = write(dir.path(), "pois.tsv", "p1\ta\tb\t40\t-74\n");
        let err = load_dataset(&c, &p, &dir.path().join("nope.tsv")).unwrap_err();
        assert!(matches!(err, Error::Data(_)));
        let s = write(dir.path(), "social.tsv", "");
        let (ds, report) = load_dataset(&c, &p, &s).unwrap();
        assert_eq!(ds.checkins.len(), 1);
        assert_eq!(report.malformed.len(), 2);
    }
}

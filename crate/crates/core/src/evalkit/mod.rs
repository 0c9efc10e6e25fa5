//! Ranking metrics, the leave-one-out evaluation driver, cold-start holdouts
//! and ablation variants.

mod sweep;

pub use sweep::{sweep, sweep_tsv, write_sweep_tsv, SweepParam, SweepRow, ALPHA_GRID, RANK_GRID};

use std::collections::{BTreeMap, BTreeSet};
use std::fmt;
use std::fs;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::corpus::{candidate_set, with_target, DatasetSplit, LooSplit, OwnerKind, PoiTable, Sequence};
use crate::error::{Error, Result};
use crate::grouprep::{aggregate_members, fuse, score_candidates, Encoder};
use crate::seqmodel::PoiStyle;
use crate::tensor::{Matrix, Vector};
use crate::training::ModelBundle;

pub const DEFAULT_H: usize = 500;
pub const DEFAULT_KS: [usize; 2] = [5, 10];
pub const DEFAULT_COLD_START_MAX: usize = 10;
pub const COLD_START_CAP: usize = 200;

pub fn hr_at_k(rank: usize, k: usize) -> f64 {
    if rank >= 1 && rank <= k {
        1.0
    } else {
        0.0
    }
}

pub fn ndcg_at_k(rank: usize, k: usize) -> f64 {
    if rank >= 1 && rank <= k {
        1.0 / ((rank + 1) as f64).log2()
    } else {
        0.0
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RankRecord {
    pub owner_id: String,
    pub target: String,
    pub rank: usize,
    pub n_candidates: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    pub ks: Vec<usize>,
    pub hr: Vec<f64>,
    pub ndcg: Vec<f64>,
    pub n_evaluated: usize,
    pub ranks: Vec<RankRecord>,
}

impl MetricsReport {
    pub fn from_ranks(ranks: Vec<RankRecord>, ks: &[usize]) -> Self {
        let n = ranks.len();
        let mean = |f: &dyn Fn(usize, usize) -> f64, k: usize| {
            if n == 0 {
                0.0
            } else {
                ranks.iter().map(|r| f(r.rank, k)).sum::<f64>() / n as f64
            }
        };
        Self {
            ks: ks.to_vec(),
            hr: ks.iter().map(|&k| mean(&hr_at_k, k)).collect(),
            ndcg: ks.iter().map(|&k| mean(&ndcg_at_k, k)).collect(),
            n_evaluated: n,
            ranks,
        }
    }

    pub fn hr(&self, k: usize) -> Option<f64> {
        self.ks.iter().position(|&x| x == k).map(|i| self.hr[i])
    }

    pub fn ndcg(&self, k: usize) -> Option<f64> {
        self.ks.iter().position(|&x| x == k).map(|i| self.ndcg[i])
    }
}

/// Switches selecting the ablation variants.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct AblationFlags {
    pub use_sequencing_adapter: bool,
    pub use_extended_poi_tokens: bool,
    pub use_aggregation_fusion: bool,
    pub use_ssl_pretraining: bool,
}

impl Default for AblationFlags {
    fn default() -> Self {
        Self {
            use_sequencing_adapter: true,
            use_extended_poi_tokens: true,
            use_aggregation_fusion: true,
            use_ssl_pretraining: true,
        }
    }
}

pub const FLAG_NAMES: [&str; 4] = ["seq", "tokens", "fusion", "ssl"];

impl AblationFlags {
    /// Parses `name=on|off` pairs separated by commas, e.g. `ssl=off,fusion=off`.
    pub fn parse(spec: &str) -> Result<Self> {
        let mut flags = Self::default();
        for part in spec.split(',').map(str::trim).filter(|p| !p.is_empty()) {
            let (name, value) = part
                .split_once('=')
                .ok_or_else(|| Error::usage(format!("flag {part:?} is not of the form name=on|off")))?;
            let on = match value.trim() {
                "on" | "true" | "1" => true,
                "off" | "false" | "0" => false,
                v => return Err(Error::usage(format!("flag value {v:?} must be on or off"))),
            };
            match name.trim() {
                "seq" => flags.use_sequencing_adapter = on,
                "tokens" => flags.use_extended_poi_tokens = on,
                "fusion" => flags.use_aggregation_fusion = on,
                "ssl" => flags.use_ssl_pretraining = on,
                n => return Err(Error::usage(format!("unknown flag {n:?}; expected one of {}", FLAG_NAMES.join(", ")))),
            }
        }
        Ok(flags)
    }

    pub fn variant_name(&self) -> String {
        let mut parts = vec!["LLMGPR".to_string()];
        match (self.use_sequencing_adapter, self.use_extended_poi_tokens) {
            (false, false) => parts.push("FT".into()),
            (true, false) => parts.push("M".into()),
            (false, true) => parts.push("NOSEQ".into()),
            (true, true) => {}
        }
        if !self.use_aggregation_fusion {
            parts.push("ER".into());
        }
        if !self.use_ssl_pretraining {
            parts.push("SSL".into());
        }
        parts.join("-")
    }

    pub fn style(&self) -> PoiStyle {
        if self.use_extended_poi_tokens {
            PoiStyle::Token
        } else {
            PoiStyle::Text
        }
    }
}

impl fmt::Display for AblationFlags {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let s = |b: bool| if b { "on" } else { "off" };
        write!(
            f,
            "seq={},tokens={},fusion={},ssl={}",
            s(self.use_sequencing_adapter),
            s(self.use_extended_poi_tokens),
            s(self.use_aggregation_fusion),
            s(self.use_ssl_pretraining)
        )
    }
}

/// Prefix embeddings of every user sequence, for member contexts at any cutoff.
#[derive(Debug, Clone, Default)]
pub struct MemberCache {
    users: BTreeMap<String, (Vec<i64>, Matrix)>,
}

impl MemberCache {
    pub fn build<'s>(enc: &Encoder, user_sequences: impl IntoIterator<Item = &'s Sequence>) -> Result<Self> {
        let mut users = BTreeMap::new();
        for seq in user_sequences {
            if seq.is_empty() {
                continue;
            }
            let fitted = enc.fit(seq)?;
            let emb = enc.encode_prefixes(&fitted)?;
            users.insert(seq.owner_id.clone(), (fitted.items.iter().map(|i| i.timestamp).collect(), emb));
        }
        Ok(Self { users })
    }

    /// Embedding of `user`'s check-ins strictly before `t`.
    pub fn before(&self, user: &str, t: i64) -> Option<Vector> {
        let (ts, emb) = self.users.get(user)?;
        let n = ts.partition_point(|&x| x < t);
        (n > 0).then(|| emb.row(n - 1).to_owned())
    }

    /// Member rows with any history before `t`; `None` if no member has any.
    pub fn context(&self, members: &[String], t: i64) -> Option<Matrix> {
        let rows: Vec<Vector> = members.iter().filter_map(|m| self.before(m, t)).collect();
        (!rows.is_empty()).then(|| crate::grouprep::stack(&rows))
    }
}

/// One ranking query: a prefix embedding and the item to find.
#[derive(Debug, Clone)]
pub struct Query {
    pub owner_id: String,
    pub owner_kind: OwnerKind,
    pub embedding: Vector,
    pub anchor: usize,
    pub visited: BTreeSet<usize>,
    pub target: usize,
    pub target_ts: i64,
}

pub fn candidates_for(pois: &PoiTable, q: &Query, h: usize) -> Vec<usize> {
    with_target(candidate_set(pois, q.anchor, &q.visited, h), q.target)
}

/// Ground-truth rank of the query target among its candidates under `emb_table`.
pub fn rank_query(pois: &PoiTable, emb_table: &Matrix, embedding: &Vector, q: &Query, h: usize) -> Result<RankRecord> {
    let cands = candidates_for(pois, q, h);
    let scores = score_candidates(embedding, emb_table, &cands)?;
    Ok(RankRecord {
        owner_id: q.owner_id.clone(),
        target: pois.get(q.target).id.clone(),
        rank: scores.rank_of(q.target).expect("target is always a candidate"),
        n_candidates: cands.len(),
    })
}

/// Validation and test queries of one sequence from a single causal pass.
pub fn loo_queries(enc: &Encoder, loo: &LooSplit) -> Result<(Query, Query)> {
    let fitted = enc.fit(&loo.test.prefix)?;
    let emb = enc.encode_prefixes(&fitted)?;
    let n = fitted.len();
    let make = |prefix: &Sequence, row: usize, target: crate::corpus::CheckInItem| Query {
        owner_id: prefix.owner_id.clone(),
        owner_kind: prefix.owner_kind,
        embedding: emb.row(row).to_owned(),
        anchor: prefix.items.last().expect("non-empty prefix").poi,
        visited: prefix.poi_set(),
        target: target.poi,
        target_ts: target.timestamp,
    };
    let test = make(&loo.test.prefix, n - 1, loo.test.target);
    // when truncation left a single item the validation prefix is that item minus one; fall back to re-encoding
    let val = if n >= 2 {
        make(&loo.validation.prefix, n - 2, loo.validation.target)
    } else {
        let fitted = enc.fit(&loo.validation.prefix)?;
        let e = enc.encode_sequence(&fitted)?.vector;
        Query {
            embedding: e,
            ..make(&loo.validation.prefix, 0, loo.validation.target)
        }
    };
    Ok((val, test))
}

/// Which leave-one-out target to rank.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Target {
    Validation,
    Test,
}

/// Evaluation settings shared by training-time validation and final reports.
#[derive(Debug, Clone)]
pub struct EvalSettings {
    pub flags: AblationFlags,
    pub alpha: f64,
    pub h: usize,
    pub ks: Vec<usize>,
}

impl Default for EvalSettings {
    fn default() -> Self {
        Self {
            flags: AblationFlags::default(),
            alpha: crate::grouprep::DEFAULT_ALPHA,
            h: DEFAULT_H,
            ks: DEFAULT_KS.to_vec(),
        }
    }
}

/// Ranks `target` items of `entries`; groups get member aggregation and
/// fusion when `members` is given and fusion is enabled.
pub fn rank_entries<'e>(
    bundle: &ModelBundle,
    pois: &PoiTable,
    entries: impl IntoIterator<Item = &'e LooSplit>,
    which: Target,
    settings: &EvalSettings,
    members: Option<(&BTreeMap<String, Vec<String>>, &MemberCache)>,
) -> Result<Vec<RankRecord>> {
    let enc = bundle.encoder(pois, settings.flags.use_sequencing_adapter, settings.flags.style());
    let mut out = Vec::new();
    for loo in entries {
        let (val, test) = loo_queries(&enc, loo)?;
        let q = if which == Target::Validation { val } else { test };
        let mut e = q.embedding.clone();
        if q.owner_kind == OwnerKind::Group && settings.flags.use_aggregation_fusion {
            if let Some((groups, cache)) = members {
                let ids = groups
                    .get(&q.owner_id)
                    .ok_or_else(|| Error::data(format!("group {} has no member list", q.owner_id)))?;
                if let Some(ctx) = cache.context(ids, q.target_ts) {
                    let agg = aggregate_members(&bundle.base, Some(&bundle.agg), &ctx)?;
                    e = fuse(&e, &agg.vector, settings.alpha);
                }
            }
        }
        out.push(rank_query(pois, &bundle.poi_emb, &e, &q, settings.h)?);
    }
    Ok(out)
}

/// One row of a top-k recommendation list.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Recommendation {
    pub owner_id: String,
    pub rank: usize,
    pub poi_id: String,
    pub probability: f64,
}

/// Top-`k` unvisited POIs near each owner's latest check-in, scored from the
/// embedding of the whole sequence (fused with member context for groups).
pub fn recommend(
    bundle: &ModelBundle,
    pois: &PoiTable,
    sequences: &[Sequence],
    settings: &EvalSettings,
    members: Option<(&BTreeMap<String, Vec<String>>, &MemberCache)>,
    k: usize,
) -> Result<Vec<Recommendation>> {
    let enc = bundle.encoder(pois, settings.flags.use_sequencing_adapter, settings.flags.style());
    let mut out = Vec::new();
    for seq in sequences.iter().filter(|s| !s.is_empty()) {
        let fitted = enc.fit(seq)?;
        let mut e = enc.encode_sequence(&fitted)?.vector;
        if seq.owner_kind == OwnerKind::Group && settings.flags.use_aggregation_fusion {
            if let Some((groups, cache)) = members {
                if let Some(ctx) = groups.get(&seq.owner_id).and_then(|ids| cache.context(ids, i64::MAX)) {
                    let agg = aggregate_members(&bundle.base, Some(&bundle.agg), &ctx)?;
                    e = fuse(&e, &agg.vector, settings.alpha);
                }
            }
        }
        let anchor = seq.items.last().expect("non-empty").poi;
        let cands = candidate_set(pois, anchor, &seq.poi_set(), settings.h);
        if cands.is_empty() {
            continue;
        }
        let scores = score_candidates(&e, &bundle.poi_emb, &cands)?;
        for (i, (poi, p)) in scores.top(k).into_iter().enumerate() {
            out.push(Recommendation {
                owner_id: seq.owner_id.clone(),
                rank: i + 1,
                poi_id: pois.get(poi).id.clone(),
                probability: p,
            });
        }
    }
    Ok(out)
}

pub fn recommendations_tsv(rows: &[Recommendation]) -> String {
    let mut out = String::new();
    for r in rows {
        out.push_str(&format!("{}\t{}\t{}\t{:.6}\n", r.owner_id, r.rank, r.poi_id, r.probability));
    }
    out
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub variant: String,
    pub flags: AblationFlags,
    pub alpha: f64,
    pub h: usize,
    pub groups: MetricsReport,
    pub users: MetricsReport,
    pub cold_start: MetricsReport,
}

/// Leave-one-out test evaluation of groups, users and cold-start groups.
pub fn evaluate(
    bundle: &ModelBundle,
    pois: &PoiTable,
    split: &DatasetSplit,
    user_sequences: &BTreeMap<String, Sequence>,
    group_members: &BTreeMap<String, Vec<String>>,
    settings: &EvalSettings,
) -> Result<EvalReport> {
    let enc = bundle.encoder(pois, settings.flags.use_sequencing_adapter, settings.flags.style());
    let cache = if settings.flags.use_aggregation_fusion {
        MemberCache::build(&enc, user_sequences.values())?
    } else {
        MemberCache::default()
    };
    let members = Some((group_members, &cache));
    let groups = rank_entries(bundle, pois, split.groups(), Target::Test, settings, members)?;
    let users = rank_entries(bundle, pois, split.users(), Target::Test, settings, members)?;
    let cold = rank_entries(bundle, pois, &split.cold_start, Target::Test, settings, members)?;
    Ok(EvalReport {
        variant: settings.flags.variant_name(),
        flags: settings.flags,
        alpha: settings.alpha,
        h: settings.h,
        groups: MetricsReport::from_ranks(groups, &settings.ks),
        users: MetricsReport::from_ranks(users, &settings.ks),
        cold_start: MetricsReport::from_ranks(cold, &settings.ks),
    })
}

/// `min(200, 10%)` of the qualifying sequences.
pub fn default_cold_start_n(qualifying: usize) -> usize {
    COLD_START_CAP.min(qualifying / 10)
}

/// Samples `n` evaluable group sequences shorter than `max_checkins` to hold out.
pub fn cold_start_split(group_sequences: &[Sequence], n: usize, max_checkins: usize, seed: u64) -> Result<(BTreeSet<String>, Vec<Sequence>)> {
    let mut qualifying: Vec<&Sequence> = group_sequences.iter().filter(|s| s.len() >= 3 && s.len() < max_checkins).collect();
    if n > qualifying.len() {
        return Err(Error::usage(format!(
            "cold-start holdout of {n} requested but only {} group sequences have 3..{max_checkins} check-ins",
            qualifying.len()
        )));
    }
    qualifying.sort_by(|a, b| a.owner_id.cmp(&b.owner_id));
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    qualifying.shuffle(&mut rng);
    let held: BTreeSet<String> = qualifying[..n].iter().map(|s| s.owner_id.clone()).collect();
    let rest = group_sequences.iter().filter(|s| !held.contains(&s.owner_id)).cloned().collect();
    Ok((held, rest))
}

pub fn write_report_json(path: &Path, reports: &[EvalReport]) -> Result<()> {
    let text = serde_json::to_string_pretty(reports)?;
    fs::write(path, text + "\n").map_err(|e| Error::io(path, e))
}

/// Variant × metric table; one row per variant and owner population.
pub fn report_tsv(reports: &[EvalReport]) -> String {
    let ks = reports.first().map(|r| r.groups.ks.clone()).unwrap_or_default();
    let mut out = String::from("variant\tpopulation\tn");
    for k in &ks {
        out.push_str(&format!("\tHR@{k}\tNDCG@{k}"));
    }
    out.push('\n');
    for r in reports {
        for (name, m) in [("groups", &r.groups), ("users", &r.users), ("cold_start", &r.cold_start)] {
            out.push_str(&format!("{}\t{name}\t{}", r.variant, m.n_evaluated));
            for (hr, nd) in m.hr.iter().zip(&m.ndcg) {
                out.push_str(&format!("\t{hr:.4}\t{nd:.4}"));
            }
            out.push('\n');
        }
    }
    out
}

pub fn write_report_tsv(path: &Path, reports: &[EvalReport]) -> Result<()> {
    fs::write(path, report_tsv(reports)).map_err(|e| Error::io(path, e))
}

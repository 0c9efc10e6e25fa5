use std::collections::BTreeMap;

use ndarray::{Array2, Axis};
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::{MetricsLog, ModelBundle, Stage, TrainConfig};
use crate::corpus::{DatasetSplit, PoiTable, PrefixTarget, Sequence};
use crate::error::{Error, Result};
use crate::evalkit::{hr_at_k, rank_entries, rank_query, AblationFlags, EvalSettings, MemberCache, Query, Target};
use crate::grouprep::{aggregate_pass, fuse};
use crate::optim::{clip_global_norm, AdamW};
use crate::qlora::AdapterSet;
use crate::ssl::score_purposes;
use crate::tensor::{softmax_cross_entropy, Matrix, Vector};

const VAL_K: usize = 10;

/// Everything the training stages read.
#[derive(Debug, Clone)]
pub struct TrainCorpus {
    pub pois: PoiTable,
    pub split: DatasetSplit,
    /// Short sequences with purpose labels.
    pub ssl: Vec<(Sequence, usize)>,
    /// Full user sequences, the source of member contexts.
    pub user_sequences: BTreeMap<String, Sequence>,
    pub group_members: BTreeMap<String, Vec<String>>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StageReport {
    pub stage: Stage,
    pub epochs: usize,
    pub steps: u64,
    pub epoch_losses: Vec<f64>,
    /// Validation HR@10 after each epoch (sequencing and aggregation).
    pub val_history: Vec<f64>,
    pub initial_val: Option<f64>,
    pub best_val: Option<f64>,
    pub skipped: bool,
}

impl StageReport {
    fn skipped(stage: Stage) -> Self {
        Self {
            stage,
            epochs: 0,
            steps: 0,
            epoch_losses: Vec::new(),
            val_history: Vec::new(),
            initial_val: None,
            best_val: None,
            skipped: true,
        }
    }
}

/// `({p1}, p2), ({p1, p2}, p3), …` for a sequence of length `M >= 2`.
pub fn prefix_targets(seq: &Sequence) -> Vec<PrefixTarget> {
    (1..seq.len())
        .map(|j| PrefixTarget {
            prefix: seq.prefix(j),
            target: seq.items[j],
        })
        .collect()
}

/// Cross-entropy of the full softmax over `E_poi · e` against `target`.
pub fn poi_loss(embedding: &Vector, target: usize, poi_emb: &Matrix) -> f64 {
    softmax_cross_entropy(poi_emb.dot(embedding).view(), target).0
}

/// Loss, gradient w.r.t. the embedding, and gradient w.r.t. the logits.
pub fn poi_loss_grad(embedding: &Vector, target: usize, poi_emb: &Matrix) -> (f64, Vector, Vector) {
    let (loss, dlogits) = softmax_cross_entropy(poi_emb.dot(embedding).view(), target);
    (loss, poi_emb.t().dot(&dlogits), dlogits)
}

fn stage_rng(cfg: &TrainConfig, stage: Stage) -> ChaCha8Rng {
    let salt = match stage {
        Stage::Ssl => 0x51,
        Stage::Sequencing => 0x5e,
        Stage::Aggregation => 0xa9,
    };
    ChaCha8Rng::seed_from_u64(cfg.seed.wrapping_mul(0x9e37_79b9_7f4a_7c15) ^ salt)
}

fn check_finite(stage: Stage, epoch: usize, loss: f64) -> Result<()> {
    if loss.is_finite() {
        Ok(())
    } else {
        Err(Error::Divergence(format!("{} stage loss became non-finite in epoch {epoch}", stage.name())))
    }
}

/// Gradient buffers for the tensors a stage may update.
struct Grads {
    seq: Option<AdapterSet>,
    poi: Option<Matrix>,
    pur: Option<Matrix>,
}

impl Grads {
    fn new(bundle: &ModelBundle, seq: bool, poi: bool, pur: bool) -> Self {
        Self {
            seq: seq.then(|| bundle.seq.zeros_like()),
            poi: poi.then(|| Array2::zeros(bundle.poi_emb.dim())),
            pur: pur.then(|| Array2::zeros(bundle.pur.dim())),
        }
    }

    fn is_empty(&self) -> bool {
        self.seq.is_none() && self.poi.is_none() && self.pur.is_none()
    }

    /// Scales, clips and applies the accumulated gradients, then zeroes them.
    /// Clipping is joint over both groups.
    fn apply(&mut self, bundle: &mut ModelBundle, opt: &mut StageOptim, scale: f64, clip: f64) {
        let ModelBundle { seq, poi_emb, pur, .. } = bundle;
        let mut adapter_params: Vec<&mut [f64]> = Vec::new();
        let mut table_params: Vec<&mut [f64]> = Vec::new();
        let mut grads: Vec<&mut [f64]> = Vec::new();
        if let Some(g) = &mut self.seq {
            adapter_params.extend(seq.params_mut());
            grads.extend(g.params_mut());
        }
        let n_adapter = grads.len();
        if let Some(g) = &mut self.poi {
            table_params.push(poi_emb.as_slice_mut().expect("standard layout"));
            grads.push(g.as_slice_mut().expect("standard layout"));
        }
        if let Some(g) = &mut self.pur {
            table_params.push(pur.as_slice_mut().expect("standard layout"));
            grads.push(g.as_slice_mut().expect("standard layout"));
        }
        for g in grads.iter_mut() {
            g.iter_mut().for_each(|v| *v *= scale);
        }
        clip_global_norm(&mut grads, clip);
        let views: Vec<&[f64]> = grads.iter().map(|g| &**g).collect();
        if !adapter_params.is_empty() {
            opt.adapters.step(adapter_params, &views[..n_adapter]);
        }
        if !table_params.is_empty() {
            opt.tables.step(table_params, &views[n_adapter..]);
        }
        opt.steps += 1;
        for g in grads {
            g.iter_mut().for_each(|v| *v = 0.0);
        }
    }
}

/// Adapters and embedding tables step with their own learning rates.
struct StageOptim {
    adapters: AdamW,
    tables: AdamW,
    steps: u64,
}

impl StageOptim {
    fn new(cfg: &TrainConfig) -> Self {
        Self {
            adapters: AdamW::new(cfg.lr, cfg.weight_decay),
            tables: AdamW::new(cfg.emb_lr, cfg.weight_decay),
            steps: 0,
        }
    }

    fn steps(&self) -> u64 {
        self.steps
    }
}

/// Purpose pretraining: updates `Θ'_s`, `E_poi` and `E_pur` on labeled short sequences.
pub fn pretrain_ssl(
    bundle: &mut ModelBundle,
    data: &[(Sequence, usize)],
    pois: &PoiTable,
    cfg: &TrainConfig,
    flags: &AblationFlags,
    metrics: &mut MetricsLog,
) -> Result<StageReport> {
    cfg.validate()?;
    let stage = Stage::Ssl;
    let data: Vec<&(Sequence, usize)> = data.iter().filter(|(s, _)| !s.is_empty()).collect();
    if data.is_empty() {
        log::warn!("no labeled short sequences; skipping purpose pretraining");
        return Ok(StageReport::skipped(stage));
    }
    let mut rng = stage_rng(cfg, stage);
    let mut opt = StageOptim::new(cfg);
    let mut grads = Grads::new(bundle, flags.use_sequencing_adapter, flags.use_extended_poi_tokens, true);
    let mut order: Vec<usize> = (0..data.len()).collect();
    let mut report = StageReport { skipped: false, ..StageReport::skipped(stage) };
    for epoch in 0..cfg.max_epochs {
        order.shuffle(&mut rng);
        let mut epoch_loss = 0.0;
        for batch in order.chunks(cfg.batch) {
            let mut batch_loss = 0.0;
            for &i in batch {
                let (seq, label) = data[i];
                let enc = bundle.encoder(pois, flags.use_sequencing_adapter, flags.style());
                let fitted = enc.fit(seq)?;
                let pass = enc.prefix_pass(&fitted, cfg.dropout, Some(&mut rng))?;
                let last = pass.embeddings.nrows() - 1;
                let e = pass.embeddings.row(last).to_owned();
                let (loss, dlogits) = softmax_cross_entropy(score_purposes(&bundle.pur, &e)?.view(), *label);
                batch_loss += loss;
                if let Some(g) = &mut grads.pur {
                    g.scaled_add(1.0, &outer(&dlogits, &e));
                }
                if grads.seq.is_some() || grads.poi.is_some() {
                    let mut d_emb = Array2::zeros(pass.embeddings.dim());
                    d_emb.row_mut(last).assign(&bundle.pur.t().dot(&dlogits));
                    pass.backward(&enc, &d_emb, grads.seq.as_mut(), grads.poi.as_mut());
                }
            }
            check_finite(stage, epoch, batch_loss)?;
            epoch_loss += batch_loss;
            grads.apply(bundle, &mut opt, 1.0 / batch.len() as f64, cfg.clip_norm);
            metrics.log(stage.name(), epoch, opt.steps(), batch_loss / batch.len() as f64, None)?;
        }
        report.epoch_losses.push(epoch_loss / data.len() as f64);
        report.epochs = epoch + 1;
        log::info!("ssl epoch {epoch}: mean loss {:.4}", epoch_loss / data.len() as f64);
    }
    report.steps = opt.steps();
    bundle.round_trainables();
    Ok(report)
}

fn outer(a: &Vector, b: &Vector) -> Matrix {
    let a2 = a.view().insert_axis(Axis(1));
    let b2 = b.view().insert_axis(Axis(0));
    a2.dot(&b2)
}

/// Validation HR@10 of the sequence path over every training sequence.
fn sequence_val_hr(bundle: &ModelBundle, corpus: &TrainCorpus, flags: &AblationFlags, h: usize) -> Result<f64> {
    let settings = EvalSettings {
        flags: AblationFlags {
            use_aggregation_fusion: false,
            ..*flags
        },
        h,
        ..Default::default()
    };
    let ranks = rank_entries(bundle, &corpus.pois, &corpus.split.entries, Target::Validation, &settings, None)?;
    Ok(mean_hr(ranks.iter().map(|r| r.rank)))
}

fn mean_hr(ranks: impl Iterator<Item = usize>) -> f64 {
    let (mut n, mut s) = (0usize, 0.0);
    for r in ranks {
        n += 1;
        s += hr_at_k(r, VAL_K);
    }
    if n == 0 {
        0.0
    } else {
        s / n as f64
    }
}

/// Next-POI training of `Θ'_s` and `E_poi` on user and group training
/// prefixes, early-stopped on validation HR@10.
pub fn train_sequencing(
    bundle: &mut ModelBundle,
    corpus: &TrainCorpus,
    cfg: &TrainConfig,
    flags: &AblationFlags,
    h: usize,
    metrics: &mut MetricsLog,
) -> Result<StageReport> {
    cfg.validate()?;
    let stage = Stage::Sequencing;
    let mut grads = Grads::new(bundle, flags.use_sequencing_adapter, flags.use_extended_poi_tokens, false);
    let data: Vec<&Sequence> = corpus.split.entries.iter().map(|e| &e.train).filter(|s| s.len() >= 2).collect();
    if grads.is_empty() || data.is_empty() {
        log::warn!("sequencing stage has nothing to train; skipping");
        return Ok(StageReport::skipped(stage));
    }
    let mut rng = stage_rng(cfg, stage);
    let mut opt = StageOptim::new(cfg);
    let mut order: Vec<usize> = (0..data.len()).collect();
    let mut report = StageReport { skipped: false, ..StageReport::skipped(stage) };
    let initial = sequence_val_hr(bundle, corpus, flags, h)?;
    report.initial_val = Some(initial);
    // the untrained state competes too, so training never ends below it
    let mut best = (initial, bundle.seq.clone(), bundle.poi_emb.clone());
    let mut stale = 0;
    for epoch in 0..cfg.max_epochs {
        order.shuffle(&mut rng);
        let (mut epoch_loss, mut epoch_pairs) = (0.0, 0usize);
        for batch in order.chunks(cfg.batch) {
            let (mut batch_loss, mut pairs) = (0.0, 0usize);
            for &i in batch {
                let enc = bundle.encoder(&corpus.pois, flags.use_sequencing_adapter, flags.style());
                let fitted = enc.fit(data[i])?;
                if fitted.len() < 2 {
                    continue;
                }
                let pass = enc.prefix_pass(&fitted, cfg.dropout, Some(&mut rng))?;
                let n = fitted.len() - 1;
                let embs = pass.embeddings.slice(ndarray::s![..n, ..]);
                let logits = embs.dot(&bundle.poi_emb.t());
                let mut dlogits = Array2::zeros(logits.dim());
                for j in 0..n {
                    let (loss, g) = softmax_cross_entropy(logits.row(j), fitted.items[j + 1].poi);
                    batch_loss += loss;
                    dlogits.row_mut(j).assign(&g);
                }
                pairs += n;
                if let Some(g) = &mut grads.poi {
                    *g += &dlogits.t().dot(&embs);
                }
                let mut d_emb = Array2::zeros(pass.embeddings.dim());
                d_emb.slice_mut(ndarray::s![..n, ..]).assign(&dlogits.dot(&bundle.poi_emb));
                pass.backward(&enc, &d_emb, grads.seq.as_mut(), grads.poi.as_mut());
            }
            if pairs == 0 {
                continue;
            }
            check_finite(stage, epoch, batch_loss)?;
            epoch_loss += batch_loss;
            epoch_pairs += pairs;
            grads.apply(bundle, &mut opt, 1.0 / pairs as f64, cfg.clip_norm);
            metrics.log(stage.name(), epoch, opt.steps(), batch_loss / pairs as f64, None)?;
        }
        let val = sequence_val_hr(bundle, corpus, flags, h)?;
        let mean = epoch_loss / epoch_pairs.max(1) as f64;
        metrics.log(stage.name(), epoch, opt.steps(), mean, Some(("val_hr10", val)))?;
        log::info!("sequencing epoch {epoch}: mean loss {mean:.4}, validation HR@10 {val:.4}");
        report.epoch_losses.push(mean);
        report.val_history.push(val);
        report.epochs = epoch + 1;
        if val > best.0 {
            best = (val, bundle.seq.clone(), bundle.poi_emb.clone());
            stale = 0;
        } else {
            stale += 1;
            if stale >= cfg.patience {
                break;
            }
        }
    }
    let (val, seq, poi) = best;
    bundle.seq = seq;
    bundle.poi_emb = poi;
    report.best_val = Some(val);
    report.steps = opt.steps();
    bundle.round_trainables();
    Ok(report)
}

/// A group training or validation example with frozen inputs.
struct AggExample {
    group: Vector,
    members: Matrix,
    target: usize,
    query: Option<Query>,
}

fn aggregation_examples(bundle: &ModelBundle, corpus: &TrainCorpus, flags: &AblationFlags, cache: &MemberCache) -> Result<(Vec<AggExample>, Vec<AggExample>)> {
    let enc = bundle.encoder(&corpus.pois, flags.use_sequencing_adapter, flags.style());
    let mut train = Vec::new();
    let mut val = Vec::new();
    let mut skipped = 0;
    for loo in corpus.split.groups() {
        let Some(members) = corpus.group_members.get(&loo.train.owner_id) else {
            return Err(Error::data(format!("group {} has no member list", loo.train.owner_id)));
        };
        let fitted = enc.fit(&loo.train)?;
        let emb = enc.encode_prefixes(&fitted)?;
        for j in 0..fitted.len().saturating_sub(1) {
            let target = fitted.items[j + 1];
            match cache.context(members, target.timestamp) {
                Some(ctx) => train.push(AggExample {
                    group: emb.row(j).to_owned(),
                    members: ctx,
                    target: target.poi,
                    query: None,
                }),
                None => skipped += 1,
            }
        }
        let (vq, _) = crate::evalkit::loo_queries(&enc, loo)?;
        if let Some(ctx) = cache.context(members, vq.target_ts) {
            val.push(AggExample {
                group: vq.embedding.clone(),
                members: ctx,
                target: vq.target,
                query: Some(vq),
            });
        }
    }
    if skipped > 0 {
        log::warn!("aggregation: skipped {skipped} group prefixes whose members have no earlier check-ins");
    }
    Ok((train, val))
}

fn aggregation_val_hr(bundle: &ModelBundle, pois: &PoiTable, val: &[AggExample], alpha: f64, h: usize) -> Result<f64> {
    let mut ranks = Vec::with_capacity(val.len());
    for ex in val {
        let agg = aggregate_pass(&bundle.base, Some(&bundle.agg), &ex.members, 0.0, None)?;
        let e = fuse(&ex.group, &agg.output, alpha);
        let q = ex.query.as_ref().expect("validation example");
        ranks.push(rank_query(pois, &bundle.poi_emb, &e, q, h)?.rank);
    }
    Ok(mean_hr(ranks.into_iter()))
}

/// Trains `Θ'_a` on group prefixes: frozen `Θ_s` encodes the group and its
/// members, `Θ_a` aggregates the members, and the fused embedding is scored
/// against all POIs.
pub fn train_aggregation(
    bundle: &mut ModelBundle,
    corpus: &TrainCorpus,
    cfg: &TrainConfig,
    flags: &AblationFlags,
    h: usize,
    metrics: &mut MetricsLog,
) -> Result<StageReport> {
    cfg.validate()?;
    let stage = Stage::Aggregation;
    if !flags.use_aggregation_fusion || cfg.alpha == 0.0 {
        log::info!("aggregation fusion disabled; skipping aggregation training");
        return Ok(StageReport::skipped(stage));
    }
    let enc = bundle.encoder(&corpus.pois, flags.use_sequencing_adapter, flags.style());
    let cache = MemberCache::build(&enc, corpus.user_sequences.values())?;
    let (train, val) = aggregation_examples(bundle, corpus, flags, &cache)?;
    if train.is_empty() {
        log::warn!("no group training examples with member context; skipping aggregation training");
        return Ok(StageReport::skipped(stage));
    }
    let mut rng = stage_rng(cfg, stage);
    let mut opt = AdamW::new(cfg.agg_lr, cfg.weight_decay);
    let mut grad = bundle.agg.zeros_like();
    let mut order: Vec<usize> = (0..train.len()).collect();
    let mut report = StageReport { skipped: false, ..StageReport::skipped(stage) };
    let initial = aggregation_val_hr(bundle, &corpus.pois, &val, cfg.alpha, h)?;
    report.initial_val = Some(initial);
    let mut best = (initial, bundle.agg.clone());
    let mut stale = 0;
    for epoch in 0..cfg.max_epochs {
        order.shuffle(&mut rng);
        let mut epoch_loss = 0.0;
        for batch in order.chunks(cfg.batch) {
            let mut batch_loss = 0.0;
            for &i in batch {
                let ex = &train[i];
                let pass = aggregate_pass(&bundle.base, Some(&bundle.agg), &ex.members, cfg.dropout, Some(&mut rng))?;
                let fused = fuse(&ex.group, &pass.output, cfg.alpha);
                let (loss, d_fused, _) = poi_loss_grad(&fused, ex.target, &bundle.poi_emb);
                batch_loss += loss;
                pass.backward(&bundle.base, Some(&bundle.agg), &(d_fused * cfg.alpha), Some(&mut grad));
            }
            check_finite(stage, epoch, batch_loss)?;
            epoch_loss += batch_loss;
            let scale = 1.0 / batch.len() as f64;
            let mut g = grad.params_mut();
            for t in g.iter_mut() {
                t.iter_mut().for_each(|v| *v *= scale);
            }
            clip_global_norm(&mut g, cfg.clip_norm);
            opt.step(bundle.agg.params_mut(), &g.iter().map(|t| &**t).collect::<Vec<_>>());
            for t in g {
                t.iter_mut().for_each(|v| *v = 0.0);
            }
            metrics.log(stage.name(), epoch, opt.steps(), batch_loss / batch.len() as f64, None)?;
        }
        let v = aggregation_val_hr(bundle, &corpus.pois, &val, cfg.alpha, h)?;
        let mean = epoch_loss / train.len() as f64;
        metrics.log(stage.name(), epoch, opt.steps(), mean, Some(("val_group_hr10", v)))?;
        log::info!("aggregation epoch {epoch}: mean loss {mean:.4}, group validation HR@10 {v:.4}");
        report.epoch_losses.push(mean);
        report.val_history.push(v);
        report.epochs = epoch + 1;
        if v > best.0 {
            best = (v, bundle.agg.clone());
            stale = 0;
        } else {
            stale += 1;
            if stale >= cfg.patience {
                break;
            }
        }
    }
    let (v, agg) = best;
    bundle.agg = agg;
    report.best_val = Some(v);
    report.steps = opt.steps();
    bundle.round_trainables();
    Ok(report)
}

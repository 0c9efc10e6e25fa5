//! End-to-end composition of the modules: corpus preparation, base
//! pretraining, adapter training and evaluation under one [`RunConfig`].

use std::collections::{BTreeMap, BTreeSet};

use crate::config::{LabelerKind, RunConfig};
use crate::corpus::{build_sequences, build_split, mine_groups, split_by_gap, CheckIn, Dataset, Group, OwnerKind, Sequence};
use crate::error::{Error, Result};
use crate::evalkit::{cold_start_split, default_cold_start_n, evaluate, AblationFlags, EvalReport, EvalSettings};
use crate::seqmodel::{build_vocab_capped, init_poi_embeddings, pretrain_base, pretrain_corpus, vocab_corpus, BaseModel, PretrainReport, Vocabulary};
use crate::ssl::{ExternalLabeler, HeuristicLabeler, LabeledSequence, Labeler, RuleTable};
use crate::training::{pretrain_ssl, train_aggregation, train_sequencing, MetricsLog, ModelBundle, StageReport, TrainCorpus};

/// Mined groups and their check-ins.
#[derive(Debug, Clone)]
pub struct MinedGroups {
    pub groups: Vec<Group>,
    pub checkins: Vec<CheckIn>,
}

pub fn mine(dataset: &Dataset, cfg: &RunConfig) -> MinedGroups {
    let (groups, checkins) = mine_groups(&dataset.checkins, &dataset.social, cfg.data.window_seconds);
    MinedGroups { groups, checkins }
}

/// Sequences, leave-one-out split with cold-start holdout, member lists and
/// the short sequences awaiting purpose labels (unlabeled in the returned corpus).
pub fn prepare(dataset: &Dataset, mined: &MinedGroups, cfg: &RunConfig) -> Result<(TrainCorpus, Vec<Sequence>)> {
    let pois = &dataset.pois;
    let users = build_sequences(&dataset.checkins, pois, cfg.data.max_len);
    let groups = build_sequences(&mined.checkins, pois, cfg.data.max_len);
    let qualifying = groups.iter().filter(|s| s.len() >= 3 && s.len() < cfg.eval.cold_start_max).count();
    let n = cfg.eval.cold_start_n.unwrap_or_else(|| default_cold_start_n(qualifying));
    let (cold_ids, _) = cold_start_split(&groups, n, cfg.eval.cold_start_max, cfg.seed)?;

    let mut all = users.clone();
    all.extend(groups);
    let split = build_split(&all, &cold_ids);
    if split.entries.is_empty() {
        return Err(Error::data("no sequence has the three check-ins needed for leave-one-out"));
    }
    let ssl = ssl_sequences(&split.entries.iter().map(|e| e.train.clone()).chain(split.short.iter().cloned()).collect::<Vec<_>>(), cfg, dataset);

    let group_members = mined.groups.iter().map(|g| (g.id.clone(), g.member_ids.clone())).collect();
    let user_sequences: BTreeMap<String, Sequence> = users.into_iter().map(|s| (s.owner_id.clone(), s)).collect();
    let corpus = TrainCorpus {
        pois: pois.clone(),
        split,
        ssl: Vec::new(),
        user_sequences,
        group_members,
    };
    Ok((corpus, ssl))
}

/// Gap-split pieces of training prefixes with at least two check-ins.
fn ssl_sequences(train: &[Sequence], cfg: &RunConfig, dataset: &Dataset) -> Vec<Sequence> {
    let mut seen = BTreeSet::new();
    let mut out = Vec::new();
    for seq in train {
        for piece in split_by_gap(seq, cfg.ssl.gap_days, &dataset.pois) {
            if piece.len() >= 2 && seen.insert(piece.key()) {
                out.push(piece);
            }
        }
    }
    out
}

pub fn labeler(cfg: &RunConfig) -> Result<Box<dyn Labeler>> {
    let heuristic = match &cfg.ssl.rules {
        Some(path) => {
            let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
            HeuristicLabeler { table: RuleTable::parse(&text)? }
        }
        None => HeuristicLabeler::default(),
    };
    Ok(match cfg.ssl.labeler {
        LabelerKind::Heuristic => Box::new(heuristic),
        LabelerKind::External => Box::new(ExternalLabeler::new(cfg.ssl.external(), heuristic)),
    })
}

pub fn label(sequences: &[Sequence], dataset: &Dataset, labeler: &dyn Labeler) -> Vec<LabeledSequence> {
    labeler.label_all(sequences, &dataset.pois)
}

/// Training prefixes only, so pretraining never sees a validation or test item.
fn training_sequences(corpus: &TrainCorpus) -> Vec<Sequence> {
    corpus.split.entries.iter().map(|e| e.train.clone()).chain(corpus.split.short.iter().cloned()).collect()
}

pub fn build_vocabulary(corpus: &TrainCorpus, cfg: &RunConfig) -> Result<Vocabulary> {
    build_vocab_capped(&corpus.pois, &vocab_corpus(&corpus.pois, &training_sequences(corpus)), cfg.model.min_freq, cfg.model.max_words)
}

pub fn pretrain(corpus: &TrainCorpus, vocab: &Vocabulary, cfg: &RunConfig) -> Result<(BaseModel, PretrainReport)> {
    let texts = pretrain_corpus(vocab, &corpus.pois, &training_sequences(corpus))?;
    pretrain_base(&texts, vocab, &cfg.model.model(), &cfg.model.pretrain(), cfg.qlora.b, cfg.seed)
}

pub fn init_bundle(base: BaseModel, vocab: Vocabulary, corpus: &TrainCorpus, cfg: &RunConfig) -> Result<ModelBundle> {
    let poi_emb = init_poi_embeddings(&base, &vocab, &corpus.pois)?;
    ModelBundle::new(base, vocab, poi_emb, cfg.qlora.r, cfg.seed)
}

/// Stages 1 and 2. With the sequencing adapter and POI tokens both off the
/// variant is the untuned model and nothing is trained.
pub fn train_sequence_stages(bundle: &mut ModelBundle, corpus: &TrainCorpus, cfg: &RunConfig, flags: &AblationFlags, metrics: &mut MetricsLog) -> Result<Vec<StageReport>> {
    let tc = cfg.train_config();
    let mut reports = Vec::new();
    if flags.use_ssl_pretraining {
        reports.push(pretrain_ssl(bundle, &corpus.ssl, &corpus.pois, &tc, flags, metrics)?);
    }
    reports.push(train_sequencing(bundle, corpus, &tc, flags, cfg.eval.h, metrics)?);
    Ok(reports)
}

pub fn train_aggregation_stage(bundle: &mut ModelBundle, corpus: &TrainCorpus, cfg: &RunConfig, flags: &AblationFlags, metrics: &mut MetricsLog) -> Result<StageReport> {
    train_aggregation(bundle, corpus, &cfg.train_config(), flags, cfg.eval.h, metrics)
}

pub fn eval_settings(cfg: &RunConfig, flags: AblationFlags) -> EvalSettings {
    EvalSettings {
        flags,
        alpha: if flags.use_aggregation_fusion { cfg.train.alpha } else { 0.0 },
        h: cfg.eval.h,
        ks: cfg.eval.ks.clone(),
    }
}

pub fn evaluate_bundle(bundle: &ModelBundle, corpus: &TrainCorpus, cfg: &RunConfig, flags: AblationFlags) -> Result<EvalReport> {
    evaluate(bundle, &corpus.pois, &corpus.split, &corpus.user_sequences, &corpus.group_members, &eval_settings(cfg, flags))
}

/// Everything a full run produces.
#[derive(Debug)]
pub struct RunOutput {
    pub corpus: TrainCorpus,
    pub pretrain: Option<PretrainReport>,
    pub stages: Vec<StageReport>,
    pub bundle: ModelBundle,
    pub report: EvalReport,
}

/// Prepared corpus with a pretrained, frozen base: the shared starting point
/// of every variant and sweep value.
#[derive(Debug, Clone)]
pub struct Foundation {
    pub corpus: TrainCorpus,
    /// Absent when the base was loaded from a checkpoint.
    pub pretrain: Option<PretrainReport>,
    pub bundle: ModelBundle,
}

pub fn foundation(dataset: &Dataset, cfg: &RunConfig, labeler: &dyn Labeler) -> Result<Foundation> {
    cfg.validate()?;
    let mined = mine(dataset, cfg);
    let (mut corpus, short) = prepare(dataset, &mined, cfg)?;
    let labels = label(&short, dataset, labeler);
    corpus.ssl = crate::ssl::join_labels(&short, &labels)?;
    let vocab = build_vocabulary(&corpus, cfg)?;
    let (base, pretrain) = pretrain(&corpus, &vocab, cfg)?;
    let bundle = init_bundle(base, vocab, &corpus, cfg)?;
    Ok(Foundation {
        corpus,
        pretrain: Some(pretrain),
        bundle,
    })
}

/// Trains all stages for `flags` on a copy of the foundation bundle and evaluates.
pub fn run_variant(found: &Foundation, cfg: &RunConfig, flags: AblationFlags, metrics: &mut MetricsLog) -> Result<(ModelBundle, Vec<StageReport>, EvalReport)> {
    let mut bundle = found.bundle.clone();
    let mut stages = train_sequence_stages(&mut bundle, &found.corpus, cfg, &flags, metrics)?;
    stages.push(train_aggregation_stage(&mut bundle, &found.corpus, cfg, &flags, metrics)?);
    let report = evaluate_bundle(&bundle, &found.corpus, cfg, flags)?;
    Ok((bundle, stages, report))
}

pub fn run(dataset: &Dataset, cfg: &RunConfig, metrics: &mut MetricsLog) -> Result<RunOutput> {
    let flags = cfg.flags()?;
    let labeler = labeler(cfg)?;
    let found = foundation(dataset, cfg, labeler.as_ref())?;
    let (bundle, stages, report) = run_variant(&found, cfg, flags, metrics)?;
    Ok(RunOutput {
        corpus: found.corpus,
        pretrain: found.pretrain,
        stages,
        bundle,
        report,
    })
}

/// Number of group and user sequences, for logging.
pub fn owner_counts(corpus: &TrainCorpus) -> (usize, usize) {
    let g = corpus.split.entries.iter().filter(|e| e.train.owner_kind == OwnerKind::Group).count();
    (g, corpus.split.entries.len() - g)
}

//! One function per subcommand; each reads its inputs from the run directory,
//! writes its outputs there and records an input manifest.

use std::fs;
use std::path::PathBuf;

use llmgpr::config::RunConfig;
use llmgpr::corpus::{
    build_sequences, generate_synthetic, load_dataset, read_checkins, read_groups, write_checkins, write_groups, write_pois,
    write_social, Dataset, OwnerKind,
};
use llmgpr::evalkit::{
    recommend, recommendations_tsv, sweep, write_report_json, write_report_tsv, write_sweep_tsv, AblationFlags, MemberCache,
    SweepParam,
};
use llmgpr::pipeline::{self, Foundation, MinedGroups};
use llmgpr::seqmodel::{load_base, save_base};
use llmgpr::ssl::{join_labels, read_labels, write_labels};
use llmgpr::training::{pretrain_ssl, train_aggregation, train_sequencing, MetricsLog, ModelBundle, TrainCorpus};
use llmgpr::{Error, Result};

use crate::rundir::RunDir;
use crate::{Cli, Command};

const SSL: &str = "ssl";
const SEQ: &str = "seq";
const AGG: &str = "agg";

struct Ctx {
    cfg: RunConfig,
    flags: AblationFlags,
    rd: RunDir,
    force: bool,
    command: &'static str,
}

pub fn run(cli: &Cli) -> Result<()> {
    let mut cfg = match &cli.config {
        Some(p) => RunConfig::load(p)?,
        None => RunConfig::default(),
    };
    cfg = cfg.with_overrides(cli.command.overrides())?;
    if let Some(s) = cli.seed {
        cfg.seed = s;
    }
    if let Some(f) = &cli.flags {
        cfg.eval.flags = f.clone();
    }
    cfg.validate()?;
    let flags = cfg.flags()?;
    let ctx = Ctx {
        cfg,
        flags,
        rd: RunDir::from_env()?,
        force: cli.force,
        command: cli.command.name(),
    };
    log::info!("run directory {}", ctx.rd.root.display());
    match &cli.command {
        Command::Synth(_) => synth(&ctx),
        Command::Ingest(_) => ingest(&ctx),
        Command::MineGroups(_) => mine_groups(&ctx),
        Command::PretrainBase(_) => pretrain_base(&ctx),
        Command::InitPoiEmb(_) => init_poi_emb(&ctx),
        Command::LabelPurposes(_) => label_purposes(&ctx),
        Command::PretrainSsl(_) => stage_ssl(&ctx),
        Command::TrainSeq(_) => stage_seq(&ctx),
        Command::TrainAgg(_) => stage_agg(&ctx),
        Command::Eval(_) => eval(&ctx),
        Command::Recommend(a) => recommend_cmd(&ctx, a.k, a.owner.as_deref(), a.out.as_ref()),
        Command::Sweep(a) => sweep_cmd(&ctx, &a.param, &a.values),
    }
}

impl Ctx {
    /// True when every output exists and `--force` was not given.
    fn reuse(&self, outputs: &[PathBuf]) -> bool {
        let done = !self.force && outputs.iter().all(|p| p.exists());
        if done {
            log::info!("{}: outputs already present, skipping (use --force to recompute)", self.command);
        }
        done
    }

    fn manifest(&self, inputs: &[PathBuf], outputs: &[PathBuf]) -> Result<()> {
        self.rd.write_manifest(self.command, &self.cfg, inputs, outputs)
    }

    fn variant(&self) -> String {
        self.flags.variant_name()
    }

    fn data_inputs(&self) -> Vec<PathBuf> {
        vec![self.rd.checkins(), self.rd.pois(), self.rd.social()]
    }

    fn group_inputs(&self) -> Vec<PathBuf> {
        let mut v = self.data_inputs();
        v.extend([self.rd.groups(), self.rd.group_checkins()]);
        v
    }

    fn load_dataset(&self) -> Result<Dataset> {
        self.rd.require(&self.rd.checkins(), "run `synth` or `ingest` first")?;
        let (ds, _) = load_dataset(&self.rd.checkins(), &self.rd.pois(), &self.rd.social())?;
        Ok(ds)
    }

    fn load_mined(&self, ds: &Dataset) -> Result<MinedGroups> {
        self.rd.require(&self.rd.groups(), "run `mine-groups` first")?;
        Ok(MinedGroups {
            groups: read_groups(&self.rd.groups())?,
            checkins: read_checkins(&self.rd.group_checkins(), OwnerKind::Group, &ds.pois)?,
        })
    }

    /// Prepared corpus; with `labels` the purpose labels are joined in.
    fn corpus(&self, labels: bool) -> Result<(Dataset, MinedGroups, TrainCorpus, Vec<llmgpr::corpus::Sequence>)> {
        let ds = self.load_dataset()?;
        let mined = self.load_mined(&ds)?;
        let (mut corpus, short) = pipeline::prepare(&ds, &mined, &self.cfg)?;
        if labels {
            self.rd.require(&self.rd.labels(), "run `label-purposes` first")?;
            corpus.ssl = join_labels(&short, &read_labels(&self.rd.labels())?)?;
        }
        Ok((ds, mined, corpus, short))
    }

    fn metrics(&self) -> Result<MetricsLog> {
        MetricsLog::append_to(&self.rd.metrics())
    }

    fn load_bundle(&self, dir: &PathBuf, hint: &str) -> Result<ModelBundle> {
        self.rd.require(dir, hint)?;
        let bundle = ModelBundle::load(dir)?;
        if bundle.seq.rank() != self.cfg.qlora.r {
            return Err(Error::usage(format!(
                "{} has adapter rank {} but qlora.r is {}",
                self.rd.rel(dir),
                bundle.seq.rank(),
                self.cfg.qlora.r
            )));
        }
        Ok(bundle)
    }

    fn save_bundle(&self, bundle: &ModelBundle, dir: &PathBuf) -> Result<()> {
        if dir.exists() {
            fs::remove_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        }
        bundle.save(dir)
    }
}

fn synth(ctx: &Ctx) -> Result<()> {
    let outs = ctx.data_inputs();
    if ctx.reuse(&outs) {
        return Ok(());
    }
    let ds = generate_synthetic(&ctx.cfg.data.synth(), ctx.cfg.seed)?;
    write_checkins(&ctx.rd.checkins(), &ds.checkins)?;
    write_pois(&ctx.rd.pois(), &ds.pois)?;
    write_social(&ctx.rd.social(), &ds.social)?;
    log::info!("synthetic corpus: {} check-ins, {} POIs, {} friendships", ds.checkins.len(), ds.pois.len(), ds.social.len());
    ctx.manifest(&[], &outs)
}

fn ingest(ctx: &Ctx) -> Result<()> {
    let d = &ctx.cfg.data;
    let (Some(c), Some(p), Some(s)) = (&d.checkins, &d.pois, &d.social) else {
        return Err(Error::usage("ingest needs data.checkins, data.pois and data.social"));
    };
    let outs = ctx.data_inputs();
    if ctx.reuse(&outs) {
        return Ok(());
    }
    let (ds, report) = load_dataset(c, p, s)?;
    write_checkins(&ctx.rd.checkins(), &ds.checkins)?;
    write_pois(&ctx.rd.pois(), &ds.pois)?;
    write_social(&ctx.rd.social(), &ds.social)?;
    log::info!(
        "ingested {} check-ins, {} POIs, {} friendships ({} malformed rows skipped)",
        report.checkins,
        report.pois,
        report.social_edges,
        report.malformed.len()
    );
    ctx.manifest(&[c.clone(), p.clone(), s.clone()], &outs)
}

fn mine_groups(ctx: &Ctx) -> Result<()> {
    let outs = vec![ctx.rd.groups(), ctx.rd.group_checkins()];
    if ctx.reuse(&outs) {
        return Ok(());
    }
    let ds = ctx.load_dataset()?;
    let mined = pipeline::mine(&ds, &ctx.cfg);
    write_groups(&ctx.rd.groups(), &mined.groups)?;
    write_checkins(&ctx.rd.group_checkins(), &mined.checkins)?;
    log::info!("mined {} groups with {} group check-ins", mined.groups.len(), mined.checkins.len());
    ctx.manifest(&ctx.data_inputs(), &outs)
}

fn pretrain_base(ctx: &Ctx) -> Result<()> {
    let out = ctx.rd.checkpoint("base");
    if ctx.reuse(&[out.clone()]) {
        return Ok(());
    }
    let (_, _, corpus, _) = ctx.corpus(false)?;
    let vocab = pipeline::build_vocabulary(&corpus, &ctx.cfg)?;
    let (base, report) = pipeline::pretrain(&corpus, &vocab, &ctx.cfg)?;
    log::info!(
        "pretrained base: loss {:.4} -> {:.4} over {} steps; vocabulary {} tokens",
        report.initial_loss,
        report.final_loss,
        report.steps,
        vocab.len()
    );
    if out.exists() {
        fs::remove_dir_all(&out).map_err(|e| Error::io(&out, e))?;
    }
    save_base(&out, &base, &vocab)?;
    ctx.manifest(&ctx.group_inputs(), &[out])
}

fn init_poi_emb(ctx: &Ctx) -> Result<()> {
    let out = ctx.rd.checkpoint("init");
    if ctx.reuse(&[out.clone()]) {
        return Ok(());
    }
    let base_dir = ctx.rd.checkpoint("base");
    ctx.rd.require(&base_dir, "run `pretrain-base` first")?;
    let (base, vocab) = load_base(&base_dir)?;
    let (_, _, corpus, _) = ctx.corpus(false)?;
    let bundle = pipeline::init_bundle(base, vocab, &corpus, &ctx.cfg)?;
    ctx.save_bundle(&bundle, &out)?;
    ctx.manifest(&[base_dir, ctx.rd.pois()], &[out])
}

fn label_purposes(ctx: &Ctx) -> Result<()> {
    let out = ctx.rd.labels();
    if ctx.reuse(&[out.clone()]) {
        return Ok(());
    }
    let (ds, _, _, short) = ctx.corpus(false)?;
    let labeler = pipeline::labeler(&ctx.cfg)?;
    let labels = pipeline::label(&short, &ds, labeler.as_ref());
    write_labels(&out, &labels)?;
    log::info!("labeled {} short sequences", labels.len());
    let mut inputs = ctx.group_inputs();
    inputs.extend(ctx.cfg.ssl.rules.clone());
    ctx.manifest(&inputs, &[out])
}

fn stage_ssl(ctx: &Ctx) -> Result<()> {
    if !ctx.flags.use_ssl_pretraining {
        return Err(Error::usage("purpose pretraining is disabled by the ssl=off flag; run `train-seq` directly"));
    }
    let out = ctx.rd.stage(&ctx.variant(), SSL);
    if ctx.reuse(&[out.clone()]) {
        return Ok(());
    }
    let init = ctx.rd.checkpoint("init");
    let mut bundle = ctx.load_bundle(&init, "run `init-poi-emb` before `pretrain-ssl`")?;
    let (_, _, corpus, _) = ctx.corpus(true)?;
    let report = pretrain_ssl(&mut bundle, &corpus.ssl, &corpus.pois, &ctx.cfg.train_config(), &ctx.flags, &mut ctx.metrics()?)?;
    log::info!("purpose pretraining: {} epochs, {} steps", report.epochs, report.steps);
    ctx.save_bundle(&bundle, &out)?;
    let mut inputs = ctx.group_inputs();
    inputs.extend([init, ctx.rd.labels()]);
    ctx.manifest(&inputs, &[out])
}

fn stage_seq(ctx: &Ctx) -> Result<()> {
    let variant = ctx.variant();
    let out = ctx.rd.stage(&variant, SEQ);
    if ctx.reuse(&[out.clone()]) {
        return Ok(());
    }
    let src = if ctx.flags.use_ssl_pretraining {
        ctx.rd.stage(&variant, SSL)
    } else {
        ctx.rd.checkpoint("init")
    };
    let hint = if ctx.flags.use_ssl_pretraining {
        "run `pretrain-ssl` before `train-seq` (or pass --flags ssl=off)"
    } else {
        "run `init-poi-emb` before `train-seq`"
    };
    let mut bundle = ctx.load_bundle(&src, hint)?;
    let (_, _, corpus, _) = ctx.corpus(false)?;
    let report = train_sequencing(&mut bundle, &corpus, &ctx.cfg.train_config(), &ctx.flags, ctx.cfg.eval.h, &mut ctx.metrics()?)?;
    log::info!("sequencing: {} epochs, validation HR@10 {:?} -> best {:?}", report.epochs, report.initial_val, report.best_val);
    ctx.save_bundle(&bundle, &out)?;
    let mut inputs = ctx.group_inputs();
    inputs.push(src);
    ctx.manifest(&inputs, &[out])
}

fn stage_agg(ctx: &Ctx) -> Result<()> {
    let variant = ctx.variant();
    let out = ctx.rd.stage(&variant, AGG);
    if ctx.reuse(&[out.clone()]) {
        return Ok(());
    }
    let src = ctx.rd.stage(&variant, SEQ);
    let mut bundle = ctx.load_bundle(&src, "stage order: run `train-seq` before `train-agg`")?;
    let (_, _, corpus, _) = ctx.corpus(false)?;
    let report = train_aggregation(&mut bundle, &corpus, &ctx.cfg.train_config(), &ctx.flags, ctx.cfg.eval.h, &mut ctx.metrics()?)?;
    if report.skipped {
        log::info!("aggregation: skipped");
    } else {
        log::info!("aggregation: {} epochs, validation group HR@10 {:?} -> best {:?}", report.epochs, report.initial_val, report.best_val);
    }
    ctx.save_bundle(&bundle, &out)?;
    let mut inputs = ctx.group_inputs();
    inputs.push(src);
    ctx.manifest(&inputs, &[out])
}

fn final_bundle(ctx: &Ctx) -> Result<(PathBuf, ModelBundle)> {
    let dir = ctx.rd.stage(&ctx.variant(), AGG);
    let bundle = ctx.load_bundle(&dir, &format!("train the {} variant through `train-agg` first", ctx.variant()))?;
    Ok((dir, bundle))
}

fn eval(ctx: &Ctx) -> Result<()> {
    let (json, tsv) = (ctx.rd.file("report.json"), ctx.rd.file("report.tsv"));
    let (src, bundle) = final_bundle(ctx)?;
    let (_, _, corpus, _) = ctx.corpus(false)?;
    let report = pipeline::evaluate_bundle(&bundle, &corpus, &ctx.cfg, ctx.flags)?;
    for (name, m) in [("groups", &report.groups), ("users", &report.users), ("cold-start", &report.cold_start)] {
        log::info!(
            "{} {name}: n={} HR@10={:.4} NDCG@10={:.4}",
            report.variant,
            m.n_evaluated,
            m.hr(10).unwrap_or(f64::NAN),
            m.ndcg(10).unwrap_or(f64::NAN)
        );
    }
    write_report_json(&json, std::slice::from_ref(&report))?;
    write_report_tsv(&tsv, std::slice::from_ref(&report))?;
    let mut inputs = ctx.group_inputs();
    inputs.push(src);
    ctx.manifest(&inputs, &[json, tsv])
}

fn recommend_cmd(ctx: &Ctx, k: usize, owner: Option<&str>, out: Option<&PathBuf>) -> Result<()> {
    if k == 0 {
        return Err(Error::usage("--k must be positive"));
    }
    let (src, bundle) = final_bundle(ctx)?;
    let (ds, mined, corpus, _) = ctx.corpus(false)?;
    let mut seqs = build_sequences(&ds.checkins, &ds.pois, ctx.cfg.data.max_len);
    seqs.extend(build_sequences(&mined.checkins, &ds.pois, ctx.cfg.data.max_len));
    if let Some(o) = owner {
        seqs.retain(|s| s.owner_id == o);
        if seqs.is_empty() {
            return Err(Error::usage(format!("no check-ins for owner {o:?}")));
        }
    }
    let settings = pipeline::eval_settings(&ctx.cfg, ctx.flags);
    let enc = bundle.encoder(&corpus.pois, ctx.flags.use_sequencing_adapter, ctx.flags.style());
    let cache = if ctx.flags.use_aggregation_fusion && seqs.iter().any(|s| s.owner_kind == OwnerKind::Group) {
        MemberCache::build(&enc, corpus.user_sequences.values())?
    } else {
        MemberCache::default()
    };
    let rows = recommend(&bundle, &corpus.pois, &seqs, &settings, Some((&corpus.group_members, &cache)), k)?;
    let text = recommendations_tsv(&rows);
    match out {
        Some(p) => {
            fs::write(p, &text).map_err(|e| Error::io(p, e))?;
            let mut inputs = ctx.group_inputs();
            inputs.push(src);
            ctx.manifest(&inputs, &[p.clone()])?;
        }
        None => print!("{text}"),
    }
    Ok(())
}

fn sweep_cmd(ctx: &Ctx, param: &str, values: &[f64]) -> Result<()> {
    let param: SweepParam = param.parse()?;
    let values = if values.is_empty() { param.default_grid() } else { values.to_vec() };
    let init = ctx.rd.checkpoint("init");
    ctx.rd.require(&init, "run `init-poi-emb` before `sweep`")?;
    let bundle = ModelBundle::load(&init)?;
    let (_, _, corpus, _) = ctx.corpus(ctx.flags.use_ssl_pretraining)?;
    let found = Foundation {
        corpus,
        pretrain: None,
        bundle,
    };
    let rows = sweep(param, &values, &found, &ctx.cfg, ctx.flags, &mut ctx.metrics()?)?;
    let out = ctx.rd.file(&format!("sweep_{param}.tsv"));
    write_sweep_tsv(&out, &rows)?;
    for r in &rows {
        log::info!("{param}={}: group HR@10 {:.4}", r.value, r.report.groups.hr(10).unwrap_or(f64::NAN));
    }
    let mut inputs = ctx.group_inputs();
    inputs.extend([init, ctx.rd.labels()]);
    ctx.manifest(&inputs, &[out])
}

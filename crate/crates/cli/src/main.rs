//! `llmgpr` command-line interface.

mod commands;
mod rundir;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{CommandFactory, FromArgMatches, Parser, Subcommand};

use llmgpr::config::config_keys;

#[derive(Debug, Parser)]
#[command(name = "llmgpr", version, about = "Group POI recommendation with a quantized sequence model and low-rank adapters")]
pub struct Cli {
    /// TOML run configuration; documented defaults when omitted.
    #[arg(long, global = true)]
    pub config: Option<PathBuf>,

    /// Recompute outputs even when they already exist in the run directory.
    #[arg(long, global = true)]
    pub force: bool,

    /// Overrides `seed` from the config.
    #[arg(long, global = true)]
    pub seed: Option<u64>,

    /// Ablation flags, e.g. `ssl=off,fusion=off`; overrides `eval.flags`.
    #[arg(long, global = true)]
    pub flags: Option<String>,

    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Validates raw check-in, POI and social files and copies them into the run directory.
    Ingest(Overrides),
    /// Mines groups of friends who co-visit a POI within the time window.
    MineGroups(Overrides),
    /// Writes a deterministic synthetic corpus into the run directory.
    Synth(Overrides),
    /// Pretrains the base model on the training corpus, then quantizes and freezes it.
    PretrainBase(Overrides),
    /// Initializes POI token embeddings from the base model and attaches fresh adapters.
    InitPoiEmb(Overrides),
    /// Assigns trip-purpose labels to gap-split training sequences (writes labels.tsv).
    LabelPurposes(Overrides),
    /// Purpose pretraining of the sequencing adapter, POI and purpose embeddings.
    PretrainSsl(Overrides),
    /// Next-POI training of the sequencing adapter and POI embeddings.
    TrainSeq(Overrides),
    /// Trains the aggregation adapter on group sequences and member contexts.
    TrainAgg(Overrides),
    /// Leave-one-out evaluation of groups, users and cold-start groups.
    Eval(Overrides),
    /// Writes the top-k POIs for every owner as TSV.
    Recommend(RecommendArgs),
    /// Trains and evaluates once per value of `r` or `alpha`.
    Sweep(SweepArgs),
}

#[derive(Debug, Clone, clap::Args)]
pub struct Overrides {
    /// `section.key=value` config overrides.
    #[arg(value_name = "KEY=VALUE")]
    pub overrides: Vec<String>,
}

#[derive(Debug, Clone, clap::Args)]
pub struct RecommendArgs {
    /// Recommendations per owner.
    #[arg(long, default_value_t = 10)]
    pub k: usize,

    /// Only this owner (user or group id).
    #[arg(long)]
    pub owner: Option<String>,

    /// Output file; stdout when absent.
    #[arg(long)]
    pub out: Option<PathBuf>,

    #[command(flatten)]
    pub rest: Overrides,
}

#[derive(Debug, Clone, clap::Args)]
pub struct SweepArgs {
    /// `r` or `alpha`.
    #[arg(long)]
    pub param: String,

    /// Comma-separated values; the standard grid when absent.
    #[arg(long, value_delimiter = ',')]
    pub values: Vec<f64>,

    #[command(flatten)]
    pub rest: Overrides,
}

impl Command {
    pub fn name(&self) -> &'static str {
        match self {
            Command::Ingest(_) => "ingest",
            Command::MineGroups(_) => "mine-groups",
            Command::Synth(_) => "synth",
            Command::PretrainBase(_) => "pretrain-base",
            Command::InitPoiEmb(_) => "init-poi-emb",
            Command::LabelPurposes(_) => "label-purposes",
            Command::PretrainSsl(_) => "pretrain-ssl",
            Command::TrainSeq(_) => "train-seq",
            Command::TrainAgg(_) => "train-agg",
            Command::Eval(_) => "eval",
            Command::Recommend(_) => "recommend",
            Command::Sweep(_) => "sweep",
        }
    }

    pub fn overrides(&self) -> &[String] {
        match self {
            Command::Ingest(o)
            | Command::MineGroups(o)
            | Command::Synth(o)
            | Command::PretrainBase(o)
            | Command::InitPoiEmb(o)
            | Command::LabelPurposes(o)
            | Command::PretrainSsl(o)
            | Command::TrainSeq(o)
            | Command::TrainAgg(o)
            | Command::Eval(o) => &o.overrides,
            Command::Recommend(a) => &a.rest.overrides,
            Command::Sweep(a) => &a.rest.overrides,
        }
    }
}

/// Config key prefixes each command reads.
pub fn keys_read(command: &str) -> &'static [&'static str] {
    const PREP: &[&str] = &["seed", "data.max_len", "eval.cold_start_n", "eval.cold_start_max", "ssl.gap_days"];
    match command {
        "ingest" => &["data.checkins", "data.pois", "data.social"],
        "mine-groups" => &["data.window_seconds"],
        "synth" => &["seed", "data.synth_"],
        "pretrain-base" => &["seed", "data.max_len", "eval.cold_start_n", "eval.cold_start_max", "ssl.gap_days", "model.", "qlora.b"],
        "init-poi-emb" => &["seed", "qlora.r"],
        "label-purposes" => &["seed", "data.max_len", "eval.cold_start_n", "eval.cold_start_max", "ssl."],
        "pretrain-ssl" | "train-seq" | "train-agg" => &["seed", "data.max_len", "eval.cold_start_n", "eval.cold_start_max", "eval.flags", "eval.h", "ssl.gap_days", "train.", "qlora."],
        "eval" => &["seed", "data.max_len", "eval.", "ssl.gap_days", "train.alpha"],
        "recommend" => &["data.max_len", "eval.flags", "eval.h", "train.alpha"],
        "sweep" => &["seed", "data.max_len", "eval.", "ssl.gap_days", "train.", "qlora."],
        _ => PREP,
    }
}

fn help_for(command: &str) -> String {
    let prefixes = keys_read(command);
    let keys: Vec<String> = config_keys()
        .into_iter()
        .filter(|k| prefixes.iter().any(|p| if p.ends_with('.') || p.ends_with('_') { k.starts_with(p) } else { k == p }))
        .collect();
    format!(
        "Config keys read: {}\n\nOutputs go to $LLMGPR_RUN_DIR (default ./runs/<timestamp>).",
        keys.join(", ")
    )
}

fn cli_command() -> clap::Command {
    let mut cmd = Cli::command();
    let names: Vec<String> = cmd.get_subcommands().map(|s| s.get_name().to_string()).collect();
    for name in names {
        let help = help_for(&name);
        cmd = cmd.mut_subcommand(name, |s| s.after_help(help));
    }
    cmd
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info"))
        .format_timestamp(None)
        .init();
    let matches = cli_command().get_matches();
    let cli = match Cli::from_arg_matches(&matches) {
        Ok(c) => c,
        Err(e) => e.exit(),
    };
    match commands::run(&cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}

//! Run configuration: one TOML file with `[data]`, `[model]`, `[qlora]`,
//! `[train]`, `[ssl]` and `[eval]` sections, plus `section.key=value` overrides.

use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::corpus::{SynthConfig, DEFAULT_GAP_DAYS, DEFAULT_MAX_LEN, DEFAULT_WINDOW_SECONDS};
use crate::error::{Error, Result};
use crate::evalkit::{AblationFlags, DEFAULT_COLD_START_MAX, DEFAULT_H, DEFAULT_KS};
use crate::seqmodel::{ModelConfig, PretrainConfig, DEFAULT_MAX_WORDS, DEFAULT_MIN_FREQ};
use crate::ssl::ExternalConfig;
use crate::training::TrainConfig;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DataConfig {
    pub checkins: Option<PathBuf>,
    pub pois: Option<PathBuf>,
    pub social: Option<PathBuf>,
    pub window_seconds: i64,
    pub max_len: usize,
    pub synth_users: usize,
    pub synth_pois: usize,
    pub synth_clusters: usize,
    pub synth_checkins_per_user: usize,
    pub synth_group_rate: f64,
}

impl Default for DataConfig {
    fn default() -> Self {
        let s = SynthConfig::default();
        Self {
            checkins: None,
            pois: None,
            social: None,
            window_seconds: DEFAULT_WINDOW_SECONDS,
            max_len: DEFAULT_MAX_LEN,
            synth_users: s.n_users,
            synth_pois: s.n_pois,
            synth_clusters: s.n_clusters,
            synth_checkins_per_user: s.checkins_per_user,
            synth_group_rate: s.group_rate,
        }
    }
}

impl DataConfig {
    pub fn synth(&self) -> SynthConfig {
        SynthConfig {
            n_users: self.synth_users,
            n_pois: self.synth_pois,
            n_clusters: self.synth_clusters,
            checkins_per_user: self.synth_checkins_per_user,
            group_rate: self.synth_group_rate,
            ..SynthConfig::default()
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ModelSection {
    pub d: usize,
    pub n_layers: usize,
    pub n_heads: usize,
    pub ff_width: usize,
    pub max_positions: usize,
    pub dropout: f64,
    pub min_freq: usize,
    /// Word vocabulary cap; rarer words map to `<unk>`.
    pub max_words: usize,
    pub pretrain_epochs: usize,
    pub pretrain_lr: f64,
    pub pretrain_batch: usize,
    pub pretrain_context: usize,
    pub pretrain_max_windows: usize,
}

impl Default for ModelSection {
    fn default() -> Self {
        let m = ModelConfig::default();
        let p = PretrainConfig::default();
        Self {
            d: m.d,
            n_layers: m.n_layers,
            n_heads: m.n_heads,
            ff_width: m.ff_width,
            max_positions: m.max_positions,
            dropout: m.dropout,
            min_freq: DEFAULT_MIN_FREQ,
            max_words: DEFAULT_MAX_WORDS,
            pretrain_epochs: p.epochs,
            pretrain_lr: p.lr,
            pretrain_batch: p.batch,
            pretrain_context: p.context,
            pretrain_max_windows: p.max_windows,
        }
    }
}

impl ModelSection {
    pub fn model(&self) -> ModelConfig {
        ModelConfig {
            d: self.d,
            n_layers: self.n_layers,
            n_heads: self.n_heads,
            ff_width: self.ff_width,
            max_positions: self.max_positions,
            dropout: self.dropout,
        }
    }

    pub fn pretrain(&self) -> PretrainConfig {
        PretrainConfig {
            epochs: self.pretrain_epochs,
            lr: self.pretrain_lr,
            batch: self.pretrain_batch,
            context: self.pretrain_context,
            max_windows: self.pretrain_max_windows,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct QloraSection {
    pub r: usize,
    pub b: u8,
}

impl Default for QloraSection {
    fn default() -> Self {
        Self {
            r: crate::qlora::DEFAULT_RANK,
            b: crate::qlora::DEFAULT_BITS,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainSection {
    pub lr: f64,
    pub emb_lr: f64,
    pub agg_lr: f64,
    pub dropout: f64,
    pub batch: usize,
    pub max_epochs: usize,
    pub alpha: f64,
    pub patience: usize,
    pub weight_decay: f64,
    pub clip_norm: f64,
}

impl Default for TrainSection {
    fn default() -> Self {
        let t = TrainConfig::default();
        Self {
            lr: t.lr,
            emb_lr: t.emb_lr,
            agg_lr: t.agg_lr,
            dropout: t.dropout,
            batch: t.batch,
            max_epochs: t.max_epochs,
            alpha: t.alpha,
            patience: t.patience,
            weight_decay: t.weight_decay,
            clip_norm: t.clip_norm,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum LabelerKind {
    Heuristic,
    External,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SslSection {
    pub labeler: LabelerKind,
    /// Rule table file; the built-in table when absent.
    pub rules: Option<PathBuf>,
    pub gap_days: f64,
    pub url: String,
    pub model: String,
    pub timeout_secs: u64,
    pub retries: u32,
    pub backoff_ms: u64,
    pub concurrency: usize,
}

impl Default for SslSection {
    fn default() -> Self {
        let e = ExternalConfig::default();
        Self {
            labeler: LabelerKind::Heuristic,
            rules: None,
            gap_days: DEFAULT_GAP_DAYS,
            url: e.url,
            model: e.model,
            timeout_secs: e.timeout_secs,
            retries: e.retries,
            backoff_ms: e.backoff_ms,
            concurrency: e.concurrency,
        }
    }
}

impl SslSection {
    pub fn external(&self) -> ExternalConfig {
        ExternalConfig {
            url: self.url.clone(),
            model: self.model.clone(),
            timeout_secs: self.timeout_secs,
            retries: self.retries,
            backoff_ms: self.backoff_ms,
            concurrency: self.concurrency,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EvalSection {
    pub h: usize,
    pub ks: Vec<usize>,
    /// Cold-start holdout size; `min(200, 10%)` of qualifying groups when absent.
    pub cold_start_n: Option<usize>,
    pub cold_start_max: usize,
    /// Ablation flags, e.g. `"ssl=off,fusion=off"`.
    pub flags: String,
}

impl Default for EvalSection {
    fn default() -> Self {
        Self {
            h: DEFAULT_H,
            ks: DEFAULT_KS.to_vec(),
            cold_start_n: None,
            cold_start_max: DEFAULT_COLD_START_MAX,
            flags: String::new(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RunConfig {
    pub seed: u64,
    pub data: DataConfig,
    pub model: ModelSection,
    pub qlora: QloraSection,
    pub train: TrainSection,
    pub ssl: SslSection,
    pub eval: EvalSection,
}

/// Every configurable key as `section.key`, for help texts.
pub fn config_keys() -> Vec<String> {
    let value = toml::Value::try_from(RunConfig::default()).expect("config serializes");
    let mut keys = vec!["seed".to_string()];
    if let toml::Value::Table(t) = value {
        for (section, v) in t {
            if let toml::Value::Table(inner) = v {
                keys.extend(inner.keys().map(|k| format!("{section}.{k}")));
            }
        }
    }
    // optional keys are skipped by the serializer when unset
    for k in ["data.checkins", "data.pois", "data.social", "ssl.rules", "eval.cold_start_n"] {
        if !keys.iter().any(|x| x == k) {
            keys.push(k.to_string());
        }
    }
    keys.sort();
    keys
}

impl RunConfig {
    pub fn parse(text: &str) -> Result<Self> {
        toml::from_str(text).map_err(|e| Error::usage(format!("invalid config: {e}")))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::usage(format!("cannot read config {}: {e}", path.display())))?;
        Self::parse(&text)
    }

    /// Applies `section.key=value` overrides; values are TOML literals, with
    /// bare words taken as strings.
    pub fn with_overrides(&self, overrides: &[String]) -> Result<Self> {
        let mut value = toml::Value::try_from(self).map_err(|e| Error::usage(e.to_string()))?;
        for o in overrides {
            let (key, raw) = o
                .split_once('=')
                .ok_or_else(|| Error::usage(format!("override {o:?} is not of the form section.key=value")))?;
            let parsed: toml::Value = match toml::from_str::<toml::Table>(&format!("v = {raw}")) {
                Ok(mut t) => t.remove("v").expect("key present"),
                Err(_) => toml::Value::String(raw.to_string()),
            };
            let mut cursor = &mut value;
            let parts: Vec<&str> = key.trim().split('.').collect();
            for (i, part) in parts.iter().enumerate() {
                let table = cursor
                    .as_table_mut()
                    .ok_or_else(|| Error::usage(format!("override key {key:?} does not name a config field")))?;
                if i + 1 == parts.len() {
                    table.insert(part.to_string(), parsed.clone());
                    break;
                }
                cursor = table.entry(part.to_string()).or_insert_with(|| toml::Value::Table(Default::default()));
            }
        }
        let text = toml::to_string(&value).map_err(|e| Error::usage(e.to_string()))?;
        Self::parse(&text)
    }

    pub fn train_config(&self) -> TrainConfig {
        TrainConfig {
            lr: self.train.lr,
            emb_lr: self.train.emb_lr,
            agg_lr: self.train.agg_lr,
            dropout: self.train.dropout,
            batch: self.train.batch,
            max_epochs: self.train.max_epochs,
            alpha: self.train.alpha,
            r: self.qlora.r,
            b: self.qlora.b,
            seed: self.seed,
            patience: self.train.patience,
            weight_decay: self.train.weight_decay,
            clip_norm: self.train.clip_norm,
        }
    }

    pub fn flags(&self) -> Result<AblationFlags> {
        AblationFlags::parse(&self.eval.flags)
    }

    pub fn validate(&self) -> Result<()> {
        self.model.model().validate()?;
        self.train_config().validate()?;
        self.flags()?;
        if self.eval.h == 0 || self.eval.ks.is_empty() || self.eval.ks.contains(&0) {
            return Err(Error::usage("eval.h and every eval.ks entry must be positive"));
        }
        if !(self.ssl.gap_days > 0.0) {
            return Err(Error::usage("ssl.gap_days must be positive"));
        }
        if self.data.window_seconds < 0 || self.data.max_len == 0 {
            return Err(Error::usage("data.window_seconds must be non-negative and data.max_len positive"));
        }
        Ok(())
    }
}

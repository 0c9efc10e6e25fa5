//! The three adapter training stages: purpose pretraining, next-POI
//! sequencing and member aggregation.

mod bundle;
mod metrics;
mod stages;

pub use bundle::{Checksums, ModelBundle, BUNDLE_KIND};
pub use metrics::MetricsLog;
pub use stages::{poi_loss, poi_loss_grad, prefix_targets, pretrain_ssl, train_aggregation, train_sequencing, StageReport, TrainCorpus};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub const DEFAULT_EMB_LR: f64 = 1e-2;
pub const DEFAULT_AGG_LR: f64 = 1e-2;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    /// Sequencing adapter learning rate.
    pub lr: f64,
    /// Learning rate of the `E_poi` and `E_pur` tables.
    pub emb_lr: f64,
    /// Aggregation adapter learning rate.
    pub agg_lr: f64,
    pub dropout: f64,
    pub batch: usize,
    pub max_epochs: usize,
    pub alpha: f64,
    pub r: usize,
    pub b: u8,
    pub seed: u64,
    /// Epochs without validation improvement before stopping.
    pub patience: usize,
    pub weight_decay: f64,
    pub clip_norm: f64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            lr: 2e-4,
            emb_lr: DEFAULT_EMB_LR,
            agg_lr: DEFAULT_AGG_LR,
            dropout: 0.2,
            batch: 16,
            max_epochs: 5,
            alpha: crate::grouprep::DEFAULT_ALPHA,
            r: crate::qlora::DEFAULT_RANK,
            b: crate::qlora::DEFAULT_BITS,
            seed: 0,
            patience: 2,
            weight_decay: crate::optim::DEFAULT_WEIGHT_DECAY,
            clip_norm: crate::optim::DEFAULT_CLIP_NORM,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.lr > 0.0) || !(self.emb_lr > 0.0) || !(self.agg_lr > 0.0) || self.batch == 0 || self.max_epochs == 0 || self.r == 0 || self.patience == 0 || !(self.clip_norm > 0.0) {
            return Err(Error::usage("lr, emb_lr, agg_lr, batch, max_epochs, r, patience and clip_norm must be positive"));
        }
        if !(0.0..=1.0).contains(&self.alpha) {
            return Err(Error::usage("alpha must lie in [0, 1]"));
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return Err(Error::usage("dropout must lie in [0, 1)"));
        }
        if !(2..=8).contains(&self.b) {
            return Err(Error::usage("b must lie in 2..=8"));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Stage {
    Ssl,
    Sequencing,
    Aggregation,
}

impl Stage {
    pub fn name(self) -> &'static str {
        match self {
            Stage::Ssl => "ssl",
            Stage::Sequencing => "sequencing",
            Stage::Aggregation => "aggregation",
        }
    }
}

//! Hyperparameter sweeps over adapter rank and fusion weight.

use std::fmt;
use std::fs;
use std::path::Path;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use super::{AblationFlags, EvalReport};
use crate::config::RunConfig;
use crate::error::{Error, Result};
use crate::pipeline::{evaluate_bundle, train_aggregation_stage, train_sequence_stages, Foundation};
use crate::training::{MetricsLog, ModelBundle};

pub const ALPHA_GRID: [f64; 7] = [0.0, 0.1, 0.3, 0.5, 0.7, 0.9, 1.0];
pub const RANK_GRID: [usize; 5] = [4, 8, 16, 32, 64];

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum SweepParam {
    R,
    Alpha,
}

impl SweepParam {
    pub fn default_grid(self) -> Vec<f64> {
        match self {
            SweepParam::R => RANK_GRID.iter().map(|&r| r as f64).collect(),
            SweepParam::Alpha => ALPHA_GRID.to_vec(),
        }
    }
}

impl fmt::Display for SweepParam {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            SweepParam::R => "r",
            SweepParam::Alpha => "alpha",
        })
    }
}

impl FromStr for SweepParam {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "r" => Ok(SweepParam::R),
            "alpha" => Ok(SweepParam::Alpha),
            other => Err(Error::usage(format!("unknown sweep parameter {other:?}; expected r or alpha"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepRow {
    pub param: SweepParam,
    pub value: f64,
    pub report: EvalReport,
}

fn config_for(cfg: &RunConfig, param: SweepParam, value: f64) -> Result<RunConfig> {
    let mut c = cfg.clone();
    match param {
        SweepParam::R => {
            if value < 1.0 || value.fract() != 0.0 {
                return Err(Error::usage(format!("rank {value} is not a positive integer")));
            }
            c.qlora.r = value as usize;
        }
        SweepParam::Alpha => c.train.alpha = value,
    }
    c.validate()?;
    Ok(c)
}

/// Trains and evaluates once per value from a shared foundation. Alpha values
/// share one stage-1/2 bundle; rank values retrain every stage.
pub fn sweep(param: SweepParam, values: &[f64], found: &Foundation, cfg: &RunConfig, flags: AblationFlags, metrics: &mut MetricsLog) -> Result<Vec<SweepRow>> {
    if values.is_empty() {
        return Err(Error::usage("sweep needs at least one value"));
    }
    let configs = values.iter().map(|&v| config_for(cfg, param, v)).collect::<Result<Vec<_>>>()?;
    let mut rows = Vec::with_capacity(values.len());
    match param {
        SweepParam::Alpha => {
            let mut staged = found.bundle.clone();
            train_sequence_stages(&mut staged, &found.corpus, cfg, &flags, metrics)?;
            for (c, &v) in configs.iter().zip(values) {
                let mut bundle = staged.clone();
                train_aggregation_stage(&mut bundle, &found.corpus, c, &flags, metrics)?;
                let report = evaluate_bundle(&bundle, &found.corpus, c, flags)?;
                rows.push(SweepRow { param, value: v, report });
            }
        }
        SweepParam::R => {
            for (c, &v) in configs.iter().zip(values) {
                let b = &found.bundle;
                let mut bundle = ModelBundle::new(b.base.clone(), b.vocab.clone(), b.poi_emb.clone(), c.qlora.r, c.seed)?;
                train_sequence_stages(&mut bundle, &found.corpus, c, &flags, metrics)?;
                train_aggregation_stage(&mut bundle, &found.corpus, c, &flags, metrics)?;
                let report = evaluate_bundle(&bundle, &found.corpus, c, flags)?;
                rows.push(SweepRow { param, value: v, report });
            }
        }
    }
    Ok(rows)
}

/// One row per value and owner population.
pub fn sweep_tsv(rows: &[SweepRow]) -> String {
    let ks = rows.first().map(|r| r.report.groups.ks.clone()).unwrap_or_default();
    let mut out = String::from("param\tvalue\tpopulation\tn");
    for k in &ks {
        out.push_str(&format!("\tHR@{k}\tNDCG@{k}"));
    }
    out.push('\n');
    for row in rows {
        let r = &row.report;
        for (name, m) in [("groups", &r.groups), ("users", &r.users), ("cold_start", &r.cold_start)] {
            out.push_str(&format!("{}\t{}\t{name}\t{}", row.param, row.value, m.n_evaluated));
            for (hr, nd) in m.hr.iter().zip(&m.ndcg) {
                out.push_str(&format!("\t{hr:.4}\t{nd:.4}"));
            }
            out.push('\n');
        }
    }
    out
}

pub fn write_sweep_tsv(path: &Path, rows: &[SweepRow]) -> Result<()> {
    fs::write(path, sweep_tsv(rows)).map_err(|e| Error::io(path, e))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn grids_and_parsing() {
        assert_eq!(SweepParam::Alpha.default_grid(), vec![0.0, 0.1, 0.3, 0.5, 0.7, 0.9, 1.0]);
        assert_eq!(SweepParam::R.default_grid(), vec![4.0, 8.0, 16.0, 32.0, 64.0]);
        assert_eq!("alpha".parse::<SweepParam>().unwrap(), SweepParam::Alpha);
        assert!("beta".parse::<SweepParam>().is_err());
    }

    #[test]
    fn invalid_values_rejected() {
        let cfg = RunConfig::default();
        assert!(config_for(&cfg, SweepParam::R, 2.5).is_err());
        assert!(config_for(&cfg, SweepParam::Alpha, 1.5).is_err());
        assert_eq!(config_for(&cfg, SweepParam::R, 8.0).unwrap().qlora.r, 8);
    }
}

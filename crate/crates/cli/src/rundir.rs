//! Fixed run-directory layout.

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};
use std::time::{SystemTime, UNIX_EPOCH};

use serde::Serialize;

use llmgpr::config::RunConfig;
use llmgpr::store::digest_path;
use llmgpr::{Error, Result};

pub const RUN_DIR_ENV: &str = "LLMGPR_RUN_DIR";

#[derive(Debug, Clone)]
pub struct RunDir {
    pub root: PathBuf,
}

#[derive(Serialize)]
struct InputManifest<'a> {
    command: &'a str,
    config: &'a RunConfig,
    inputs: BTreeMap<String, String>,
    outputs: Vec<String>,
}

impl RunDir {
    pub fn from_env() -> Result<Self> {
        let root = match std::env::var_os(RUN_DIR_ENV) {
            Some(p) if !p.is_empty() => PathBuf::from(p),
            _ => {
                let secs = SystemTime::now().duration_since(UNIX_EPOCH).map(|d| d.as_secs()).unwrap_or(0);
                PathBuf::from("runs").join(secs.to_string())
            }
        };
        fs::create_dir_all(&root).map_err(|e| Error::io(&root, e))?;
        Ok(Self { root })
    }

    pub fn data(&self, name: &str) -> PathBuf {
        self.root.join("data").join(name)
    }

    pub fn checkins(&self) -> PathBuf {
        self.data("checkins.tsv")
    }

    pub fn pois(&self) -> PathBuf {
        self.data("pois.tsv")
    }

    pub fn social(&self) -> PathBuf {
        self.data("social.tsv")
    }

    pub fn groups(&self) -> PathBuf {
        self.data("groups.tsv")
    }

    pub fn group_checkins(&self) -> PathBuf {
        self.data("group_checkins.tsv")
    }

    pub fn checkpoint(&self, name: &str) -> PathBuf {
        self.root.join("checkpoints").join(name)
    }

    /// Stage checkpoint of one ablation variant.
    pub fn stage(&self, variant: &str, stage: &str) -> PathBuf {
        self.root.join("checkpoints").join(variant).join(stage)
    }

    pub fn labels(&self) -> PathBuf {
        self.root.join("labels.tsv")
    }

    pub fn metrics(&self) -> PathBuf {
        self.root.join("metrics.jsonl")
    }

    pub fn file(&self, name: &str) -> PathBuf {
        self.root.join(name)
    }

    pub fn rel(&self, p: &Path) -> String {
        p.strip_prefix(&self.root).unwrap_or(p).to_string_lossy().into_owned()
    }

    /// Fails with a stage-order usage error when `path` has not been produced yet.
    pub fn require(&self, path: &Path, hint: &str) -> Result<()> {
        if path.exists() {
            Ok(())
        } else {
            Err(Error::usage(format!("{} does not exist; {hint}", self.rel(path))))
        }
    }

    /// Records the hash of every input next to the command's outputs.
    pub fn write_manifest(&self, command: &str, config: &RunConfig, inputs: &[PathBuf], outputs: &[PathBuf]) -> Result<()> {
        let mut hashes = BTreeMap::new();
        for p in inputs.iter().filter(|p| p.exists()) {
            hashes.insert(self.rel(p), digest_path(p)?);
        }
        let m = InputManifest {
            command,
            config,
            inputs: hashes,
            outputs: outputs.iter().map(|p| self.rel(p)).collect(),
        };
        let path = self.root.join("manifests").join(format!("{command}.json"));
        fs::create_dir_all(path.parent().expect("has parent")).map_err(|e| Error::io(&path, e))?;
        fs::write(&path, serde_json::to_string_pretty(&m)? + "\n").map_err(|e| Error::io(&path, e))
    }
}

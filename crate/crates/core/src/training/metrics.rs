use std::fs::{File, OpenOptions};
use std::io::Write;
use std::path::Path;

use serde_json::{json, Value};

use crate::error::{Error, Result};

/// Per-step training records, optionally appended to a JSON-lines file.
#[derive(Default)]
pub struct MetricsLog {
    file: Option<File>,
    pub records: Vec<Value>,
}

impl MetricsLog {
    pub fn in_memory() -> Self {
        Self::default()
    }

    pub fn append_to(path: &Path) -> Result<Self> {
        let file = OpenOptions::new().create(true).append(true).open(path).map_err(|e| Error::io(path, e))?;
        Ok(Self {
            file: Some(file),
            records: Vec::new(),
        })
    }

    pub fn log(&mut self, stage: &str, epoch: usize, step: u64, loss: f64, val: Option<(&str, f64)>) -> Result<()> {
        let mut rec = json!({"stage": stage, "epoch": epoch, "step": step, "loss": loss});
        if let Some((name, v)) = val {
            rec[name] = json!(v);
        }
        if let Some(f) = &mut self.file {
            writeln!(f, "{rec}").map_err(|e| Error::io("metrics.jsonl", e))?;
        }
        self.records.push(rec);
        Ok(())
    }
}

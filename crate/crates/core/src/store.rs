//! Checkpoint directories: a `manifest.json` index plus one raw
//! little-endian file per tensor.

use std::fs;
use std::path::{Path, PathBuf};

use ndarray::Array2;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::Matrix;

pub const MANIFEST: &str = "manifest.json";

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum DType {
    F32,
    U8,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TensorEntry {
    pub name: String,
    pub file: String,
    pub shape: Vec<usize>,
    pub dtype: DType,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub kind: String,
    pub meta: serde_json::Value,
    pub tensors: Vec<TensorEntry>,
}

/// SHA-256 over a file, or over every file below a directory in path order
/// (relative names included).
pub fn digest_path(path: &Path) -> Result<String> {
    use sha2::{Digest, Sha256};
    fn walk(root: &Path, dir: &Path, h: &mut Sha256) -> Result<()> {
        let mut entries: Vec<PathBuf> = fs::read_dir(dir)
            .map_err(|e| Error::io(dir, e))?
            .map(|e| e.map(|e| e.path()).map_err(|err| Error::io(dir, err)))
            .collect::<Result<_>>()?;
        entries.sort();
        for p in entries {
            if p.is_dir() {
                walk(root, &p, h)?;
            } else {
                let rel = p.strip_prefix(root).unwrap_or(&p).to_string_lossy().into_owned();
                h.update(rel.as_bytes());
                h.update([0]);
                h.update(fs::read(&p).map_err(|e| Error::io(&p, e))?);
            }
        }
        Ok(())
    }
    let mut h = Sha256::new();
    if path.is_dir() {
        walk(path, path, &mut h)?;
    } else {
        h.update(fs::read(path).map_err(|e| Error::io(path, e))?);
    }
    Ok(hex::encode(h.finalize()))
}

/// Accumulates tensors for one checkpoint directory.
pub struct CheckpointWriter {
    dir: PathBuf,
    manifest: Manifest,
}

fn file_name(name: &str, dtype: DType) -> String {
    let ext = match dtype {
        DType::F32 => "f32",
        DType::U8 => "u8",
    };
    format!("{name}.{ext}")
}

impl CheckpointWriter {
    pub fn create(dir: &Path, kind: &str, meta: serde_json::Value) -> Result<Self> {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        Ok(Self {
            dir: dir.to_path_buf(),
            manifest: Manifest {
                kind: kind.to_string(),
                meta,
                tensors: Vec::new(),
            },
        })
    }

    fn push(&mut self, name: &str, shape: Vec<usize>, dtype: DType, bytes: Vec<u8>) -> Result<()> {
        let file = file_name(name, dtype);
        let path = self.dir.join(&file);
        fs::write(&path, bytes).map_err(|e| Error::io(&path, e))?;
        self.manifest.tensors.push(TensorEntry {
            name: name.to_string(),
            file,
            shape,
            dtype,
        });
        Ok(())
    }

    pub fn matrix(&mut self, name: &str, m: &Matrix) -> Result<()> {
        self.f32s(name, vec![m.nrows(), m.ncols()], m.iter().copied())
    }

    pub fn f32s(&mut self, name: &str, shape: Vec<usize>, values: impl Iterator<Item = f64>) -> Result<()> {
        let bytes: Vec<u8> = values.flat_map(|v| (v as f32).to_le_bytes()).collect();
        self.push(name, shape, DType::F32, bytes)
    }

    pub fn bytes(&mut self, name: &str, shape: Vec<usize>, bytes: Vec<u8>) -> Result<()> {
        self.push(name, shape, DType::U8, bytes)
    }

    pub fn finish(self) -> Result<()> {
        let path = self.dir.join(MANIFEST);
        let text = serde_json::to_string_pretty(&self.manifest)?;
        fs::write(&path, text + "\n").map_err(|e| Error::io(&path, e))
    }
}

pub struct CheckpointReader {
    dir: PathBuf,
    pub manifest: Manifest,
}

impl CheckpointReader {
    pub fn open(dir: &Path, kind: &str) -> Result<Self> {
        let path = dir.join(MANIFEST);
        if !path.exists() {
            return Err(Error::usage(format!("no checkpoint at {}", dir.display())));
        }
        let text = fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?;
        let manifest: Manifest = serde_json::from_str(&text)?;
        if manifest.kind != kind {
            return Err(Error::data(format!(
                "{}: expected a {kind} checkpoint, found {}",
                dir.display(),
                manifest.kind
            )));
        }
        Ok(Self {
            dir: dir.to_path_buf(),
            manifest,
        })
    }

    pub fn meta(&self) -> &serde_json::Value {
        &self.manifest.meta
    }

    fn entry(&self, name: &str, dtype: DType) -> Result<(&TensorEntry, Vec<u8>)> {
        let entry = self
            .manifest
            .tensors
            .iter()
            .find(|t| t.name == name)
            .ok_or_else(|| Error::data(format!("{}: tensor {name} missing", self.dir.display())))?;
        if entry.dtype != dtype {
            return Err(Error::data(format!("tensor {name} has dtype {:?}, expected {dtype:?}", entry.dtype)));
        }
        let path = self.dir.join(&entry.file);
        let bytes = fs::read(&path).map_err(|e| Error::io(&path, e))?;
        let n: usize = entry.shape.iter().product();
        let width = if dtype == DType::F32 { 4 } else { 1 };
        if bytes.len() != n * width {
            return Err(Error::data(format!("{}: expected {} bytes, found {}", path.display(), n * width, bytes.len())));
        }
        Ok((entry, bytes))
    }

    pub fn f32s(&self, name: &str) -> Result<(Vec<usize>, Vec<f64>)> {
        let (entry, bytes) = self.entry(name, DType::F32)?;
        let values = bytes
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]) as f64)
            .collect();
        Ok((entry.shape.clone(), values))
    }

    pub fn matrix(&self, name: &str) -> Result<Matrix> {
        let (shape, values) = self.f32s(name)?;
        if shape.len() != 2 {
            return Err(Error::data(format!("tensor {name} is not a matrix")));
        }
        Array2::from_shape_vec((shape[0], shape[1]), values).map_err(|e| Error::data(e.to_string()))
    }

    pub fn vector(&self, name: &str) -> Result<ndarray::Array1<f64>> {
        let (_, values) = self.f32s(name)?;
        Ok(values.into())
    }

    pub fn bytes(&self, name: &str) -> Result<(Vec<usize>, Vec<u8>)> {
        let (entry, bytes) = self.entry(name, DType::U8)?;
        Ok((entry.shape.clone(), bytes))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::array;

    #[test]
    fn round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let m = array![[1.0, -2.5], [0.125, 3.0]];
        let mut w = CheckpointWriter::create(dir.path(), "test", serde_json::json!({"k": 1})).unwrap();
        w.matrix("m", &m).unwrap();
        w.bytes("q", vec![3], vec![1, 2, 3]).unwrap();
        w.finish().unwrap();
        let r = CheckpointReader::open(dir.path(), "test").unwrap();
        assert_eq!(r.matrix("m").unwrap(), m);
        assert_eq!(r.bytes("q").unwrap(), (vec![3], vec![1, 2, 3]));
        assert_eq!(r.meta()["k"], 1);
        assert!(r.matrix("missing").is_err());
        assert!(CheckpointReader::open(dir.path(), "other").is_err());
    }

    #[test]
    fn truncated_file_is_data_error() {
        let dir = tempfile::tempdir().unwrap();
        let mut w = CheckpointWriter::create(dir.path(), "test", serde_json::Value::Null).unwrap();
        w.matrix("m", &array![[1.0, 2.0]]).unwrap();
        w.finish().unwrap();
        fs::write(dir.path().join("m.f32"), [0u8; 3]).unwrap();
        let r = CheckpointReader::open(dir.path(), "test").unwrap();
        assert!(matches!(r.matrix("m"), Err(Error::Data(_))));
    }
}

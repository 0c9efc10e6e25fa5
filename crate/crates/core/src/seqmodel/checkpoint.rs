//! Saving and loading the frozen base model, its vocabulary and adapter sets.

use std::fs;
use std::path::Path;

use ndarray::{Array1, Array2};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::qlora::{Adapter, AdapterKind, AdapterSet, QuantizedLinear};
use crate::store::{CheckpointReader, CheckpointWriter};

use super::model::{BaseModel, Block, LayerNorm, Linear, ModelConfig};
use super::vocab::Vocabulary;

pub const BASE_KIND: &str = "base";
pub const ADAPTER_KIND: &str = "adapters";
pub const VOCAB_FILE: &str = "vocab.tsv";

#[derive(Serialize, Deserialize)]
struct LayerQuant {
    path: String,
    delta: f64,
    w_min: f64,
}

#[derive(Serialize, Deserialize)]
struct BaseMeta {
    config: ModelConfig,
    bits: u8,
    vocab_file: String,
    n_words: usize,
    n_pois: usize,
    layers: Vec<LayerQuant>,
}

fn ln_save(w: &mut CheckpointWriter, prefix: &str, ln: &LayerNorm) -> Result<()> {
    w.f32s(&format!("{prefix}.gain"), vec![ln.gain.len()], ln.gain.iter().copied())?;
    w.f32s(&format!("{prefix}.bias"), vec![ln.bias.len()], ln.bias.iter().copied())
}

fn ln_load(r: &CheckpointReader, prefix: &str) -> Result<LayerNorm> {
    Ok(LayerNorm {
        gain: r.vector(&format!("{prefix}.gain"))?,
        bias: r.vector(&format!("{prefix}.bias"))?,
    })
}

/// Writes a frozen base model and its vocabulary into `dir`.
pub fn save_base(dir: &Path, base: &BaseModel, vocab: &Vocabulary) -> Result<()> {
    if !base.is_frozen() {
        return Err(Error::usage("only a frozen base model can be checkpointed"));
    }
    let paths = base.linear_layers();
    let mut layers = Vec::new();
    let mut bits = 0;
    for (block, chunk) in base.blocks.iter().zip(paths.chunks(super::LINEARS_PER_BLOCK)) {
        for (lin, (path, _, _)) in block_linears(block).into_iter().zip(chunk) {
            let q = lin.quant.as_ref().expect("frozen");
            bits = q.bits;
            layers.push(LayerQuant {
                path: path.clone(),
                delta: q.delta,
                w_min: q.w_min,
            });
        }
    }
    let meta = BaseMeta {
        config: base.config.clone(),
        bits,
        vocab_file: VOCAB_FILE.into(),
        n_words: vocab.num_words(),
        n_pois: vocab.num_pois(),
        layers,
    };
    let mut w = CheckpointWriter::create(dir, BASE_KIND, serde_json::to_value(&meta)?)?;
    w.matrix("word_emb", &base.word_emb)?;
    w.matrix("pos_emb", &base.pos_emb)?;
    for (i, block) in base.blocks.iter().enumerate() {
        ln_save(&mut w, &format!("blocks.{i}.ln1"), &block.ln1)?;
        ln_save(&mut w, &format!("blocks.{i}.ln2"), &block.ln2)?;
        for (lin, (path, o, n)) in block_linears(block).into_iter().zip(&paths[i * super::LINEARS_PER_BLOCK..]) {
            let q = lin.quant.as_ref().expect("frozen");
            w.bytes(&format!("{path}.wq"), vec![*o, *n], q.wq.iter().copied().collect())?;
            w.f32s(&format!("{path}.bias"), vec![*o], q.bias.iter().copied())?;
        }
    }
    ln_save(&mut w, "final_norm", &base.final_norm)?;
    w.finish()?;
    let vpath = dir.join(VOCAB_FILE);
    fs::write(&vpath, vocab.to_tsv()).map_err(|e| Error::io(&vpath, e))
}

fn block_linears(b: &Block) -> [&Linear; super::LINEARS_PER_BLOCK] {
    [&b.q, &b.k, &b.v, &b.o, &b.up, &b.down]
}

pub fn load_base(dir: &Path) -> Result<(BaseModel, Vocabulary)> {
    let r = CheckpointReader::open(dir, BASE_KIND)?;
    let meta: BaseMeta = serde_json::from_value(r.meta().clone())?;
    meta.config.validate()?;
    let vpath = dir.join(&meta.vocab_file);
    let vocab = Vocabulary::from_tsv(&fs::read_to_string(&vpath).map_err(|e| Error::io(&vpath, e))?)?;
    if vocab.num_words() != meta.n_words || vocab.num_pois() != meta.n_pois {
        return Err(Error::data("vocabulary does not match the checkpoint manifest"));
    }
    let mut quant = meta.layers.iter();
    let mut load_linear = |path: String| -> Result<Linear> {
        let lq = quant.next().ok_or_else(|| Error::data("manifest lists too few linear layers"))?;
        if lq.path != path {
            return Err(Error::data(format!("manifest layer {} where {path} was expected", lq.path)));
        }
        let (shape, bytes) = r.bytes(&format!("{path}.wq"))?;
        let wq = Array2::from_shape_vec((shape[0], shape[1]), bytes).map_err(|e| Error::data(e.to_string()))?;
        let bias: Array1<f64> = r.vector(&format!("{path}.bias"))?;
        Ok(Linear::from_quantized(QuantizedLinear {
            wq,
            delta: lq.delta,
            w_min: lq.w_min,
            bias,
            bits: meta.bits,
        }))
    };
    let mut blocks = Vec::with_capacity(meta.config.n_layers);
    for i in 0..meta.config.n_layers {
        let p = |n: &str| format!("blocks.{i}.{n}");
        blocks.push(Block {
            ln1: ln_load(&r, &p("ln1"))?,
            q: load_linear(p("attn.q"))?,
            k: load_linear(p("attn.k"))?,
            v: load_linear(p("attn.v"))?,
            o: load_linear(p("attn.o"))?,
            ln2: ln_load(&r, &p("ln2"))?,
            up: load_linear(p("ff.up"))?,
            down: load_linear(p("ff.down"))?,
        });
    }
    let base = BaseModel {
        config: meta.config.clone(),
        word_emb: r.matrix("word_emb")?,
        pos_emb: r.matrix("pos_emb")?,
        blocks,
        final_norm: ln_load(&r, "final_norm")?,
    };
    Ok((base, vocab))
}

#[derive(Serialize, Deserialize)]
struct AdapterMeta {
    kind: AdapterKind,
    rank: usize,
    paths: Vec<String>,
}

/// Writes an adapter set under `<dir>/adapters/<name>/`.
pub fn save_adapters(dir: &Path, set: &AdapterSet) -> Result<()> {
    let sub = dir.join("adapters").join(set.kind.name());
    let meta = AdapterMeta {
        kind: set.kind,
        rank: set.rank(),
        paths: set.paths.clone(),
    };
    let mut w = CheckpointWriter::create(&sub, ADAPTER_KIND, serde_json::to_value(&meta)?)?;
    for (path, ad) in set.paths.iter().zip(&set.adapters) {
        w.matrix(&format!("{path}.A"), &ad.a)?;
        w.matrix(&format!("{path}.B"), &ad.b)?;
    }
    w.finish()
}

/// Loads `<dir>/adapters/<name>/` and checks it covers `base`'s layers.
pub fn load_adapters(dir: &Path, kind: AdapterKind, base: &BaseModel) -> Result<AdapterSet> {
    let sub = dir.join("adapters").join(kind.name());
    let r = CheckpointReader::open(&sub, ADAPTER_KIND)?;
    let meta: AdapterMeta = serde_json::from_value(r.meta().clone())?;
    let expected: Vec<String> = base.linear_layers().into_iter().map(|(p, _, _)| p).collect();
    if meta.paths != expected || meta.kind != kind {
        return Err(Error::data(format!("{}: adapters do not match the base model", sub.display())));
    }
    let mut adapters = Vec::with_capacity(meta.paths.len());
    for path in &meta.paths {
        adapters.push(Adapter {
            a: r.matrix(&format!("{path}.A"))?,
            b: r.matrix(&format!("{path}.B"))?,
        });
    }
    Ok(AdapterSet {
        kind,
        paths: meta.paths,
        adapters,
    })
}

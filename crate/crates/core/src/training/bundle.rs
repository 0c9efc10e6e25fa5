//! The frozen base plus every trainable tensor of the recommender.

use std::path::Path;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::corpus::PoiTable;
use crate::error::{Error, Result};
use crate::grouprep::Encoder;
use crate::qlora::{AdapterKind, AdapterSet};
use crate::seqmodel::{load_adapters, load_base, save_adapters, save_base, BaseModel, PoiStyle, Vocabulary};
use crate::ssl::{init_purpose_matrix, NUM_PURPOSES, PURPOSES};
use crate::store::{CheckpointReader, CheckpointWriter};
use crate::tensor::{round_to_f32, Checksum, Matrix};

pub const BUNDLE_KIND: &str = "bundle";

#[derive(Debug, Clone)]
pub struct ModelBundle {
    pub base: BaseModel,
    pub vocab: Vocabulary,
    /// `E_poi`, one row per POI.
    pub poi_emb: Matrix,
    /// `Θ'_s`.
    pub seq: AdapterSet,
    /// `Θ'_a`.
    pub agg: AdapterSet,
    /// `E_pur`, stored `L × d`.
    pub pur: Matrix,
}

/// SHA-256 digests of each tensor group.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Checksums {
    pub base: String,
    pub poi_emb: String,
    pub seq: String,
    pub agg: String,
    pub pur: String,
}

fn matrix_checksum(m: &Matrix) -> String {
    let mut h = Checksum::new();
    h.update_f64s(m.iter());
    h.finish()
}

#[derive(Serialize, Deserialize)]
struct BundleMeta {
    purposes: Vec<String>,
    rank: usize,
}

impl ModelBundle {
    /// Fresh adapters (`B = 0`) and a small random purpose matrix around a frozen base.
    pub fn new(base: BaseModel, vocab: Vocabulary, poi_emb: Matrix, r: usize, seed: u64) -> Result<Self> {
        if !base.is_frozen() {
            return Err(Error::usage("the base model must be frozen before adapters are attached"));
        }
        if poi_emb.nrows() != vocab.num_pois() || poi_emb.ncols() != base.d() {
            return Err(Error::usage(format!(
                "POI embedding matrix is {}x{}, expected {}x{}",
                poi_emb.nrows(),
                poi_emb.ncols(),
                vocab.num_pois(),
                base.d()
            )));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let seq = base.init_adapters(AdapterKind::Sequencing, r, &mut rng)?;
        let agg = base.init_adapters(AdapterKind::Aggregation, r, &mut rng)?;
        let pur = init_purpose_matrix(base.d(), &mut rng);
        let mut bundle = Self {
            base,
            vocab,
            poi_emb,
            seq,
            agg,
            pur,
        };
        bundle.round_trainables();
        Ok(bundle)
    }

    /// Rounds every trainable tensor to f32 so the in-memory bundle equals its checkpoint.
    pub fn round_trainables(&mut self) {
        round_to_f32(&mut self.poi_emb);
        round_to_f32(&mut self.pur);
        for set in [&mut self.seq, &mut self.agg] {
            for ad in &mut set.adapters {
                round_to_f32(&mut ad.a);
                round_to_f32(&mut ad.b);
            }
        }
    }

    pub fn d(&self) -> usize {
        self.base.d()
    }

    /// Sequence encoder `Θ_s`, optionally without its adapter.
    pub fn encoder<'a>(&'a self, pois: &'a PoiTable, use_adapter: bool, style: PoiStyle) -> Encoder<'a> {
        Encoder {
            base: &self.base,
            vocab: &self.vocab,
            pois,
            poi_emb: Some(&self.poi_emb),
            adapters: use_adapter.then_some(&self.seq),
            style,
        }
    }

    pub fn checksums(&self) -> Checksums {
        Checksums {
            base: self.base.checksum(),
            poi_emb: matrix_checksum(&self.poi_emb),
            seq: self.seq.checksum(),
            agg: self.agg.checksum(),
            pur: matrix_checksum(&self.pur),
        }
    }

    pub fn save(&self, dir: &Path) -> Result<()> {
        save_base(&dir.join("base"), &self.base, &self.vocab)?;
        let meta = BundleMeta {
            purposes: PURPOSES.iter().map(|s| s.to_string()).collect(),
            rank: self.seq.rank(),
        };
        let mut w = CheckpointWriter::create(dir, BUNDLE_KIND, serde_json::to_value(&meta)?)?;
        w.matrix("poi_emb", &self.poi_emb)?;
        w.matrix("pur", &self.pur)?;
        w.finish()?;
        save_adapters(dir, &self.seq)?;
        save_adapters(dir, &self.agg)
    }

    pub fn load(dir: &Path) -> Result<Self> {
        let (base, vocab) = load_base(&dir.join("base"))?;
        let r = CheckpointReader::open(dir, BUNDLE_KIND)?;
        let meta: BundleMeta = serde_json::from_value(r.meta().clone())?;
        if meta.purposes.len() != NUM_PURPOSES || meta.purposes.iter().zip(PURPOSES).any(|(a, b)| a != b) {
            return Err(Error::data("checkpoint purpose labels differ from this build's taxonomy"));
        }
        let poi_emb = r.matrix("poi_emb")?;
        let pur = r.matrix("pur")?;
        if poi_emb.dim() != (vocab.num_pois(), base.d()) || pur.dim() != (NUM_PURPOSES, base.d()) {
            return Err(Error::data("checkpoint embedding shapes do not match the base model"));
        }
        let seq = load_adapters(dir, AdapterKind::Sequencing, &base)?;
        let agg = load_adapters(dir, AdapterKind::Aggregation, &base)?;
        Ok(Self {
            base,
            vocab,
            poi_emb,
            seq,
            agg,
            pur,
        })
    }
}

#![allow(dead_code)]

use llmgpr::corpus::{CheckInItem, OwnerKind, Poi, PoiTable, Sequence};
use llmgpr::qlora::AdapterSet;
use llmgpr::seqmodel::{build_vocab, init_poi_embeddings, vocab_corpus, BaseModel, ModelConfig, PoiStyle};
use llmgpr::tensor::{softmax_cross_entropy, Matrix};
use llmgpr::training::ModelBundle;
use ndarray::Array2;
use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rand::SeedableRng;

pub fn tiny_model() -> ModelConfig {
    ModelConfig {
        d: 8,
        n_layers: 2,
        n_heads: 2,
        ff_width: 16,
        max_positions: 160,
        dropout: 0.0,
    }
}

/// `n` POIs on a small grid with two categories.
pub fn grid_pois(n: usize) -> PoiTable {
    PoiTable::new(
        (0..n)
            .map(|i| Poi {
                id: format!("p{i:02}"),
                name: format!("place {i}"),
                category: if i % 2 == 0 { "Cafe" } else { "Museum" }.into(),
                lat: 40.70 + 0.003 * (i / 5) as f64,
                lon: -74.00 + 0.004 * (i % 5) as f64,
                address: None,
                description: None,
            })
            .collect(),
    )
    .unwrap()
}

pub fn sequence(owner: &str, kind: OwnerKind, pois_in_order: &[usize], table: &PoiTable) -> Sequence {
    let items = pois_in_order
        .iter()
        .enumerate()
        .map(|(i, &poi)| CheckInItem { poi, timestamp: 1_000_000 + 5_400 * i as i64 })
        .collect();
    Sequence::from_items(owner, kind, items, table)
}

/// A frozen tiny base with adapters attached, built over `seqs`.
pub fn tiny_bundle(pois: &PoiTable, seqs: &[Sequence], r: usize, seed: u64) -> ModelBundle {
    let vocab = build_vocab(pois, &vocab_corpus(pois, seqs), 1).unwrap();
    let mut base = BaseModel::init(&tiny_model(), vocab.num_words(), seed).unwrap();
    base.freeze(4).unwrap();
    let emb = init_poi_embeddings(&base, &vocab, pois).unwrap();
    ModelBundle::new(base, vocab, emb, r, seed).unwrap()
}

/// Replaces every adapter entry with a draw from N(0, std), so both A and B carry gradient.
pub fn randomize(set: &mut AdapterSet, std: f64, rng: &mut ChaCha8Rng) {
    for p in set.params_mut() {
        for v in p.iter_mut() {
            *v = std * rng.sample::<f64, _>(rand_distr::StandardNormal);
        }
    }
}

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

/// Summed next-POI cross-entropy over every prefix of `seq`, with its
/// gradients for `Θ'_s` and `E_poi`.
pub fn sequencing_loss(bundle: &ModelBundle, pois: &PoiTable, seq: &Sequence) -> (f64, AdapterSet, Matrix) {
    let enc = bundle.encoder(pois, true, PoiStyle::Token);
    let pass = enc.prefix_pass(seq, 0.0, None).unwrap();
    let n = seq.len() - 1;
    let embs = pass.embeddings.slice(ndarray::s![..n, ..]).to_owned();
    let logits = embs.dot(&bundle.poi_emb.t());
    let mut dlogits = Array2::zeros(logits.dim());
    let mut loss = 0.0;
    for j in 0..n {
        let (l, g) = softmax_cross_entropy(logits.row(j), seq.items[j + 1].poi);
        loss += l;
        dlogits.row_mut(j).assign(&g);
    }
    let mut d_seq = bundle.seq.zeros_like();
    let mut d_poi = dlogits.t().dot(&embs);
    let mut d_emb = Array2::zeros(pass.embeddings.dim());
    d_emb.slice_mut(ndarray::s![..n, ..]).assign(&dlogits.dot(&bundle.poi_emb));
    pass.backward(&enc, &d_emb, Some(&mut d_seq), Some(&mut d_poi));
    (loss, d_seq, d_poi)
}

/// Largest relative error between analytic and central-difference gradients
/// over the entries reached by `param`.
pub fn worst_relative_error<F, P>(bundle: &ModelBundle, analytic: &[f64], loss: F, mut param: P, step: f64) -> f64
where
    F: Fn(&ModelBundle) -> f64,
    P: FnMut(&mut ModelBundle, usize) -> &mut f64,
{
    let mut work = bundle.clone();
    let mut worst = 0.0f64;
    for (i, &a) in analytic.iter().enumerate() {
        let orig = *param(&mut work, i);
        *param(&mut work, i) = orig + step;
        let up = loss(&work);
        *param(&mut work, i) = orig - step;
        let down = loss(&work);
        *param(&mut work, i) = orig;
        let numeric = (up - down) / (2.0 * step);
        let scale = a.abs().max(numeric.abs()).max(1e-4);
        worst = worst.max((a - numeric).abs() / scale);
    }
    worst
}

/// A small synthetic world and model that trains every stage in seconds.
pub fn tiny_run_config(seed: u64) -> llmgpr::config::RunConfig {
    let overrides: Vec<String> = [
        "data.synth_users=24",
        "data.synth_pois=40",
        "data.synth_clusters=2",
        "data.synth_checkins_per_user=12",
        "data.synth_group_rate=0.3",
        "model.d=8",
        "model.n_layers=1",
        "model.n_heads=2",
        "model.ff_width=16",
        "model.max_positions=256",
        "model.pretrain_epochs=1",
        "model.pretrain_context=32",
        "model.pretrain_max_windows=16",
        "model.max_words=256",
        "qlora.r=2",
        "train.max_epochs=2",
        "train.batch=8",
        "train.lr=0.01",
        "eval.h=20",
        "eval.cold_start_n=0",
    ]
    .iter()
    .map(|s| s.to_string())
    .collect();
    let mut cfg = llmgpr::config::RunConfig::default().with_overrides(&overrides).unwrap();
    cfg.seed = seed;
    cfg
}

pub fn tiny_foundation(cfg: &llmgpr::config::RunConfig) -> llmgpr::pipeline::Foundation {
    let ds = llmgpr::corpus::generate_synthetic(&cfg.data.synth(), cfg.seed).unwrap();
    let labeler = llmgpr::pipeline::labeler(cfg).unwrap();
    llmgpr::pipeline::foundation(&ds, cfg, labeler.as_ref()).unwrap()
}
pub mod protocol;
pub mod grad;

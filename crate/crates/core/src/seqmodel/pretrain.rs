//! Next-token pretraining of the base model on rendered prompts.

use ndarray::Array2;
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::corpus::{PoiTable, Sequence};
use crate::error::{Error, Result};
use crate::optim::{clip_global_norm, AdamW, DEFAULT_CLIP_NORM, DEFAULT_WEIGHT_DECAY};
use crate::tensor::softmax_cross_entropy;

use super::model::{BaseModel, ModelConfig, RunOptions, StackGrads};
use super::prompt::{render_poi_prompt, render_sequence_prompt, PoiStyle};
use super::vocab::{Vocabulary, UNK};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct PretrainConfig {
    pub epochs: usize,
    pub lr: f64,
    pub batch: usize,
    /// Tokens per training window.
    pub context: usize,
    /// Upper bound on windows per epoch (0 = all).
    pub max_windows: usize,
}

impl Default for PretrainConfig {
    fn default() -> Self {
        Self {
            epochs: 3,
            lr: 1e-3,
            batch: 16,
            context: 128,
            max_windows: 0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PretrainReport {
    pub initial_loss: f64,
    pub final_loss: f64,
    pub steps: u64,
    pub windows: usize,
}

const PROBE_WINDOWS: usize = 32;

/// Token streams for pretraining: every POI description prompt and every
/// sequence prompt rendered with POI names in words.
pub fn pretrain_corpus(vocab: &Vocabulary, pois: &PoiTable, sequences: &[Sequence]) -> Result<Vec<Vec<u32>>> {
    let mut out = Vec::with_capacity(pois.len() + sequences.len());
    for poi in pois.iter() {
        out.push(render_poi_prompt(vocab, poi)?);
    }
    for seq in sequences.iter().filter(|s| !s.is_empty()) {
        out.push(render_sequence_prompt(vocab, seq, pois, PoiStyle::Text)?.tokens);
    }
    Ok(out)
}

fn windows(texts: &[Vec<u32>], vocab: &Vocabulary, context: usize) -> Vec<Vec<u32>> {
    let mut out = Vec::new();
    for text in texts {
        let text: Vec<u32> = text.iter().map(|&t| if vocab.poi_row(t).is_some() { UNK } else { t }).collect();
        let mut start = 0;
        while start + 1 < text.len() {
            let end = (start + context + 1).min(text.len());
            out.push(text[start..end].to_vec());
            start += context;
        }
    }
    out
}

/// Mean next-token loss of one window; accumulates gradients when `grads` is given.
fn window_loss(model: &BaseModel, vocab: &Vocabulary, window: &[u32], dropout: f64, rng: Option<&mut ChaCha8Rng>, grads: Option<&mut BaseModel>) -> Result<f64> {
    let inputs = &window[..window.len() - 1];
    let targets = &window[1..];
    let x = model.embed(inputs, vocab, None)?;
    let opts = RunOptions {
        residual_dropout: dropout,
        ..RunOptions::text(None)
    };
    let (h, cache) = model.run(x, &opts, rng)?;
    let logits = model.lm_logits(&h);
    let n = targets.len() as f64;
    let mut loss = 0.0;
    let mut dlogits = Array2::zeros(logits.dim());
    for (i, &t) in targets.iter().enumerate() {
        let (l, g) = softmax_cross_entropy(logits.row(i), t as usize);
        loss += l;
        dlogits.row_mut(i).assign(&(g / n));
    }
    if let Some(g) = grads {
        g.word_emb += &dlogits.t().dot(&h);
        let dh = dlogits.dot(&model.word_emb);
        let dx = model.backward(&cache, &dh, &opts, &mut StackGrads { base: Some(&mut *g), adapters: None });
        for (row, &t) in dx.rows().into_iter().zip(inputs) {
            let mut target = g.word_emb.row_mut(t as usize);
            target += &row;
        }
    }
    Ok(loss / n)
}

fn probe_loss(model: &BaseModel, vocab: &Vocabulary, probe: &[Vec<u32>]) -> Result<f64> {
    let mut total = 0.0;
    for w in probe {
        total += window_loss(model, vocab, w, 0.0, None, None)?;
    }
    Ok(total / probe.len() as f64)
}

/// Trains a fresh base model on `texts` with next-token cross-entropy, then
/// quantizes every linear layer to `bits` and freezes it.
pub fn pretrain_base(
    texts: &[Vec<u32>],
    vocab: &Vocabulary,
    config: &ModelConfig,
    pcfg: &PretrainConfig,
    bits: u8,
    seed: u64,
) -> Result<(BaseModel, PretrainReport)> {
    if pcfg.batch == 0 || pcfg.context == 0 || pcfg.epochs == 0 {
        return Err(Error::usage("pretraining batch, context and epochs must be positive"));
    }
    let context = pcfg.context.min(config.max_positions);
    let all = windows(texts, vocab, context);
    if all.is_empty() {
        return Err(Error::usage("pretraining corpus is empty"));
    }
    let mut model = BaseModel::init(config, vocab.num_words(), seed)?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x5eed_0001);
    let mut order: Vec<usize> = (0..all.len()).collect();
    order.shuffle(&mut rng);
    let probe: Vec<Vec<u32>> = order.iter().take(PROBE_WINDOWS).map(|&i| all[i].clone()).collect();
    let initial_loss = probe_loss(&model, vocab, &probe)?;
    log::info!("base pretraining: {} windows, initial loss {initial_loss:.4}", all.len());

    let mut opt = AdamW::new(pcfg.lr, DEFAULT_WEIGHT_DECAY);
    for epoch in 0..pcfg.epochs {
        order.shuffle(&mut rng);
        let take = if pcfg.max_windows == 0 { order.len() } else { pcfg.max_windows.min(order.len()) };
        let mut epoch_loss = 0.0;
        for batch in order[..take].chunks(pcfg.batch) {
            let mut grads = model.zeros_like();
            let mut batch_loss = 0.0;
            for &i in batch {
                batch_loss += window_loss(&model, vocab, &all[i], config.dropout, Some(&mut rng), Some(&mut grads))?;
            }
            if !batch_loss.is_finite() {
                return Err(Error::Divergence(format!("base pretraining loss became non-finite in epoch {epoch}")));
            }
            epoch_loss += batch_loss;
            let scale = 1.0 / batch.len() as f64;
            let mut g = grads.params_mut();
            for t in g.iter_mut() {
                t.iter_mut().for_each(|v| *v *= scale);
            }
            clip_global_norm(&mut g, DEFAULT_CLIP_NORM);
            let g: Vec<&[f64]> = g.into_iter().map(|t| &*t).collect();
            opt.step(model.params_mut(), &g);
        }
        log::info!("base pretraining epoch {epoch}: mean loss {:.4}", epoch_loss / take as f64);
    }
    let final_loss = probe_loss(&model, vocab, &probe)?;
    if !final_loss.is_finite() {
        return Err(Error::Divergence("base pretraining produced non-finite loss".into()));
    }
    model.freeze(bits)?;
    Ok((
        model,
        PretrainReport {
            initial_loss,
            final_loss,
            steps: opt.steps(),
            windows: all.len(),
        },
    ))
}

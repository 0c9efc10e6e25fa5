//! Sequence embeddings, candidate scoring, member aggregation and fusion.

use std::cmp::Ordering;

use ndarray::{s, Array1, Array2};
use rand_chacha::ChaCha8Rng;

use crate::corpus::{OwnerKind, PoiTable, Sequence};
use crate::error::{Error, Result};
use crate::qlora::AdapterSet;
use crate::seqmodel::{render_sequence_prompt, sequence_header_len, BaseModel, PoiStyle, RenderedPrompt, RunOptions, StackCache, StackGrads, Vocabulary};
use crate::tensor::{mean_rows, softmax, Matrix, Vector};

pub const DEFAULT_ALPHA: f64 = 0.7;

#[derive(Debug, Clone, PartialEq)]
pub struct SequenceEmbedding {
    pub owner_kind: OwnerKind,
    pub vector: Vector,
}

/// Everything needed to turn a check-in sequence into hidden states.
#[derive(Clone, Copy)]
pub struct Encoder<'a> {
    pub base: &'a BaseModel,
    pub vocab: &'a Vocabulary,
    pub pois: &'a PoiTable,
    pub poi_emb: Option<&'a Matrix>,
    pub adapters: Option<&'a AdapterSet>,
    pub style: PoiStyle,
}

impl<'a> Encoder<'a> {
    pub fn render(&self, seq: &Sequence) -> Result<RenderedPrompt> {
        render_sequence_prompt(self.vocab, seq, self.pois, self.style)
    }

    /// Drops the oldest items until the prompt fits the model's positions.
    pub fn fit(&self, seq: &Sequence) -> Result<Sequence> {
        let limit = self.base.config.max_positions;
        let prompt = self.render(seq)?;
        if prompt.tokens.len() <= limit {
            return Ok(seq.clone());
        }
        let header = sequence_header_len(self.vocab);
        let total = prompt.tokens.len();
        // keeping items drop.. costs header + (total - item_ends[drop - 1]) tokens
        let drop = (1..seq.len()).find(|&d| header + total - prompt.item_ends[d - 1] <= limit).unwrap_or(seq.len());
        let mut fitted = seq.suffix(seq.len() - drop, self.pois);
        // the new first item has zero deltas, which may render shorter or longer
        while !fitted.is_empty() && self.render(&fitted)?.tokens.len() > limit {
            fitted = fitted.suffix(fitted.len() - 1, self.pois);
        }
        if fitted.is_empty() {
            return Err(Error::usage("a single check-in does not fit the model's max_positions"));
        }
        Ok(fitted)
    }

    pub fn encode_sequence(&self, seq: &Sequence) -> Result<SequenceEmbedding> {
        if seq.is_empty() {
            return Err(Error::usage("cannot encode an empty sequence"));
        }
        let pass = self.prefix_pass(seq, 0.0, None)?;
        Ok(SequenceEmbedding {
            owner_kind: seq.owner_kind,
            vector: pass.embeddings.row(pass.embeddings.nrows() - 1).to_owned(),
        })
    }

    /// Embeddings of every prefix of `seq` (row `j` covers items `0..=j`) from
    /// a single causal pass.
    pub fn encode_prefixes(&self, seq: &Sequence) -> Result<Matrix> {
        Ok(self.prefix_pass(seq, 0.0, None)?.embeddings)
    }

    pub fn prefix_pass(&self, seq: &Sequence, dropout: f64, rng: Option<&mut ChaCha8Rng>) -> Result<PrefixPass> {
        if seq.is_empty() {
            return Err(Error::usage("cannot encode an empty sequence"));
        }
        let prompt = self.render(seq)?;
        if prompt.tokens.len() > self.base.config.max_positions {
            return Err(Error::usage(format!(
                "sequence prompt of {} tokens exceeds max_positions = {}; truncate the sequence upstream",
                prompt.tokens.len(),
                self.base.config.max_positions
            )));
        }
        let x = self.base.embed(&prompt.tokens, self.vocab, self.poi_emb)?;
        let opts = RunOptions {
            adapter_dropout: dropout,
            ..RunOptions::text(self.adapters)
        };
        let (states, cache) = self.base.run(x, &opts, rng)?;
        let embeddings = prefix_means(&states, &prompt.item_ends);
        Ok(PrefixPass {
            embeddings,
            cache,
            prompt,
            dropout,
        })
    }
}

/// Row `j` = mean of `states[..ends[j]]`.
pub fn prefix_means(states: &Matrix, ends: &[usize]) -> Matrix {
    let mut out = Array2::zeros((ends.len(), states.ncols()));
    let mut acc = Array1::zeros(states.ncols());
    let mut t = 0;
    for (j, &end) in ends.iter().enumerate() {
        while t < end {
            acc += &states.row(t);
            t += 1;
        }
        out.row_mut(j).assign(&(&acc / end as f64));
    }
    out
}

/// A forward pass over one sequence prompt, kept for backpropagation.
pub struct PrefixPass {
    pub embeddings: Matrix,
    cache: StackCache,
    prompt: RenderedPrompt,
    dropout: f64,
}

impl PrefixPass {
    /// Backpropagates `d_emb` (one row per prefix embedding) into adapter
    /// and POI-embedding gradient buffers.
    pub fn backward(&self, enc: &Encoder, d_emb: &Matrix, adapter_grads: Option<&mut AdapterSet>, poi_grads: Option<&mut Matrix>) {
        let ends = &self.prompt.item_ends;
        let t_len = self.prompt.tokens.len();
        let mut d_states = Array2::zeros((t_len, d_emb.ncols()));
        let mut running = Array1::zeros(d_emb.ncols());
        for j in (0..ends.len()).rev() {
            running.scaled_add(1.0 / ends[j] as f64, &d_emb.row(j));
            let start = if j == 0 { 0 } else { ends[j - 1] };
            for t in start..ends[j] {
                d_states.row_mut(t).assign(&running);
            }
        }
        let opts = RunOptions {
            adapter_dropout: self.dropout,
            ..RunOptions::text(enc.adapters)
        };
        let dx = enc.base.backward(&self.cache, &d_states, &opts, &mut StackGrads { base: None, adapters: adapter_grads });
        if let Some(g) = poi_grads {
            for (row, &tok) in dx.rows().into_iter().zip(&self.prompt.tokens) {
                if let Some(r) = enc.vocab.poi_row(tok) {
                    let mut target = g.row_mut(r);
                    target += &row;
                }
            }
        }
    }
}

/// Softmax scores over a candidate list.
#[derive(Debug, Clone, PartialEq)]
pub struct ScoreVector {
    pub poi_ids: Vec<usize>,
    pub probs: Vec<f64>,
}

impl ScoreVector {
    /// Candidate positions ordered by descending probability, ties by ascending POI.
    pub fn ranking(&self) -> Vec<usize> {
        let mut order: Vec<usize> = (0..self.probs.len()).collect();
        order.sort_by(|&a, &b| {
            self.probs[b]
                .partial_cmp(&self.probs[a])
                .unwrap_or(Ordering::Equal)
                .then(self.poi_ids[a].cmp(&self.poi_ids[b]))
        });
        order
    }

    /// 1-based rank of `poi`, if it is a candidate.
    pub fn rank_of(&self, poi: usize) -> Option<usize> {
        let target = self.poi_ids.iter().position(|&p| p == poi)?;
        Some(
            1 + (0..self.probs.len())
                .filter(|&i| {
                    i != target && (self.probs[i] > self.probs[target] || (self.probs[i] == self.probs[target] && self.poi_ids[i] < poi))
                })
                .count(),
        )
    }

    /// `(poi, probability)` for the `k` best candidates.
    pub fn top(&self, k: usize) -> Vec<(usize, f64)> {
        self.ranking().into_iter().take(k).map(|i| (self.poi_ids[i], self.probs[i])).collect()
    }
}

/// Softmax of `emb_table[c]·e` over candidates `c`.
pub fn score_candidates(embedding: &Vector, emb_table: &Matrix, candidates: &[usize]) -> Result<ScoreVector> {
    if candidates.is_empty() {
        return Err(Error::usage("cannot score an empty candidate list"));
    }
    if embedding.len() != emb_table.ncols() {
        return Err(Error::usage("embedding width does not match the candidate embeddings"));
    }
    let logits: Vector = candidates.iter().map(|&c| emb_table.row(c).dot(embedding)).collect();
    Ok(ScoreVector {
        poi_ids: candidates.to_vec(),
        probs: softmax(logits.view()).to_vec(),
    })
}

/// Member set pass: embeddings enter as layer-0 inputs, attention is unmasked
/// and position-free, and the output is the mean over members.
pub struct AggPass {
    pub output: Vector,
    cache: StackCache,
    k: usize,
    dropout: f64,
}

pub fn aggregate_pass(base: &BaseModel, adapters: Option<&AdapterSet>, members: &Matrix, dropout: f64, rng: Option<&mut ChaCha8Rng>) -> Result<AggPass> {
    if members.nrows() == 0 {
        return Err(Error::usage("aggregation needs at least one member embedding"));
    }
    if members.ncols() != base.d() {
        return Err(Error::usage(format!("member embedding width {} does not match d = {}", members.ncols(), base.d())));
    }
    let opts = RunOptions {
        adapter_dropout: dropout,
        ..RunOptions::set(adapters)
    };
    let (states, cache) = base.run(members.clone(), &opts, rng)?;
    Ok(AggPass {
        output: mean_rows(&states),
        cache,
        k: members.nrows(),
        dropout,
    })
}

impl AggPass {
    pub fn backward(&self, base: &BaseModel, adapters: Option<&AdapterSet>, d_out: &Vector, adapter_grads: Option<&mut AdapterSet>) -> Matrix {
        let row = d_out / self.k as f64;
        let d_states = Array2::from_shape_fn((self.k, d_out.len()), |(_, j)| row[j]);
        let opts = RunOptions {
            adapter_dropout: self.dropout,
            ..RunOptions::set(adapters)
        };
        base.backward(&self.cache, &d_states, &opts, &mut StackGrads { base: None, adapters: adapter_grads })
    }
}

pub fn aggregate_members(base: &BaseModel, adapters: Option<&AdapterSet>, members: &Matrix) -> Result<SequenceEmbedding> {
    Ok(SequenceEmbedding {
        owner_kind: OwnerKind::Group,
        vector: aggregate_pass(base, adapters, members, 0.0, None)?.output,
    })
}

/// `e + α·e'`.
pub fn fuse(group: &Vector, aggregated: &Vector, alpha: f64) -> Vector {
    group + &(aggregated * alpha)
}

/// Stacks member vectors into a `K × d` matrix.
pub fn stack(rows: &[Vector]) -> Matrix {
    let d = rows.first().map_or(0, |r| r.len());
    let mut m = Array2::zeros((rows.len(), d));
    for (i, r) in rows.iter().enumerate() {
        m.slice_mut(s![i, ..]).assign(r);
    }
    m
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::array;

    #[test]
    fn softmax_of_unit_logits() {
        let table = array![[1.0, 0.0], [0.0, 1.0]];
        let s = score_candidates(&array![1.0, 0.0], &table, &[0, 1]).unwrap();
        assert!((s.probs[0] - 0.7311).abs() < 1e-4);
        assert!((s.probs[1] - 0.2689).abs() < 1e-4);
        assert_eq!(s.rank_of(0), Some(1));
        assert_eq!(s.rank_of(1), Some(2));
    }

    #[test]
    fn identical_rows_are_uniform_and_tie_break_by_id() {
        let table = array![[0.3, 0.3], [0.3, 0.3], [0.3, 0.3]];
        let s = score_candidates(&array![1.0, -2.0], &table, &[2, 0, 1]).unwrap();
        assert!(s.probs.iter().all(|p| (p - 1.0 / 3.0).abs() < 1e-12));
        assert_eq!(s.top(3).iter().map(|t| t.0).collect::<Vec<_>>(), vec![0, 1, 2]);
        assert_eq!(s.rank_of(1), Some(2));
        assert_eq!(s.rank_of(7), None);
    }

    #[test]
    fn empty_candidates_rejected() {
        assert!(matches!(score_candidates(&array![1.0], &array![[1.0]], &[]), Err(Error::Usage(_))));
    }

    #[test]
    fn prefix_means_match_direct_means() {
        let states = array![[1.0, 2.0], [3.0, 4.0], [5.0, 9.0], [0.0, 1.0]];
        let m = prefix_means(&states, &[2, 4]);
        assert_eq!(m.row(0).to_vec(), vec![2.0, 3.0]);
        assert_eq!(m.row(1).to_vec(), vec![2.25, 4.0]);
    }

    #[test]
    fn fuse_cases() {
        let e = array![1.0, 2.0];
        let a = array![3.0, -1.0];
        assert_eq!(fuse(&e, &a, 0.0), e);
        assert_eq!(fuse(&array![0.0, 0.0], &a, 1.0), a);
        assert_eq!(fuse(&e, &a, 0.5), array![2.5, 1.5]);
    }
}

//! The frozen sequence model, its vocabulary and prompts.

mod checkpoint;
mod model;
mod pretrain;
mod prompt;
mod vocab;

pub use checkpoint::{load_adapters, load_base, save_adapters, save_base};
pub use model::{BaseModel, Block, LayerNorm, Linear, ModelConfig, RunOptions, StackCache, StackGrads, LINEARS_PER_BLOCK};
pub use pretrain::{pretrain_base, pretrain_corpus, PretrainConfig, PretrainReport};
pub use prompt::{
    poi_prompt_text, render_poi_prompt, render_sequence_prompt, sequence_header_len, sequence_prompt_text, vocab_corpus, PoiStyle,
    RenderedPrompt,
};
pub use vocab::{build_vocab, build_vocab_capped, poi_token, scan, RawToken, Vocabulary, BOS, DEFAULT_MAX_WORDS, DEFAULT_MIN_FREQ, EOS, PAD, SPECIALS, UNK};

use ndarray::Array2;

use crate::corpus::PoiTable;
use crate::error::Result;
use crate::qlora::AdapterSet;
use crate::tensor::{mean_rows, Matrix};

/// Final-layer hidden states for a token prompt in evaluation mode.
pub fn forward(base: &BaseModel, vocab: &Vocabulary, tokens: &[u32], adapters: Option<&AdapterSet>, poi_emb: Option<&Matrix>) -> Result<Matrix> {
    let x = base.embed(tokens, vocab, poi_emb)?;
    Ok(base.run(x, &RunOptions::text(adapters), None)?.0)
}

/// One row per POI: the mean final-layer state of that POI's description prompt.
pub fn init_poi_embeddings(base: &BaseModel, vocab: &Vocabulary, pois: &PoiTable) -> Result<Matrix> {
    let mut out = Array2::zeros((pois.len(), base.d()));
    for (i, poi) in pois.iter().enumerate() {
        let tokens = render_poi_prompt(vocab, poi)?;
        let states = forward(base, vocab, &tokens, None, None)?;
        out.row_mut(i).assign(&mean_rows(&states));
    }
    Ok(out)
}

//! Prompt templates for POI descriptions and check-in sequences.

use crate::corpus::{Poi, PoiTable, Sequence};
use crate::error::Result;

use super::vocab::{poi_token, Vocabulary, BOS};

const POI_HEADER: &str = "Generate an embedding for the following Point of Interest (POI).";
const SEQUENCE_HEADER: &str = "Generate an embedding for the provided check-in sequence, which has multiple check-in \
activities, and the format of a check-in activity is:\n\
(POIID, timestamp, temporal difference from previous check-in, spatial difference from previous check-in).\n\
The check-in sequence is:";
const UNKNOWN: &str = "unknown";

/// How a POI appears inside a sequence prompt.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum PoiStyle {
    /// One atomic POI token looked up in the POI embedding matrix.
    #[default]
    Token,
    /// Plain words (category and name) through the word embedding table.
    Text,
}

/// Prompt token ids with the position just past each check-in tuple, so that
/// `tokens[..item_ends[j]]` is exactly the prompt of the first `j + 1` items.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct RenderedPrompt {
    pub tokens: Vec<u32>,
    pub item_ends: Vec<usize>,
}

fn or_unknown(s: Option<&str>) -> &str {
    match s {
        Some(s) if !s.trim().is_empty() => s,
        _ => UNKNOWN,
    }
}

pub fn poi_prompt_text(poi: &Poi) -> String {
    format!(
        "{POI_HEADER}\nName: {}\nCategory: {}\nDescription: {}\nReviews: {UNKNOWN}\nLatitude: {:.4}\nLongitude: {:.4}\nAddress: {}",
        or_unknown(Some(&poi.name)),
        or_unknown(Some(&poi.category)),
        or_unknown(poi.description.as_deref()),
        poi.lat,
        poi.lon,
        or_unknown(poi.address.as_deref()),
    )
}

pub fn render_poi_prompt(vocab: &Vocabulary, poi: &Poi) -> Result<Vec<u32>> {
    let mut tokens = vec![BOS];
    tokens.extend(vocab.encode(&poi_prompt_text(poi))?);
    Ok(tokens)
}

fn item_text(seq: &Sequence, j: usize, pois: &PoiTable, style: PoiStyle) -> String {
    let item = seq.items[j];
    let poi = pois.get(item.poi);
    let name = match style {
        PoiStyle::Token => poi_token(&poi.id),
        PoiStyle::Text => format!("{} {}", poi.category, poi.name),
    };
    format!(
        "({name}, {}, {}, {:.2})",
        item.timestamp, seq.temporal_deltas[j], seq.spatial_deltas[j]
    )
}

pub fn sequence_prompt_text(seq: &Sequence, pois: &PoiTable, style: PoiStyle) -> String {
    let mut s = SEQUENCE_HEADER.to_string();
    for j in 0..seq.len() {
        s.push(' ');
        s.push_str(&item_text(seq, j, pois, style));
    }
    s
}

pub fn render_sequence_prompt(vocab: &Vocabulary, seq: &Sequence, pois: &PoiTable, style: PoiStyle) -> Result<RenderedPrompt> {
    let mut tokens = vec![BOS];
    tokens.extend(vocab.encode(SEQUENCE_HEADER)?);
    let mut item_ends = Vec::with_capacity(seq.len());
    for j in 0..seq.len() {
        tokens.extend(vocab.encode(&item_text(seq, j, pois, style))?);
        item_ends.push(tokens.len());
    }
    Ok(RenderedPrompt { tokens, item_ends })
}

/// Token count of the sequence framing (BOS included).
pub fn sequence_header_len(vocab: &Vocabulary) -> usize {
    1 + vocab.encode(SEQUENCE_HEADER).map_or(0, |t| t.len())
}

/// Texts used to build the word vocabulary: every POI prompt and every
/// sequence prompt in text form.
pub fn vocab_corpus(pois: &PoiTable, sequences: &[Sequence]) -> Vec<String> {
    let mut out: Vec<String> = pois.iter().map(poi_prompt_text).collect();
    out.extend(sequences.iter().map(|s| sequence_prompt_text(s, pois, PoiStyle::Token)));
    out.extend(sequences.iter().map(|s| sequence_prompt_text(s, pois, PoiStyle::Text)));
    out
}

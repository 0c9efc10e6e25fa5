//! Word-level tokenizer with atomic POI tokens.

use std::collections::{BTreeMap, HashMap};

use crate::corpus::PoiTable;
use crate::error::{Error, Result};

pub const PAD: u32 = 0;
pub const BOS: u32 = 1;
pub const EOS: u32 = 2;
pub const UNK: u32 = 3;
pub const SPECIALS: [&str; 4] = ["<pad>", "<bos>", "<eos>", "<unk>"];
pub const DEFAULT_MIN_FREQ: usize = 2;
pub const DEFAULT_MAX_WORDS: usize = 8192;

const PUNCT: &[char] = &['(', ')', '[', ']', ',', ':', ';', '!', '?', '"'];
const POI_PREFIX: &str = "<poi_";

/// A token as produced by [`scan`], before id lookup.
#[derive(Debug, Clone, PartialEq, Eq)]
pub enum RawToken {
    Word(String),
    Poi(String),
}

pub fn poi_token(poi_id: &str) -> String {
    format!("{POI_PREFIX}{poi_id}>")
}

/// Splits text into lowercase words, single punctuation marks and POI tokens.
/// A `.` belongs to a word only between two digits.
pub fn scan(text: &str) -> Vec<RawToken> {
    let chars: Vec<char> = text.chars().collect();
    let mut out = Vec::new();
    let mut i = 0;
    let starts_poi = |i: usize| -> Option<usize> {
        let rest: String = chars[i..].iter().take(POI_PREFIX.len()).collect();
        if rest != POI_PREFIX {
            return None;
        }
        chars[i..].iter().position(|&c| c == '>').filter(|&p| p > POI_PREFIX.len()).map(|p| i + p)
    };
    let is_decimal_point = |i: usize| {
        chars[i] == '.' && i > 0 && i + 1 < chars.len() && chars[i - 1].is_ascii_digit() && chars[i + 1].is_ascii_digit()
    };
    while i < chars.len() {
        let c = chars[i];
        if c.is_whitespace() {
            i += 1;
        } else if let Some(end) = starts_poi(i) {
            out.push(RawToken::Poi(chars[i + POI_PREFIX.len()..end].iter().collect()));
            i = end + 1;
        } else if PUNCT.contains(&c) || (c == '.' && !is_decimal_point(i)) {
            out.push(RawToken::Word(c.to_string()));
            i += 1;
        } else {
            let start = i;
            while i < chars.len() {
                let c = chars[i];
                if c.is_whitespace() || PUNCT.contains(&c) || (c == '.' && !is_decimal_point(i)) || starts_poi(i).is_some() {
                    break;
                }
                i += 1;
            }
            out.push(RawToken::Word(chars[start..i].iter().collect::<String>().to_lowercase()));
        }
    }
    out
}

/// Word tokens occupy ids `[0, W)` (specials first); POI tokens occupy
/// `[W, W + P)` in POI-table order.
#[derive(Debug, Clone, PartialEq)]
pub struct Vocabulary {
    words: Vec<String>,
    word_index: HashMap<String, u32>,
    poi_ids: Vec<String>,
    poi_index: HashMap<String, u32>,
}

impl Vocabulary {
    pub fn from_parts(words: Vec<String>, poi_ids: Vec<String>) -> Result<Self> {
        if words.len() < SPECIALS.len() || words.iter().zip(SPECIALS).any(|(w, s)| w != s) {
            return Err(Error::data("vocabulary must start with the special tokens"));
        }
        let word_index: HashMap<String, u32> = words.iter().enumerate().map(|(i, w)| (w.clone(), i as u32)).collect();
        if word_index.len() != words.len() {
            return Err(Error::data("duplicate word in vocabulary"));
        }
        let poi_index: HashMap<String, u32> = poi_ids.iter().enumerate().map(|(i, p)| (p.clone(), i as u32)).collect();
        if poi_index.len() != poi_ids.len() {
            return Err(Error::data("duplicate POI token in vocabulary"));
        }
        Ok(Self {
            words,
            word_index,
            poi_ids,
            poi_index,
        })
    }

    /// Number of word ids, specials included.
    pub fn num_words(&self) -> usize {
        self.words.len()
    }

    pub fn num_pois(&self) -> usize {
        self.poi_ids.len()
    }

    pub fn len(&self) -> usize {
        self.words.len() + self.poi_ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn word_id(&self, word: &str) -> u32 {
        self.word_index.get(word).copied().unwrap_or(UNK)
    }

    pub fn poi_token_id(&self, poi_id: &str) -> Option<u32> {
        self.poi_index.get(poi_id).map(|&r| self.words.len() as u32 + r)
    }

    /// Row in the POI embedding matrix, when `id` is a POI token.
    pub fn poi_row(&self, id: u32) -> Option<usize> {
        let w = self.words.len() as u32;
        (id >= w && ((id - w) as usize) < self.poi_ids.len()).then(|| (id - w) as usize)
    }

    pub fn token(&self, id: u32) -> Option<String> {
        match self.poi_row(id) {
            Some(r) => Some(poi_token(&self.poi_ids[r])),
            None => self.words.get(id as usize).cloned(),
        }
    }

    /// Tokenizes text; unknown words map to `<unk>`, unknown POI tokens are an error.
    pub fn encode(&self, text: &str) -> Result<Vec<u32>> {
        scan(text)
            .into_iter()
            .map(|t| match t {
                RawToken::Word(w) => Ok(self.word_id(&w)),
                RawToken::Poi(p) => self
                    .poi_token_id(&p)
                    .ok_or_else(|| Error::data(format!("unknown POI token {}", poi_token(&p)))),
            })
            .collect()
    }

    /// `token<TAB>id` lines.
    pub fn to_tsv(&self) -> String {
        let mut s = String::new();
        for id in 0..self.len() as u32 {
            s.push_str(&self.token(id).expect("id in range"));
            s.push('\t');
            s.push_str(&id.to_string());
            s.push('\n');
        }
        s
    }

    pub fn from_tsv(text: &str) -> Result<Self> {
        let mut words = Vec::new();
        let mut pois = Vec::new();
        for (n, line) in text.lines().enumerate() {
            let (tok, id) = line
                .rsplit_once('\t')
                .ok_or_else(|| Error::data(format!("vocab line {}: expected token<TAB>id", n + 1)))?;
            let id: usize = id.parse().map_err(|_| Error::data(format!("vocab line {}: bad id", n + 1)))?;
            if id != n {
                return Err(Error::data(format!("vocab line {}: ids must be dense and ordered", n + 1)));
            }
            match tok.strip_prefix(POI_PREFIX).and_then(|t| t.strip_suffix('>')) {
                Some(p) => pois.push(p.to_string()),
                None if !pois.is_empty() => return Err(Error::data("word token after POI tokens")),
                None => words.push(tok.to_string()),
            }
        }
        Self::from_parts(words, pois)
    }
}

/// Builds the vocabulary from prompt text (word frequency cutoff `min_freq`)
/// plus one token per POI.
pub fn build_vocab(pois: &PoiTable, text_corpus: &[String], min_freq: usize) -> Result<Vocabulary> {
    build_vocab_capped(pois, text_corpus, min_freq, usize::MAX)
}

/// As [`build_vocab`], keeping at most `max_words` words (specials included):
/// the most frequent, ties broken alphabetically.
pub fn build_vocab_capped(pois: &PoiTable, text_corpus: &[String], min_freq: usize, max_words: usize) -> Result<Vocabulary> {
    if pois.is_empty() {
        return Err(Error::usage("cannot build a vocabulary without POIs"));
    }
    if max_words <= SPECIALS.len() {
        return Err(Error::usage(format!("max_words must exceed the {} special tokens", SPECIALS.len())));
    }
    let mut freq: BTreeMap<String, usize> = BTreeMap::new();
    for text in text_corpus {
        for tok in scan(text) {
            if let RawToken::Word(w) = tok {
                *freq.entry(w).or_default() += 1;
            }
        }
    }
    let mut kept: Vec<(String, usize)> = freq
        .into_iter()
        .filter(|(w, n)| *n >= min_freq && !SPECIALS.contains(&w.as_str()))
        .collect();
    if kept.len() > max_words - SPECIALS.len() {
        kept.sort_by(|a, b| b.1.cmp(&a.1).then_with(|| a.0.cmp(&b.0)));
        kept.truncate(max_words - SPECIALS.len());
        kept.sort();
    }
    let mut words: Vec<String> = SPECIALS.iter().map(|s| s.to_string()).collect();
    words.extend(kept.into_iter().map(|(w, _)| w));
    Vocabulary::from_parts(words, pois.iter().map(|p| p.id.clone()).collect())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::corpus::Poi;

    fn pois(ids: &[&str]) -> PoiTable {
        PoiTable::new(
            ids.iter()
                .map(|id| Poi {
                    id: id.to_string(),
                    name: "x".into(),
                    category: "y".into(),
                    lat: 0.0,
                    lon: 0.0,
                    address: None,
                    description: None,
                })
                .collect(),
        )
        .unwrap()
    }

    #[test]
    fn scan_handles_punctuation_decimals_and_poi_tokens() {
        let toks = scan("(<poi_42>, 17, 1.25). Point (POI).");
        let expect = vec![
            RawToken::Word("(".into()),
            RawToken::Poi("42".into()),
            RawToken::Word(",".into()),
            RawToken::Word("17".into()),
            RawToken::Word(",".into()),
            RawToken::Word("1.25".into()),
            RawToken::Word(")".into()),
            RawToken::Word(".".into()),
            RawToken::Word("point".into()),
            RawToken::Word("(".into()),
            RawToken::Word("poi".into()),
            RawToken::Word(")".into()),
            RawToken::Word(".".into()),
        ];
        assert_eq!(toks, expect);
    }

    #[test]
    fn vocab_size_counts_words_pois_and_specials() {
        let text = "alpha beta gamma delta epsilon zeta eta theta iota kappa";
        let corpus = vec![text.to_string(), text.to_string()];
        let v = build_vocab(&pois(&["a", "b"]), &corpus, 2).unwrap();
        assert_eq!(v.len(), 10 + 2 + SPECIALS.len());
        assert_eq!(v.num_words(), 14);
    }

    #[test]
    fn poi_tokens_are_atomic_and_unknown_words_map_to_unk() {
        let v = build_vocab(&pois(&["42", "7"]), &vec!["the sequence is".to_string(); 2], 2).unwrap();
        let ids = v.encode("the <poi_42> zebra").unwrap();
        assert_eq!(ids.len(), 3);
        assert_eq!(v.poi_row(ids[1]), Some(0));
        assert_eq!(ids[2], UNK);
        assert!(v.encode("<poi_999>").is_err());
    }

    #[test]
    fn frequency_cutoff_and_empty_pois() {
        let v = build_vocab(&pois(&["a"]), &["once twice twice".to_string()], 2).unwrap();
        assert_eq!(v.word_id("twice"), 4);
        assert_eq!(v.word_id("once"), UNK);
        assert!(matches!(build_vocab(&PoiTable::default(), &[], 2), Err(Error::Usage(_))));
    }

    #[test]
    fn tsv_round_trip() {
        let v = build_vocab(&pois(&["a", "b"]), &["x y x y".to_string()], 2).unwrap();
        assert_eq!(Vocabulary::from_tsv(&v.to_tsv()).unwrap(), v);
    }

    #[test]
    fn cap_keeps_most_frequent_words() {
        let corpus = vec!["b b b a a c c c c d".to_string()];
        let v = build_vocab_capped(&pois(&["p"]), &corpus, 1, SPECIALS.len() + 2).unwrap();
        assert_eq!(v.num_words(), SPECIALS.len() + 2);
        assert_ne!(v.word_id("c"), UNK);
        assert_ne!(v.word_id("b"), UNK);
        assert_eq!(v.word_id("a"), UNK);
        assert_eq!(v.word_id("d"), UNK);
        assert!(build_vocab_capped(&pois(&["p"]), &corpus, 1, 2).is_err());
    }
}

//! Chat-completion client that asks a larger model for purpose labels.

use std::sync::OnceLock;
use std::thread;
use std::time::Duration;

use regex::Regex;
use serde::{Deserialize, Serialize};
use serde_json::json;

use super::heuristic::HeuristicLabeler;
use super::{purpose_index, LabelSource, LabeledSequence, Labeler, PURPOSES};
use crate::corpus::{PoiTable, Sequence};

pub const KEY_ENV: &str = "LLMGPR_LABELER_KEY";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ExternalConfig {
    pub url: String,
    pub model: String,
    pub timeout_secs: u64,
    pub retries: u32,
    pub backoff_ms: u64,
    pub concurrency: usize,
}

impl Default for ExternalConfig {
    fn default() -> Self {
        Self {
            url: "https://api.openai.com/v1/chat/completions".into(),
            model: "gpt-4".into(),
            timeout_secs: 30,
            retries: 3,
            backoff_ms: 500,
            concurrency: 4,
        }
    }
}

pub fn purpose_prompt(seq: &Sequence, pois: &PoiTable) -> String {
    let activities: Vec<String> = seq
        .items
        .iter()
        .enumerate()
        .map(|(j, it)| {
            let p = pois.get(it.poi);
            format!(
                "({}, {}, {}, {:.4}, {:.4}, {}, {:.2})",
                p.id, p.name, p.category, p.lon, p.lat, seq.temporal_deltas[j], seq.spatial_deltas[j]
            )
        })
        .collect();
    format!(
        "Given a sequence of check-in activities, your task is to classify into one of the following categories: {{{}}}.\n\n\
         The format of a check-in activity is:\n\
         (POIID, Name, Category, longitude, latitude, temporal difference from previous check-in, spatial difference from previous check-in)\n\
         The check-in sequence is: {}\n\
         The format of your response: This sequence is classified as [Category].",
        PURPOSES.join(", "),
        activities.join(" ")
    )
}

/// Extracts the label from "This sequence is classified as [Category]".
pub fn parse_reply(reply: &str) -> Option<usize> {
    static RE: OnceLock<Regex> = OnceLock::new();
    let re = RE.get_or_init(|| Regex::new(r"(?i)classified as\s*\[?\s*([A-Za-z][A-Za-z &]*?)\s*\]?\s*(?:\.|$|\n)").expect("valid regex"));
    re.captures(reply).and_then(|c| purpose_index(c.get(1)?.as_str()))
}

/// Sends each sequence to a chat-completion endpoint; falls back to the
/// heuristic labeler when requests keep failing or replies do not parse.
pub struct ExternalLabeler {
    pub config: ExternalConfig,
    pub api_key: Option<String>,
    pub fallback: HeuristicLabeler,
    agent: ureq::Agent,
}

impl ExternalLabeler {
    pub fn new(config: ExternalConfig, fallback: HeuristicLabeler) -> Self {
        let api_key = std::env::var(KEY_ENV).ok().filter(|k| !k.is_empty());
        let agent = ureq::Agent::config_builder()
            .timeout_global(Some(Duration::from_secs(config.timeout_secs.max(1))))
            .build()
            .into();
        Self {
            config,
            api_key,
            fallback,
            agent,
        }
    }

    fn request(&self, prompt: &str) -> std::result::Result<String, String> {
        let body = json!({
            "model": self.config.model,
            "messages": [{"role": "user", "content": prompt}],
        });
        let mut req = self.agent.post(&self.config.url);
        if let Some(key) = &self.api_key {
            req = req.header("Authorization", &format!("Bearer {key}"));
        }
        let mut resp = req.send_json(&body).map_err(|e| e.to_string())?;
        let value: serde_json::Value = resp.body_mut().read_json().map_err(|e| e.to_string())?;
        value["choices"][0]["message"]["content"]
            .as_str()
            .map(str::to_string)
            .ok_or_else(|| "reply has no message content".to_string())
    }

    fn fallback(&self, seq: &Sequence, pois: &PoiTable, why: &str) -> LabeledSequence {
        log::warn!("external labeler: {why} for {}; using heuristic label", seq.key());
        self.fallback.label(seq, pois)
    }
}

impl Labeler for ExternalLabeler {
    fn label(&self, sequence: &Sequence, pois: &PoiTable) -> LabeledSequence {
        let prompt = purpose_prompt(sequence, pois);
        let mut last_err = String::new();
        for attempt in 0..=self.config.retries {
            if attempt > 0 {
                thread::sleep(Duration::from_millis(self.config.backoff_ms.saturating_mul(1 << (attempt - 1).min(16))));
            }
            match self.request(&prompt) {
                Ok(reply) => {
                    return match parse_reply(&reply) {
                        Some(label) => LabeledSequence {
                            sequence_id: sequence.key(),
                            label,
                            source: LabelSource::External,
                        },
                        None => self.fallback(sequence, pois, "unparseable reply"),
                    };
                }
                Err(e) => last_err = e,
            }
        }
        self.fallback(sequence, pois, &format!("request failed ({last_err})"))
    }

    fn label_all(&self, sequences: &[Sequence], pois: &PoiTable) -> Vec<LabeledSequence> {
        let workers = self.config.concurrency.max(1);
        let chunk = sequences.len().div_ceil(workers).max(1);
        thread::scope(|scope| {
            let handles: Vec<_> = sequences
                .chunks(chunk)
                .map(|part| scope.spawn(move || part.iter().map(|s| self.label(s, pois)).collect::<Vec<_>>()))
                .collect();
            handles.into_iter().flat_map(|h| h.join().expect("labeler worker panicked")).collect()
        })
    }
}

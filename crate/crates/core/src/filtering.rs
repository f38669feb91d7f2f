//! Instructional / non-instructional video filtering with a yes/no LLM prompt.

use std::collections::HashMap;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::llm::{CompletionRequest, Gateway, GatewayConfig, GatewayError};
use crate::prompt;
use crate::transcript::{transcript_excerpt, Transcript};

pub const FILTER_PROMPT_VERSION: &str = "filter-v1";
pub const FILTER_PROMPT_TEMPLATE: &str = include_str!("../resources/filter_prompt_v1.txt");
/// Characters of narration, from the start of the video, shown to the model.
pub const DEFAULT_EXCERPT_CHARS: usize = 6000;

#[derive(Debug, Error)]
pub enum FilterError {
    #[error(transparent)]
    Gateway(#[from] GatewayError),
    #[error("no Yes/No decision in response {0:?}")]
    Parse(String),
    #[error("no label for video {0}")]
    MissingLabel(String),
    #[error("nothing to score")]
    Empty,
}

/// One line of `verdicts.jsonl`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FilterVerdict {
    pub video_id: String,
    pub is_instructional: bool,
    pub explanation: String,
    #[serde(default, skip_serializing)]
    pub raw_response: String,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct FilterScore {
    pub false_positive_rate: f64,
    pub false_negative_rate: f64,
    pub n: usize,
    pub true_positives: usize,
    pub false_positives: usize,
    pub true_negatives: usize,
    pub false_negatives: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct FilterConfig {
    pub excerpt_chars: usize,
    pub max_tokens: u32,
    pub temperature: f64,
    pub seed: Option<u64>,
}

impl Default for FilterConfig {
    fn default() -> Self {
        Self { excerpt_chars: DEFAULT_EXCERPT_CHARS, max_tokens: 128, temperature: 0.0, seed: None }
    }
}

pub fn build_filter_prompt(title: &str, excerpt: &str) -> String {
    prompt::render(FILTER_PROMPT_TEMPLATE, title, excerpt)
}

/// The first standalone yes/no word decides; whatever follows
/// `Explanation:` is the explanation.
pub fn parse_filter_verdict(response: &str) -> Result<(bool, String), FilterError> {
    let decision = response
        .split_whitespace()
        .map(|w| w.trim_matches(|c: char| !c.is_alphanumeric()))
        .find_map(|w| {
            if w.eq_ignore_ascii_case("yes") {
                Some(true)
            } else if w.eq_ignore_ascii_case("no") {
                Some(false)
            } else {
                None
            }
        })
        .ok_or_else(|| FilterError::Parse(response.chars().take(200).collect()))?;

    let lower = response.to_ascii_lowercase();
    let explanation = match lower.find("explanation:") {
        Some(pos) => response[pos + "explanation:".len()..].trim().to_string(),
        None => String::new(),
    };
    let explanation = if explanation.is_empty() { response.trim().to_string() } else { explanation };
    Ok((decision, explanation))
}

pub fn classify_video(
    t: &Transcript,
    gateway: &dyn Gateway,
    gateway_cfg: &GatewayConfig,
    cfg: &FilterConfig,
) -> Result<FilterVerdict, FilterError> {
    let excerpt = transcript_excerpt(t, cfg.excerpt_chars);
    let prompt = build_filter_prompt(&t.title, &excerpt);
    let req = CompletionRequest::new(prompt, cfg.max_tokens)
        .with_temperature(cfg.temperature)
        .with_seed(cfg.seed);
    let raw = gateway.complete(gateway_cfg, &req)?;
    let (is_instructional, explanation) = parse_filter_verdict(&raw)?;
    Ok(FilterVerdict { video_id: t.video_id.clone(), is_instructional, explanation, raw_response: raw })
}

/// Error rates of the verdicts against ground-truth labels
/// (`true` = instructional).
pub fn evaluate_filter(verdicts: &[FilterVerdict], labels: &HashMap<String, bool>) -> Result<FilterScore, FilterError> {
    if verdicts.is_empty() {
        return Err(FilterError::Empty);
    }
    let (mut tp, mut fp, mut tn, mut fn_) = (0usize, 0usize, 0usize, 0usize);
    for v in verdicts {
        let label = *labels.get(&v.video_id).ok_or_else(|| FilterError::MissingLabel(v.video_id.clone()))?;
        match (v.is_instructional, label) {
            (true, true) => tp += 1,
            (true, false) => fp += 1,
            (false, false) => tn += 1,
            (false, true) => fn_ += 1,
        }
    }
    let rate = |num: usize, den: usize| if den == 0 { 0.0 } else { num as f64 / den as f64 };
    Ok(FilterScore {
        false_positive_rate: rate(fp, fp + tn),
        false_negative_rate: rate(fn_, fn_ + tp),
        n: verdicts.len(),
        true_positives: tp,
        false_positives: fp,
        true_negatives: tn,
        false_negatives: fn_,
    })
}

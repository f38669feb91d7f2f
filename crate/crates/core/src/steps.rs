//! Step extraction: prompt construction, structured-output parsing and the
//! malformed-result gate.

use std::fmt;
use std::fmt::Write as _;

use serde::{Deserialize, Serialize};
use serde_json::Value;
use thiserror::Error;

use crate::llm::{CompletionRequest, Gateway, GatewayConfig, GatewayError};
use crate::prompt;
use crate::transcript::{Transcript, DURATION_SLACK_S};

pub const STEP_PROMPT_VERSION: &str = "steps-v1";
pub const STEP_PROMPT_TEMPLATE: &str = include_str!("../resources/step_prompt_v1.txt");
/// Only videos strictly shorter than this are sent for extraction.
pub const MAX_VIDEO_DURATION_S: f64 = 600.0;
pub const MAX_STEPS: usize = 40;

#[derive(Debug, Error)]
pub enum StepError {
    #[error("video is {0:.2}s long; extraction needs less than 600s")]
    Duration(f64),
    #[error("response contains no structured step array")]
    NoStructuredOutput,
    #[error("record {record}: missing or invalid field {field:?}")]
    Field { record: usize, field: &'static str },
    #[error("malformed steps: {}", join_violations(.0))]
    MalformedSteps(Vec<Violation>),
    #[error(transparent)]
    Gateway(#[from] GatewayError),
}

fn join_violations(v: &[Violation]) -> String {
    v.iter().map(ToString::to_string).collect::<Vec<_>>().join(", ")
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct InstructionStep {
    pub index: usize,
    pub instruction: String,
    pub start_s: f64,
    pub end_s: f64,
}

/// Persisted as one `steps.jsonl` record.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StepList {
    pub video_id: String,
    #[serde(rename = "title")]
    pub wikihow_title: String,
    pub steps: Vec<InstructionStep>,
}

impl StepList {
    pub fn len(&self) -> usize {
        self.steps.len()
    }

    pub fn is_empty(&self) -> bool {
        self.steps.is_empty()
    }
}

/// Reasons a parsed step list is rejected. Step numbers are 1-based.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "kind", content = "step", rename_all = "SCREAMING_SNAKE_CASE")]
pub enum Violation {
    /// Starts before the previous step.
    Nonmonotone(usize),
    /// Blank instruction text.
    Empty(usize),
    /// Ends past the video duration (plus slack).
    OutOfRange(usize),
    /// Starts after it ends.
    Inverted(usize),
    /// Fewer than one or more than [`MAX_STEPS`] steps.
    StepCount(usize),
}

impl fmt::Display for Violation {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Violation::Nonmonotone(i) => write!(f, "NONMONOTONE({i})"),
            Violation::Empty(i) => write!(f, "EMPTY({i})"),
            Violation::OutOfRange(i) => write!(f, "OUT_OF_RANGE({i})"),
            Violation::Inverted(i) => write!(f, "INVERTED({i})"),
            Violation::StepCount(n) => write!(f, "STEP_COUNT({n})"),
        }
    }
}

/// Renders `SS.SS - SS.SS: "text"` lines, one per sentence.
pub fn render_transcript_lines(t: &Transcript) -> String {
    let mut out = String::new();
    for s in &t.sentences {
        let _ = writeln!(out, "{:05.2} - {:05.2}: \"{}\"", s.start_s, s.end_s, s.text);
    }
    out.truncate(out.trim_end_matches('\n').len());
    out
}

pub fn build_step_prompt(title: &str, t: &Transcript) -> Result<String, StepError> {
    if t.duration_s >= MAX_VIDEO_DURATION_S {
        return Err(StepError::Duration(t.duration_s));
    }
    Ok(prompt::render(STEP_PROMPT_TEMPLATE, title, &render_transcript_lines(t)))
}

/// Finds the first `[` that starts a well-formed JSON array.
fn first_json_array(response: &str) -> Option<Vec<Value>> {
    response.match_indices('[').find_map(|(pos, _)| {
        let mut stream = serde_json::Deserializer::from_str(&response[pos..]).into_iter::<Value>();
        match stream.next() {
            Some(Ok(Value::Array(items))) => Some(items),
            _ => None,
        }
    })
}

fn number_field(rec: &serde_json::Map<String, Value>, field: &'static str, record: usize) -> Result<f64, StepError> {
    let v = rec.get(field).ok_or(StepError::Field { record, field })?;
    let n = match v {
        Value::Number(n) => n.as_f64(),
        Value::String(s) => s.trim().parse::<f64>().ok(),
        _ => None,
    };
    n.filter(|x| x.is_finite()).ok_or(StepError::Field { record, field })
}

/// Parses the model's structured answer.
///
/// Accepts the few-shot shape `[{"WikiHow Title": ..}, {"steps": [..]}]` as
/// well as a bare array of step records; prose around the array is ignored.
/// Steps are renumbered 1.. in the order given.
pub fn parse_steps(response: &str, video_id: &str) -> Result<StepList, StepError> {
    let items = first_json_array(response).ok_or(StepError::NoStructuredOutput)?;
    let mut title = String::new();
    let mut records = Vec::new();
    for item in items {
        let Value::Object(obj) = item else { continue };
        if let Some(t) = obj.get("WikiHow Title").and_then(Value::as_str) {
            title = t.trim().to_string();
        }
        match obj.get("steps") {
            Some(Value::Array(inner)) => records.extend(inner.iter().cloned()),
            _ if obj.contains_key("instruction") || obj.contains_key("step") => records.push(Value::Object(obj)),
            _ => {}
        }
    }
    let mut steps = Vec::with_capacity(records.len());
    for (i, rec) in records.iter().enumerate() {
        let record = i + 1;
        let Value::Object(rec) = rec else {
            return Err(StepError::Field { record, field: "instruction" });
        };
        let instruction = rec
            .get("instruction")
            .and_then(Value::as_str)
            .ok_or(StepError::Field { record, field: "instruction" })?;
        steps.push(InstructionStep {
            index: record,
            instruction: instruction.trim().to_string(),
            start_s: number_field(rec, "start_timestamp", record)?,
            end_s: number_field(rec, "end_timestamp", record)?,
        });
    }
    Ok(StepList { video_id: video_id.to_string(), wikihow_title: title, steps })
}

/// Everything wrong with a step list; empty means accept.
pub fn validate_steps(s: &StepList, t: &Transcript) -> Vec<Violation> {
    let mut out = Vec::new();
    if s.steps.is_empty() || s.steps.len() > MAX_STEPS {
        out.push(Violation::StepCount(s.steps.len()));
    }
    for (i, step) in s.steps.iter().enumerate() {
        let n = i + 1;
        if i > 0 && step.start_s < s.steps[i - 1].start_s {
            out.push(Violation::Nonmonotone(n));
        }
        if step.instruction.trim().is_empty() {
            out.push(Violation::Empty(n));
        }
        if step.start_s > step.end_s {
            out.push(Violation::Inverted(n));
        }
        if step.end_s > t.duration_s + DURATION_SLACK_S {
            out.push(Violation::OutOfRange(n));
        }
    }
    out
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ExtractConfig {
    pub max_tokens: u32,
    pub temperature: f64,
    pub seed: Option<u64>,
}

impl Default for ExtractConfig {
    fn default() -> Self {
        Self { max_tokens: 2048, temperature: 0.0, seed: None }
    }
}

/// Prompt, complete, parse and validate. Any violation rejects the video.
pub fn extract_steps(
    t: &Transcript,
    gateway: &dyn Gateway,
    gateway_cfg: &GatewayConfig,
    cfg: &ExtractConfig,
) -> Result<StepList, StepError> {
    let prompt = build_step_prompt(&t.title, t)?;
    let req = CompletionRequest::new(prompt, cfg.max_tokens)
        .with_temperature(cfg.temperature)
        .with_seed(cfg.seed);
    let raw = gateway.complete(gateway_cfg, &req)?;
    let steps = parse_steps(&raw, &t.video_id)?;
    let violations = validate_steps(&steps, t);
    if violations.is_empty() {
        Ok(steps)
    } else {
        Err(StepError::MalformedSteps(violations))
    }
}

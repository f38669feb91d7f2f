//! Timestamped narration transcripts.
//!
//! Three encodings are understood: SRT, WebVTT, and a sentence JSON that is
//! the canonical interchange format between the speech-recognition exporter
//! and the rest of the pipeline. All three carry millisecond timestamps.

use std::fmt::Write as _;

use serde::{Deserialize, Serialize};
use thiserror::Error;

/// Cues may start up to this much earlier than their predecessor; they are
/// re-sorted instead of rejected.
pub const REORDER_TOLERANCE_S: f64 = 0.5;
/// Sentences may end this far past the declared duration.
pub const DURATION_SLACK_S: f64 = 1.0;

#[derive(Debug, Error)]
pub enum TranscriptError {
    #[error("transcript is not valid UTF-8: {0}")]
    Decode(#[from] std::str::Utf8Error),
    #[error("line {line}: {message}")]
    Format { line: usize, message: String },
    #[error("sentence {index}: {message}")]
    InvalidSentence { index: usize, message: String },
    #[error("cue starting at {start_s:.3}s regresses {regress_s:.3}s behind an earlier cue")]
    Order { start_s: f64, regress_s: f64 },
    #[error("sentence ends at {end_s:.3}s, past the {duration_s:.3}s duration")]
    Range { end_s: f64, duration_s: f64 },
    #[error("video id must not be empty")]
    EmptyVideoId,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TranscriptFormat {
    Srt,
    WebVtt,
    SentenceJson,
}

impl TranscriptFormat {
    pub const ALL: [TranscriptFormat; 3] = [Self::Srt, Self::WebVtt, Self::SentenceJson];

    pub fn from_extension(ext: &str) -> Option<Self> {
        match ext.to_ascii_lowercase().as_str() {
            "srt" => Some(Self::Srt),
            "vtt" => Some(Self::WebVtt),
            "json" => Some(Self::SentenceJson),
            _ => None,
        }
    }

    pub fn extension(self) -> &'static str {
        match self {
            Self::Srt => "srt",
            Self::WebVtt => "vtt",
            Self::SentenceJson => "json",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NarrationSentence {
    pub start_s: f64,
    pub end_s: f64,
    pub text: String,
}

impl NarrationSentence {
    pub fn new(start_s: f64, end_s: f64, text: impl Into<String>) -> Self {
        Self { start_s, end_s, text: text.into() }
    }
}

/// The narration of one video, sentences ordered by start time.
#[derive(Debug, Clone, PartialEq)]
pub struct Transcript {
    pub video_id: String,
    pub title: String,
    pub duration_s: f64,
    pub sentences: Vec<NarrationSentence>,
}

impl Transcript {
    /// Builds a transcript, re-sorting small regressions and checking every
    /// invariant. `duration_s = None` means "use the last sentence end".
    pub fn new(
        video_id: impl Into<String>,
        title: impl Into<String>,
        duration_s: Option<f64>,
        sentences: Vec<NarrationSentence>,
    ) -> Result<Self, TranscriptError> {
        let video_id = video_id.into();
        if video_id.trim().is_empty() {
            return Err(TranscriptError::EmptyVideoId);
        }
        for (index, s) in sentences.iter().enumerate() {
            check_sentence(s).map_err(|message| TranscriptError::InvalidSentence { index, message })?;
        }
        let sentences = order_sentences(sentences)?;
        let max_end = sentences.iter().map(|s| s.end_s).fold(0.0, f64::max);
        let duration_s = match duration_s {
            Some(d) if !(d.is_finite() && d >= 0.0) => {
                return Err(TranscriptError::InvalidSentence {
                    index: 0,
                    message: format!("invalid duration {d}"),
                })
            }
            Some(d) => d,
            None => max_end,
        };
        if max_end > duration_s + DURATION_SLACK_S {
            return Err(TranscriptError::Range { end_s: max_end, duration_s });
        }
        Ok(Self { video_id, title: title.into(), duration_s, sentences })
    }

    pub fn with_title(mut self, title: impl Into<String>) -> Self {
        self.title = title.into();
        self
    }

    pub fn is_empty(&self) -> bool {
        self.sentences.is_empty()
    }

    /// All sentence texts joined by single spaces.
    pub fn full_text(&self) -> String {
        join_texts(self.sentences.iter())
    }
}

fn check_sentence(s: &NarrationSentence) -> Result<(), String> {
    if !(s.start_s.is_finite() && s.end_s.is_finite()) {
        return Err("timestamps must be finite".into());
    }
    if s.start_s < 0.0 {
        return Err(format!("negative start {}", s.start_s));
    }
    if s.start_s > s.end_s {
        return Err(format!("start {} after end {}", s.start_s, s.end_s));
    }
    if s.text.trim().is_empty() {
        return Err("empty text".into());
    }
    Ok(())
}

fn order_sentences(mut sentences: Vec<NarrationSentence>) -> Result<Vec<NarrationSentence>, TranscriptError> {
    let mut latest = f64::NEG_INFINITY;
    let mut sorted = true;
    for s in &sentences {
        if s.start_s < latest {
            let regress_s = latest - s.start_s;
            if regress_s > REORDER_TOLERANCE_S {
                return Err(TranscriptError::Order { start_s: s.start_s, regress_s });
            }
            sorted = false;
        }
        latest = latest.max(s.start_s);
    }
    if !sorted {
        sentences.sort_by(|a, b| a.start_s.total_cmp(&b.start_s));
    }
    Ok(sentences)
}

fn join_texts<'a>(it: impl Iterator<Item = &'a NarrationSentence>) -> String {
    let mut out = String::new();
    for s in it {
        if !out.is_empty() {
            out.push(' ');
        }
        out.push_str(&s.text);
    }
    out
}

/// Leading sentences joined by spaces, as many whole sentences as fit into
/// `max_chars` characters. A sentence is never cut.
pub fn transcript_excerpt(t: &Transcript, max_chars: usize) -> String {
    let mut out = String::new();
    let mut used = 0usize;
    for s in &t.sentences {
        let len = s.text.chars().count();
        let needed = if out.is_empty() { len } else { len + 1 };
        if used + needed > max_chars {
            break;
        }
        if !out.is_empty() {
            out.push(' ');
        }
        out.push_str(&s.text);
        used += needed;
    }
    out
}

/// Parses `raw` in the given format.
///
/// `video_id` names the transcript unless a sentence JSON document carries
/// its own id. Titles only survive in sentence JSON.
pub fn parse_transcript(raw: &[u8], format: TranscriptFormat, video_id: &str) -> Result<Transcript, TranscriptError> {
    let text = std::str::from_utf8(raw)?;
    let text = text.strip_prefix('\u{feff}').unwrap_or(text);
    match format {
        TranscriptFormat::Srt => Transcript::new(video_id, "", None, parse_cues(text, false)?),
        TranscriptFormat::WebVtt => Transcript::new(video_id, "", None, parse_cues(text, true)?),
        TranscriptFormat::SentenceJson => parse_sentence_json(text, video_id),
    }
}

pub fn serialize_transcript(t: &Transcript, format: TranscriptFormat) -> Vec<u8> {
    match format {
        TranscriptFormat::Srt => write_cues(t, false).into_bytes(),
        TranscriptFormat::WebVtt => write_cues(t, true).into_bytes(),
        TranscriptFormat::SentenceJson => {
            let doc = SentenceDocRef {
                video_id: &t.video_id,
                title: &t.title,
                duration: t.duration_s,
                sentences: t.sentences.iter().map(|s| SentenceRef { start: s.start_s, end: s.end_s, text: &s.text }).collect(),
            };
            let mut out = serde_json::to_vec_pretty(&doc).expect("transcript serialization cannot fail");
            out.push(b'\n');
            out
        }
    }
}

// ---------------------------------------------------------------------------
// sentence JSON

#[derive(Serialize)]
struct SentenceRef<'a> {
    start: f64,
    end: f64,
    text: &'a str,
}

#[derive(Serialize)]
struct SentenceDocRef<'a> {
    video_id: &'a str,
    title: &'a str,
    duration: f64,
    sentences: Vec<SentenceRef<'a>>,
}

#[derive(Deserialize)]
struct SentenceIn {
    start: f64,
    end: f64,
    text: String,
}

#[derive(Deserialize)]
#[serde(untagged)]
enum SentenceDocIn {
    Bare(Vec<SentenceIn>),
    Full {
        #[serde(default)]
        video_id: Option<String>,
        #[serde(default)]
        title: Option<String>,
        #[serde(default)]
        duration: Option<f64>,
        sentences: Vec<SentenceIn>,
    },
}

fn parse_sentence_json(text: &str, video_id: &str) -> Result<Transcript, TranscriptError> {
    let doc: SentenceDocIn = serde_json::from_str(text).map_err(|e| TranscriptError::Format {
        line: e.line(),
        message: e.to_string(),
    })?;
    let (id, title, duration, raw) = match doc {
        SentenceDocIn::Bare(s) => (None, None, None, s),
        SentenceDocIn::Full { video_id, title, duration, sentences } => (video_id, title, duration, sentences),
    };
    let sentences = raw
        .into_iter()
        .filter_map(|s| {
            let text = normalize_text(&s.text);
            (!text.is_empty()).then(|| NarrationSentence::new(s.start, s.end, text))
        })
        .collect();
    let id = id.filter(|v| !v.trim().is_empty()).unwrap_or_else(|| video_id.to_string());
    Transcript::new(id, title.unwrap_or_default(), duration, sentences)
}

// ---------------------------------------------------------------------------
// SRT / WebVTT

fn parse_cues(text: &str, vtt: bool) -> Result<Vec<NarrationSentence>, TranscriptError> {
    let lines: Vec<&str> = text.lines().map(|l| l.trim_end_matches('\r')).collect();
    let mut i = 0usize;
    if vtt {
        while i < lines.len() && lines[i].trim().is_empty() {
            i += 1;
        }
        let header = lines.get(i).copied().unwrap_or("");
        let is_header = header == "WEBVTT" || header.starts_with("WEBVTT ") || header.starts_with("WEBVTT\t");
        if !is_header {
            return Err(TranscriptError::Format { line: i + 1, message: "missing WEBVTT header".into() });
        }
        // header block runs until the first blank line
        while i < lines.len() && !lines[i].trim().is_empty() {
            i += 1;
        }
    }

    let mut sentences = Vec::new();
    while i < lines.len() {
        if lines[i].trim().is_empty() {
            i += 1;
            continue;
        }
        let block_start = i;
        while i < lines.len() && !lines[i].trim().is_empty() {
            i += 1;
        }
        let block = &lines[block_start..i];
        if vtt && ["NOTE", "STYLE", "REGION"].iter().any(|kw| block[0] == *kw || block[0].starts_with(&format!("{kw} "))) {
            continue;
        }
        let timing = if block[0].contains("-->") {
            0
        } else if block.len() > 1 && block[1].contains("-->") {
            if !vtt && block[0].trim().parse::<u64>().is_err() {
                return Err(TranscriptError::Format {
                    line: block_start + 1,
                    message: format!("expected cue index, found {:?}", block[0]),
                });
            }
            1
        } else {
            return Err(TranscriptError::Format {
                line: block_start + 1,
                message: "cue has no timing line".into(),
            });
        };
        let line_no = block_start + timing + 1;
        let (start_s, end_s) =
            parse_timing(block[timing]).map_err(|message| TranscriptError::Format { line: line_no, message })?;
        if start_s > end_s {
            return Err(TranscriptError::Format {
                line: line_no,
                message: format!("cue starts after it ends ({start_s:.3} > {end_s:.3})"),
            });
        }
        let joined = block[timing + 1..].join(" ");
        let text = if vtt { decode_entities(&strip_tags(&joined)) } else { strip_tags(&joined) };
        let text = normalize_text(&text);
        if !text.is_empty() {
            sentences.push(NarrationSentence { start_s, end_s, text });
        }
    }
    Ok(sentences)
}

fn parse_timing(line: &str) -> Result<(f64, f64), String> {
    let (a, b) = line.split_once("-->").ok_or_else(|| "missing -->".to_string())?;
    let start = parse_timestamp(a.trim())?;
    // WebVTT cue settings may follow the end timestamp
    let end_tok = b.split_whitespace().next().ok_or_else(|| "missing end timestamp".to_string())?;
    let end = parse_timestamp(end_tok)?;
    Ok((start as f64 / 1000.0, end as f64 / 1000.0))
}

/// `[HH:]MM:SS[,.]mmm` to milliseconds.
fn parse_timestamp(s: &str) -> Result<u64, String> {
    let bad = || format!("malformed timestamp {s:?}");
    let (clock, frac) = s.rsplit_once([',', '.']).ok_or_else(bad)?;
    if frac.len() != 3 || !frac.bytes().all(|b| b.is_ascii_digit()) {
        return Err(bad());
    }
    let ms: u64 = frac.parse().map_err(|_| bad())?;
    let parts: Vec<&str> = clock.split(':').collect();
    if !(2..=3).contains(&parts.len()) {
        return Err(bad());
    }
    let mut total = 0u64;
    for (k, p) in parts.iter().enumerate() {
        if p.is_empty() || !p.bytes().all(|b| b.is_ascii_digit()) {
            return Err(bad());
        }
        let v: u64 = p.parse().map_err(|_| bad())?;
        if k > 0 && v >= 60 {
            return Err(bad());
        }
        total = total * 60 + v;
    }
    Ok(total * 1000 + ms)
}

fn format_timestamp(seconds: f64, sep: char) -> String {
    let ms = (seconds * 1000.0).round() as u64;
    let (h, rem) = (ms / 3_600_000, ms % 3_600_000);
    let (m, rem) = (rem / 60_000, rem % 60_000);
    let (s, ms) = (rem / 1000, rem % 1000);
    format!("{h:02}:{m:02}:{s:02}{sep}{ms:03}")
}

fn write_cues(t: &Transcript, vtt: bool) -> String {
    let mut out = String::new();
    if vtt {
        out.push_str("WEBVTT\n\n");
    }
    let sep = if vtt { '.' } else { ',' };
    for (i, s) in t.sentences.iter().enumerate() {
        if !vtt {
            let _ = writeln!(out, "{}", i + 1);
        }
        let _ = writeln!(out, "{} --> {}", format_timestamp(s.start_s, sep), format_timestamp(s.end_s, sep));
        if vtt {
            let _ = writeln!(out, "{}", encode_entities(&s.text));
        } else {
            let _ = writeln!(out, "{}", s.text);
        }
        out.push('\n');
    }
    out
}

/// Removes markup such as `<i>`, `</font>`, `<c.yellow>` or `<00:00:01.000>`.
/// A `<` not followed by a tag-like character is kept as text.
fn strip_tags(s: &str) -> String {
    let mut out = String::with_capacity(s.len());
    let mut rest = s;
    while let Some(pos) = rest.find('<') {
        out.push_str(&rest[..pos]);
        let after = &rest[pos + 1..];
        let tag_like = after.chars().next().is_some_and(|c| c.is_ascii_alphanumeric() || c == '/');
        match (tag_like, after.find('>')) {
            (true, Some(close)) if !after[..close].contains('<') => rest = &after[close + 1..],
            _ => {
                out.push('<');
                rest = after;
            }
        }
    }
    out.push_str(rest);
    out
}

fn decode_entities(s: &str) -> String {
    s.replace("&lt;", "<")
        .replace("&gt;", ">")
        .replace("&nbsp;", " ")
        .replace("&amp;", "&")
}

fn encode_entities(s: &str) -> String {
    s.replace('&', "&amp;").replace('<', "&lt;").replace('>', "&gt;")
}

/// Collapses every whitespace run (including newlines) into one space.
pub fn normalize_text(s: &str) -> String {
    s.split_whitespace().collect::<Vec<_>>().join(" ")
}

//! Text-generation gateway.
//!
//! [`HttpGateway`] talks to a chat-completions compatible endpoint;
//! [`MockGateway`] replays scripted responses so that whole pipeline runs
//! are reproducible offline.

use std::collections::{HashMap, VecDeque};
use std::path::Path;
use std::sync::Mutex;
use std::time::Duration;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use thiserror::Error;

/// Environment variable holding the bearer token for the HTTP endpoint.
pub const API_KEY_ENV: &str = "STEPFRAME_API_KEY";
const BACKOFF_BASE: Duration = Duration::from_millis(250);
const BODY_EXCERPT_CHARS: usize = 300;

#[derive(Debug, Error)]
pub enum GatewayError {
    #[error("request timed out after {0:?}")]
    Timeout(Duration),
    #[error("service error{}: {body}", status.map(|s| format!(" (HTTP {s})")).unwrap_or_default())]
    Service { status: Option<u16>, body: String },
    #[error("gave up after {attempts} attempts: {last}")]
    RetriesExhausted { attempts: u32, last: Box<GatewayError> },
    #[error("invalid request: {0}")]
    InvalidRequest(String),
    #[error("no scripted response for prompt {hash}")]
    Unscripted { hash: String },
    #[error("mock script: {0}")]
    Script(String),
}

impl GatewayError {
    fn is_transient(&self) -> bool {
        match self {
            GatewayError::Timeout(_) => true,
            GatewayError::Service { status: None, .. } => true,
            GatewayError::Service { status: Some(s), .. } => *s == 429 || *s >= 500,
            _ => false,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CompletionRequest {
    pub prompt: String,
    pub max_tokens: u32,
    pub temperature: f64,
    pub seed: Option<u64>,
}

impl CompletionRequest {
    /// Greedy decoding (temperature 0) by default.
    pub fn new(prompt: impl Into<String>, max_tokens: u32) -> Self {
        Self { prompt: prompt.into(), max_tokens, temperature: 0.0, seed: None }
    }

    pub fn with_seed(mut self, seed: Option<u64>) -> Self {
        self.seed = seed;
        self
    }

    pub fn with_temperature(mut self, temperature: f64) -> Self {
        self.temperature = temperature;
        self
    }

    fn validate(&self, cfg: &GatewayConfig) -> Result<(), GatewayError> {
        if self.prompt.is_empty() {
            return Err(GatewayError::InvalidRequest("empty prompt".into()));
        }
        if self.max_tokens == 0 || self.max_tokens > cfg.max_tokens_ceiling {
            return Err(GatewayError::InvalidRequest(format!(
                "max_tokens {} outside 1..={}",
                self.max_tokens, cfg.max_tokens_ceiling
            )));
        }
        if !(self.temperature >= 0.0) {
            return Err(GatewayError::InvalidRequest(format!("temperature {}", self.temperature)));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct GatewayConfig {
    pub endpoint: String,
    pub model_id: String,
    pub timeout_s: f64,
    pub max_retries: u32,
    pub max_tokens_ceiling: u32,
}

impl Default for GatewayConfig {
    fn default() -> Self {
        Self {
            endpoint: "http://127.0.0.1:8000/v1/chat/completions".into(),
            model_id: "meta-llama/Llama-3.1-8B-Instruct".into(),
            timeout_s: 120.0,
            max_retries: 3,
            max_tokens_ceiling: 4096,
        }
    }
}

impl GatewayConfig {
    pub fn validate(&self) -> Result<(), GatewayError> {
        if !(self.timeout_s > 0.0 && self.timeout_s.is_finite()) {
            return Err(GatewayError::InvalidRequest(format!("timeout_s must be positive, got {}", self.timeout_s)));
        }
        Ok(())
    }
}

/// Anything that turns a prompt into generated text.
pub trait Gateway: Send + Sync {
    fn complete(&self, cfg: &GatewayConfig, req: &CompletionRequest) -> Result<String, GatewayError>;
}

/// Hex SHA-256 of a prompt; the key used by mock scripts.
pub fn prompt_hash(prompt: &str) -> String {
    hex::encode(Sha256::digest(prompt.as_bytes()))
}

// ---------------------------------------------------------------------------
// HTTP

#[derive(Serialize)]
struct ChatMessage<'a> {
    role: &'a str,
    content: &'a str,
}

#[derive(Serialize)]
struct ChatRequest<'a> {
    model: &'a str,
    messages: [ChatMessage<'a>; 1],
    max_tokens: u32,
    temperature: f64,
    #[serde(skip_serializing_if = "Option::is_none")]
    seed: Option<u64>,
}

/// Request body in the chat-completions wire format.
pub fn request_body(cfg: &GatewayConfig, req: &CompletionRequest) -> String {
    serde_json::to_string(&ChatRequest {
        model: &cfg.model_id,
        messages: [ChatMessage { role: "user", content: &req.prompt }],
        max_tokens: req.max_tokens,
        temperature: req.temperature,
        seed: req.seed,
    })
    .expect("request serialization cannot fail")
}

/// Pulls `choices[0].message.content` out of a response body.
pub fn response_content(body: &str) -> Result<String, GatewayError> {
    let v: serde_json::Value = serde_json::from_str(body).map_err(|e| GatewayError::Service {
        status: Some(200),
        body: format!("unparseable response ({e}): {}", excerpt(body)),
    })?;
    v.pointer("/choices/0/message/content")
        .and_then(|c| c.as_str())
        .map(str::to_owned)
        .ok_or_else(|| GatewayError::Service {
            status: Some(200),
            body: format!("response has no choices[0].message.content: {}", excerpt(body)),
        })
}

fn excerpt(body: &str) -> String {
    body.chars().take(BODY_EXCERPT_CHARS).collect()
}

#[derive(Debug, Clone, Default)]
pub struct HttpGateway {
    api_key: Option<String>,
    backoff_base: Option<Duration>,
}

impl HttpGateway {
    pub fn new(api_key: Option<String>) -> Self {
        Self { api_key, backoff_base: None }
    }

    /// Reads the bearer token from [`API_KEY_ENV`], if set.
    pub fn from_env() -> Self {
        Self::new(std::env::var(API_KEY_ENV).ok().filter(|k| !k.is_empty()))
    }

    pub fn with_backoff(mut self, base: Duration) -> Self {
        self.backoff_base = Some(base);
        self
    }

    fn attempt(&self, agent: &ureq::Agent, cfg: &GatewayConfig, body: &str) -> Result<String, GatewayError> {
        let timeout = Duration::from_secs_f64(cfg.timeout_s);
        let mut request = agent.post(&cfg.endpoint).header("Content-Type", "application/json");
        if let Some(key) = &self.api_key {
            request = request.header("Authorization", &format!("Bearer {key}"));
        }
        let mut response = request.send(body).map_err(|e| match e {
            ureq::Error::Timeout(_) => GatewayError::Timeout(timeout),
            other => GatewayError::Service { status: None, body: other.to_string() },
        })?;
        let status = response.status().as_u16();
        let text = response.body_mut().read_to_string().map_err(|e| match e {
            ureq::Error::Timeout(_) => GatewayError::Timeout(timeout),
            other => GatewayError::Service { status: Some(status), body: other.to_string() },
        })?;
        if !(200..300).contains(&status) {
            return Err(GatewayError::Service { status: Some(status), body: excerpt(&text) });
        }
        response_content(&text)
    }
}

impl Gateway for HttpGateway {
    fn complete(&self, cfg: &GatewayConfig, req: &CompletionRequest) -> Result<String, GatewayError> {
        cfg.validate()?;
        req.validate(cfg)?;
        let agent: ureq::Agent = ureq::Agent::config_builder()
            .timeout_global(Some(Duration::from_secs_f64(cfg.timeout_s)))
            .http_status_as_error(false)
            .build()
            .into();
        let body = request_body(cfg, req);
        let base = self.backoff_base.unwrap_or(BACKOFF_BASE);
        let mut attempts = 0u32;
        loop {
            attempts += 1;
            match self.attempt(&agent, cfg, &body) {
                Ok(text) => return Ok(text),
                Err(e) if !e.is_transient() => return Err(e),
                Err(e) if cfg.max_retries == 0 => return Err(e),
                Err(e) if attempts > cfg.max_retries => {
                    return Err(GatewayError::RetriesExhausted { attempts, last: Box::new(e) })
                }
                Err(e) => {
                    log::debug!("attempt {attempts} failed ({e}); retrying");
                    std::thread::sleep(base * 2u32.saturating_pow(attempts - 1));
                }
            }
        }
    }
}

// ---------------------------------------------------------------------------
// mock

#[derive(Debug)]
enum Script {
    ByHash(HashMap<String, String>),
    Sequence(Mutex<VecDeque<String>>),
}

/// Scripted stand-in for a text-generation service.
#[derive(Debug)]
pub struct MockGateway {
    script: Script,
}

/// On-disk mock script: `{"responses": {"<sha256 of prompt>": "<reply>", ...}}`.
#[derive(Debug, Default, Serialize, Deserialize)]
pub struct MockScript {
    pub responses: std::collections::BTreeMap<String, String>,
}

impl MockScript {
    pub fn insert(&mut self, prompt: &str, response: impl Into<String>) {
        self.responses.insert(prompt_hash(prompt), response.into());
    }
}

impl MockGateway {
    /// Responds by exact prompt.
    pub fn from_prompts<I, P, R>(pairs: I) -> Self
    where
        I: IntoIterator<Item = (P, R)>,
        P: AsRef<str>,
        R: Into<String>,
    {
        let map = pairs.into_iter().map(|(p, r)| (prompt_hash(p.as_ref()), r.into())).collect();
        Self { script: Script::ByHash(map) }
    }

    pub fn from_script(script: MockScript) -> Self {
        Self { script: Script::ByHash(script.responses.into_iter().collect()) }
    }

    /// Hands out `responses` one per call, in order, regardless of prompt.
    pub fn sequence<I, R>(responses: I) -> Self
    where
        I: IntoIterator<Item = R>,
        R: Into<String>,
    {
        Self { script: Script::Sequence(Mutex::new(responses.into_iter().map(Into::into).collect())) }
    }

    pub fn from_file(path: impl AsRef<Path>) -> Result<Self, GatewayError> {
        let path = path.as_ref();
        let raw = std::fs::read_to_string(path).map_err(|e| GatewayError::Script(format!("{}: {e}", path.display())))?;
        let script: MockScript =
            serde_json::from_str(&raw).map_err(|e| GatewayError::Script(format!("{}: {e}", path.display())))?;
        Ok(Self::from_script(script))
    }
}

impl Gateway for MockGateway {
    fn complete(&self, cfg: &GatewayConfig, req: &CompletionRequest) -> Result<String, GatewayError> {
        req.validate(cfg)?;
        match &self.script {
            Script::ByHash(map) => {
                let hash = prompt_hash(&req.prompt);
                map.get(&hash).cloned().ok_or(GatewayError::Unscripted { hash })
            }
            Script::Sequence(queue) => queue
                .lock()
                .expect("mock queue poisoned")
                .pop_front()
                .ok_or_else(|| GatewayError::Script("response sequence exhausted".into())),
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::io::{BufRead, BufReader, Read, Write};
    use std::net::TcpListener;

    fn cfg() -> GatewayConfig {
        GatewayConfig { timeout_s: 5.0, ..GatewayConfig::default() }
    }

    #[test]
    fn mock_by_prompt() {
        let g = MockGateway::from_prompts([("P1", "Yes\nExplanation: shows a recipe.")]);
        let req = CompletionRequest::new("P1", 64);
        assert_eq!(g.complete(&cfg(), &req).unwrap(), "Yes\nExplanation: shows a recipe.");
        assert_eq!(g.complete(&cfg(), &req).unwrap(), "Yes\nExplanation: shows a recipe.");
        assert_eq!(req, CompletionRequest::new("P1", 64));
        assert!(matches!(g.complete(&cfg(), &CompletionRequest::new("P2", 64)), Err(GatewayError::Unscripted { .. })));
    }

    #[test]
    fn mock_sequence_in_order() {
        let g = MockGateway::sequence(["A", "B"]);
        let req = CompletionRequest::new("anything", 8);
        assert_eq!(g.complete(&cfg(), &req).unwrap(), "A");
        assert_eq!(g.complete(&cfg(), &req).unwrap(), "B");
        assert!(g.complete(&cfg(), &req).is_err());
    }

    #[test]
    fn mock_script_file() {
        let dir = tempfile::tempdir().unwrap();
        let mut script = MockScript::default();
        script.insert("hello", "world");
        let path = dir.path().join("mock.json");
        std::fs::write(&path, serde_json::to_string(&script).unwrap()).unwrap();
        let g = MockGateway::from_file(&path).unwrap();
        assert_eq!(g.complete(&cfg(), &CompletionRequest::new("hello", 8)).unwrap(), "world");
    }

    #[test]
    fn requests_are_validated() {
        let g = MockGateway::sequence(["x"]);
        assert!(matches!(g.complete(&cfg(), &CompletionRequest::new("", 8)), Err(GatewayError::InvalidRequest(_))));
        assert!(matches!(
            g.complete(&cfg(), &CompletionRequest::new("p", 1_000_000)),
            Err(GatewayError::InvalidRequest(_))
        ));
    }

    #[test]
    fn wire_format() {
        let body = request_body(&cfg(), &CompletionRequest::new("hi", 16).with_seed(Some(7)));
        let v: serde_json::Value = serde_json::from_str(&body).unwrap();
        assert_eq!(
            v,
            serde_json::json!({
                "model": "meta-llama/Llama-3.1-8B-Instruct",
                "messages": [{"role": "user", "content": "hi"}],
                "max_tokens": 16,
                "temperature": 0.0,
                "seed": 7
            })
        );
        let reply = r#"{"id":"x","choices":[{"index":0,"message":{"role":"assistant","content":"No."}}]}"#;
        assert_eq!(response_content(reply).unwrap(), "No.");
        assert!(response_content("{}").is_err());
    }

    #[test]
    fn unreachable_endpoint_is_a_service_error() {
        let port = {
            let l = TcpListener::bind("127.0.0.1:0").unwrap();
            l.local_addr().unwrap().port()
        };
        let cfg = GatewayConfig { endpoint: format!("http://127.0.0.1:{port}/v1/chat/completions"), max_retries: 0, ..cfg() };
        let err = HttpGateway::new(None).complete(&cfg, &CompletionRequest::new("p", 8)).unwrap_err();
        assert!(matches!(err, GatewayError::Service { status: None, .. }), "{err}");

        let cfg = GatewayConfig { max_retries: 2, ..cfg };
        let err = HttpGateway::new(None)
            .with_backoff(Duration::from_millis(1))
            .complete(&cfg, &CompletionRequest::new("p", 8))
            .unwrap_err();
        assert!(matches!(err, GatewayError::RetriesExhausted { attempts: 3, .. }), "{err}");
    }

    /// Serves the given (status, body) replies, one connection each, and
    /// returns the request bodies it saw.
    fn serve(replies: Vec<(u16, String)>) -> (String, std::thread::JoinHandle<Vec<(String, String)>>) {
        let listener = TcpListener::bind("127.0.0.1:0").unwrap();
        let url = format!("http://{}/v1/chat/completions", listener.local_addr().unwrap());
        let handle = std::thread::spawn(move || {
            let mut seen = Vec::new();
            for (status, body) in replies {
                let (stream, _) = listener.accept().unwrap();
                let mut reader = BufReader::new(stream);
                let mut len = 0usize;
                let mut auth = String::new();
                loop {
                    let mut line = String::new();
                    reader.read_line(&mut line).unwrap();
                    let lower = line.to_ascii_lowercase();
                    if let Some(v) = lower.strip_prefix("content-length:") {
                        len = v.trim().parse().unwrap();
                    }
                    if lower.starts_with("authorization:") {
                        auth = line["authorization:".len()..].trim().to_string();
                    }
                    if line == "\r\n" || line.is_empty() {
                        break;
                    }
                }
                let mut buf = vec![0u8; len];
                reader.read_exact(&mut buf).unwrap();
                seen.push((String::from_utf8(buf).unwrap(), auth));
                let mut stream = reader.into_inner();
                write!(
                    stream,
                    "HTTP/1.1 {status} X\r\nContent-Type: application/json\r\nContent-Length: {}\r\nConnection: close\r\n\r\n{body}",
                    body.len()
                )
                .unwrap();
            }
            seen
        });
        (url, handle)
    }

    #[test]
    fn http_round_trip_with_retry_on_5xx() {
        let ok = r#"{"choices":[{"message":{"role":"assistant","content":"Yes\nExplanation: demo."}}]}"#.to_string();
        let (url, handle) = serve(vec![(503, "busy".into()), (200, ok)]);
        let cfg = GatewayConfig { endpoint: url, max_retries: 2, ..cfg() };
        let out = HttpGateway::new(Some("sekrit".into()))
            .with_backoff(Duration::from_millis(1))
            .complete(&cfg, &CompletionRequest::new("Is it?", 32))
            .unwrap();
        assert_eq!(out, "Yes\nExplanation: demo.");
        let seen = handle.join().unwrap();
        assert_eq!(seen.len(), 2);
        let body: serde_json::Value = serde_json::from_str(&seen[1].0).unwrap();
        assert_eq!(body["messages"][0]["content"], "Is it?");
        assert_eq!(body["max_tokens"], 32);
        assert_eq!(seen[1].1, "Bearer sekrit");
    }

    #[test]
    fn client_errors_are_not_retried() {
        let (url, handle) = serve(vec![(400, r#"{"error":"bad"}"#.into())]);
        let cfg = GatewayConfig { endpoint: url, max_retries: 3, ..cfg() };
        let err = HttpGateway::new(None).complete(&cfg, &CompletionRequest::new("p", 8)).unwrap_err();
        assert!(matches!(err, GatewayError::Service { status: Some(400), .. }), "{err}");
        assert_eq!(handle.join().unwrap().len(), 1);
    }
}

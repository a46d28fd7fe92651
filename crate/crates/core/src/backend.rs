//! Model access over the chat-completions wire protocol, plus a scripted
//! mock with the same call contract.

use std::fs;
use std::path::{Path, PathBuf};
use std::sync::Mutex;
use std::time::Duration;

use serde::{Deserialize, Serialize};
use serde_json::{json, Value};

use crate::retrieval::{EmbedError, Embedder};

/// Longest response body excerpt kept in error messages.
const BODY_EXCERPT: usize = 512;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct BackendConfig {
    pub endpoint_url: String,
    pub model_name: String,
    /// Name of the environment variable holding the API key.
    pub api_key_env: String,
    pub max_new_tokens: usize,
    pub temperature: f64,
    #[serde(with = "secs")]
    pub timeout: Duration,
    pub max_retries_network: usize,
}

impl Default for BackendConfig {
    fn default() -> Self {
        Self {
            endpoint_url: "http://localhost:8000/v1".to_string(),
            model_name: "docsync".to_string(),
            api_key_env: "OPENAI_API_KEY".to_string(),
            max_new_tokens: 96,
            temperature: 0.0,
            timeout: Duration::from_secs(60),
            max_retries_network: 3,
        }
    }
}

impl BackendConfig {
    pub fn validate(&self) -> Result<(), BackendError> {
        if self.max_new_tokens < 1 {
            return Err(BackendError::Config(
                "max_new_tokens must be at least 1".into(),
            ));
        }
        if self.timeout.is_zero() {
            return Err(BackendError::Config("timeout must be positive".into()));
        }
        if !(self.temperature >= 0.0 && self.temperature.is_finite()) {
            return Err(BackendError::Config(
                "temperature must be a finite value >= 0".into(),
            ));
        }
        if self.endpoint_url.trim().is_empty() {
            return Err(BackendError::Config("endpoint_url is empty".into()));
        }
        Ok(())
    }

    fn url(&self, path: &str) -> String {
        format!("{}/{path}", self.endpoint_url.trim_end_matches('/'))
    }
}

mod secs {
    use std::time::Duration;

    use serde::{Deserialize, Deserializer, Serializer};

    pub fn serialize<S: Serializer>(d: &Duration, s: S) -> Result<S::Ok, S::Error> {
        s.serialize_f64(d.as_secs_f64())
    }

    pub fn deserialize<'de, D: Deserializer<'de>>(d: D) -> Result<Duration, D::Error> {
        let secs = f64::deserialize(d)?;
        Duration::try_from_secs_f64(secs).map_err(serde::de::Error::custom)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum FinishReason {
    Stop,
    Length,
    Error,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Completion {
    pub text: String,
    pub finish_reason: FinishReason,
    pub usage_prompt_tokens: usize,
    pub usage_completion_tokens: usize,
}

impl Completion {
    pub fn stop(text: impl Into<String>) -> Self {
        Self {
            text: text.into(),
            finish_reason: FinishReason::Stop,
            usage_prompt_tokens: 0,
            usage_completion_tokens: 0,
        }
    }
}

#[derive(Debug, thiserror::Error)]
pub enum BackendError {
    #[error("HTTP {status} from {endpoint}: {body}")]
    Http {
        endpoint: String,
        status: u16,
        body: String,
    },
    #[error("request to {endpoint} timed out after {attempts} attempt(s)")]
    Timeout { endpoint: String, attempts: usize },
    #[error("request to {endpoint} failed: {message}")]
    Transport { endpoint: String, message: String },
    #[error("invalid response from {endpoint}: {message}")]
    InvalidResponse { endpoint: String, message: String },
    #[error("mock script exhausted at call {call}")]
    ScriptExhausted { call: usize },
    #[error("{path}: {source}")]
    Fixture {
        path: PathBuf,
        source: std::io::Error,
    },
    #[error("invalid backend configuration: {0}")]
    Config(String),
}

impl BackendError {
    /// Whether another attempt might succeed.
    pub fn is_retryable(&self) -> bool {
        match self {
            BackendError::Http { status, .. } => *status == 429 || *status >= 500,
            BackendError::Timeout { .. } | BackendError::Transport { .. } => true,
            _ => false,
        }
    }
}

/// A text-generation model behind a system/user message pair.
pub trait Backend: Send + Sync {
    fn complete(&self, system: &str, user: &str) -> Result<Completion, BackendError>;
}

/// Client for an OpenAI-compatible `/chat/completions` endpoint.
#[derive(Debug)]
pub struct HttpBackend {
    config: BackendConfig,
    agent: ureq::Agent,
    backoff: Duration,
}

impl HttpBackend {
    pub fn new(config: BackendConfig) -> Result<Self, BackendError> {
        config.validate()?;
        Ok(Self {
            agent: agent(&config),
            config,
            backoff: Duration::from_millis(500),
        })
    }

    /// Base delay of the exponential backoff between retries.
    pub fn with_backoff(mut self, base: Duration) -> Self {
        self.backoff = base;
        self
    }

    pub fn config(&self) -> &BackendConfig {
        &self.config
    }
}

fn agent(config: &BackendConfig) -> ureq::Agent {
    ureq::Agent::config_builder()
        .timeout_global(Some(config.timeout))
        .http_status_as_error(false)
        .build()
        .into()
}

/// POSTs `body` as JSON, retrying retryable failures with exponential
/// backoff, and returns the parsed response body.
fn post_json(
    agent: &ureq::Agent,
    config: &BackendConfig,
    backoff: Duration,
    url: &str,
    body: &Value,
) -> Result<Value, BackendError> {
    let key = std::env::var(&config.api_key_env)
        .ok()
        .filter(|k| !k.is_empty());
    let mut attempt = 0;
    loop {
        attempt += 1;
        let mut request = agent.post(url).header("Content-Type", "application/json");
        if let Some(k) = &key {
            request = request.header("Authorization", format!("Bearer {k}"));
        }
        let error = match request.send_json(body) {
            Ok(mut response) => {
                let status = response.status().as_u16();
                let text = response.body_mut().read_to_string().unwrap_or_default();
                if (200..300).contains(&status) {
                    return serde_json::from_str(&text).map_err(|e| {
                        BackendError::InvalidResponse {
                            endpoint: url.to_string(),
                            message: format!("{e}: {}", excerpt(&text)),
                        }
                    });
                }
                BackendError::Http {
                    endpoint: url.to_string(),
                    status,
                    body: excerpt(&text),
                }
            }
            Err(ureq::Error::Timeout(_)) => BackendError::Timeout {
                endpoint: url.to_string(),
                attempts: attempt,
            },
            Err(e) => BackendError::Transport {
                endpoint: url.to_string(),
                message: e.to_string(),
            },
        };
        if !error.is_retryable() || attempt > config.max_retries_network {
            return Err(error);
        }
        let delay = backoff.saturating_mul(1 << (attempt - 1).min(16));
        log::warn!("{error}; retrying in {delay:?} (attempt {attempt})");
        std::thread::sleep(delay);
    }
}

fn excerpt(text: &str) -> String {
    match text.char_indices().nth(BODY_EXCERPT) {
        Some((idx, _)) => format!("{}...", &text[..idx]),
        None => text.to_string(),
    }
}

impl Backend for HttpBackend {
    fn complete(&self, system: &str, user: &str) -> Result<Completion, BackendError> {
        let url = self.config.url("chat/completions");
        let body = json!({
            "model": self.config.model_name,
            "messages": [
                {"role": "system", "content": system},
                {"role": "user", "content": user},
            ],
            "max_tokens": self.config.max_new_tokens,
            "temperature": self.config.temperature,
        });
        let response = post_json(&self.agent, &self.config, self.backoff, &url, &body)?;
        parse_completion(&response, self.config.max_new_tokens).map_err(|message| {
            BackendError::InvalidResponse {
                endpoint: url,
                message,
            }
        })
    }
}

fn parse_completion(response: &Value, max_new_tokens: usize) -> Result<Completion, String> {
    let choice = response
        .get("choices")
        .and_then(|c| c.get(0))
        .ok_or("missing choices[0]")?;
    let text = match choice.pointer("/message/content") {
        Some(Value::String(s)) => s.clone(),
        Some(Value::Null) => String::new(),
        _ => return Err("missing choices[0].message.content".to_string()),
    };
    let finish_reason = match choice.get("finish_reason").and_then(Value::as_str) {
        Some("length") => FinishReason::Length,
        Some("stop") | None => FinishReason::Stop,
        Some(_) => FinishReason::Error,
    };
    let usage = |field: &str| {
        response
            .pointer(&format!("/usage/{field}"))
            .and_then(Value::as_u64)
            .unwrap_or(0) as usize
    };
    let mut completion_tokens = usage("completion_tokens");
    if finish_reason == FinishReason::Length {
        // A length stop consumed the whole budget even when usage is omitted.
        completion_tokens = completion_tokens.max(max_new_tokens);
    }
    Ok(Completion {
        text,
        finish_reason,
        usage_prompt_tokens: usage("prompt_tokens"),
        usage_completion_tokens: completion_tokens,
    })
}

/// Embeddings from an OpenAI-compatible `/embeddings` endpoint.
#[derive(Debug)]
pub struct RemoteEmbedder {
    config: BackendConfig,
    dimension: usize,
    agent: ureq::Agent,
    backoff: Duration,
}

impl RemoteEmbedder {
    pub fn new(config: BackendConfig, dimension: usize) -> Result<Self, BackendError> {
        config.validate()?;
        if dimension == 0 {
            return Err(BackendError::Config(
                "embedding dimension must be positive".into(),
            ));
        }
        Ok(Self {
            agent: agent(&config),
            config,
            dimension,
            backoff: Duration::from_millis(500),
        })
    }

    pub fn with_backoff(mut self, base: Duration) -> Self {
        self.backoff = base;
        self
    }
}

impl Embedder for RemoteEmbedder {
    fn id(&self) -> String {
        format!("remote:{}:{}", self.config.model_name, self.dimension)
    }

    fn dimension(&self) -> usize {
        self.dimension
    }

    fn embed(&self, texts: &[String]) -> Result<Vec<Vec<f64>>, EmbedError> {
        let url = self.config.url("embeddings");
        let body = json!({"model": self.config.model_name, "input": texts});
        let response =
            post_json(&self.agent, &self.config, self.backoff, &url, &body).map_err(|e| {
                let status = match &e {
                    BackendError::Http { status, .. } => Some(*status),
                    _ => None,
                };
                EmbedError::Remote {
                    endpoint: url.clone(),
                    status,
                    retryable: e.is_retryable(),
                    message: e.to_string(),
                }
            })?;
        let invalid = |message: &str| EmbedError::Remote {
            endpoint: url.clone(),
            status: None,
            retryable: false,
            message: message.to_string(),
        };
        let data = response
            .get("data")
            .and_then(Value::as_array)
            .ok_or_else(|| invalid("missing data array"))?;
        let mut rows: Vec<(u64, Vec<f64>)> = Vec::with_capacity(data.len());
        for (pos, item) in data.iter().enumerate() {
            let index = item
                .get("index")
                .and_then(Value::as_u64)
                .unwrap_or(pos as u64);
            let vector = item
                .get("embedding")
                .and_then(Value::as_array)
                .ok_or_else(|| invalid("missing embedding"))?
                .iter()
                .map(|x| x.as_f64().ok_or_else(|| invalid("non-numeric embedding")))
                .collect::<Result<Vec<f64>, _>>()?;
            rows.push((index, vector));
        }
        rows.sort_by_key(|(i, _)| *i);
        Ok(rows.into_iter().map(|(_, v)| v).collect())
    }
}

/// Replays scripted responses in order and records every request.
#[derive(Debug, Default)]
pub struct MockBackend {
    script: Vec<String>,
    state: Mutex<MockState>,
}

#[derive(Debug, Default)]
struct MockState {
    next: usize,
    requests: Vec<(String, String)>,
}

impl MockBackend {
    pub fn new<S: Into<String>>(script: impl IntoIterator<Item = S>) -> Self {
        Self {
            script: script.into_iter().map(Into::into).collect(),
            state: Mutex::default(),
        }
    }

    /// Loads a fixture: one response per line, with `\n` and `\\` escapes.
    pub fn from_fixture(path: &Path) -> Result<Self, BackendError> {
        let body = fs::read_to_string(path).map_err(|source| BackendError::Fixture {
            path: path.to_path_buf(),
            source,
        })?;
        Ok(Self::new(body.lines().map(unescape_line)))
    }

    pub fn capacity(&self) -> usize {
        self.script.len()
    }

    /// Every `(system, user)` pair received so far.
    pub fn requests(&self) -> Vec<(String, String)> {
        self.state.lock().expect("mock state").requests.clone()
    }

    pub fn calls(&self) -> usize {
        self.state.lock().expect("mock state").requests.len()
    }
}

impl Backend for MockBackend {
    fn complete(&self, system: &str, user: &str) -> Result<Completion, BackendError> {
        let mut state = self.state.lock().expect("mock state");
        state.requests.push((system.to_string(), user.to_string()));
        let call = state.requests.len();
        match self.script.get(state.next) {
            Some(text) => {
                state.next += 1;
                Ok(Completion::stop(text.clone()))
            }
            None => Err(BackendError::ScriptExhausted { call }),
        }
    }
}

fn unescape_line(line: &str) -> String {
    let mut out = String::with_capacity(line.len());
    let mut chars = line.chars();
    while let Some(c) = chars.next() {
        if c != '\\' {
            out.push(c);
            continue;
        }
        match chars.next() {
            Some('n') => out.push('\n'),
            Some('\\') => out.push('\\'),
            Some(other) => {
                out.push('\\');
                out.push(other);
            }
            None => out.push('\\'),
        }
    }
    out
}

/// Inverse of the fixture line escaping.
pub fn escape_line(text: &str) -> String {
    text.replace('\\', "\\\\").replace('\n', "\\n")
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn mock_replays_then_exhausts() {
        let mock = MockBackend::new(["A", "B"]);
        assert_eq!(mock.complete("s", "u1").unwrap().text, "A");
        assert_eq!(mock.complete("s", "u2").unwrap().text, "B");
        let err = mock.complete("s", "u3").unwrap_err();
        assert_eq!(err.to_string(), "mock script exhausted at call 3");
        assert_eq!(mock.calls(), 3);
    }

    #[test]
    fn fixture_loading() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("fixture.txt");
        fs::write(&path, "one\ntwo\\nlines\nthree\nfour\nfive\n").unwrap();
        let mock = MockBackend::from_fixture(&path).unwrap();
        assert_eq!(mock.capacity(), 5);
        mock.complete("sys", "a").unwrap();
        assert_eq!(mock.complete("sys", "b").unwrap().text, "two\nlines");
        assert_eq!(
            mock.requests(),
            vec![("sys".into(), "a".into()), ("sys".into(), "b".into())]
        );

        let empty = dir.path().join("empty.txt");
        fs::write(&empty, "").unwrap();
        let mock = MockBackend::from_fixture(&empty).unwrap();
        assert!(matches!(
            mock.complete("s", "u"),
            Err(BackendError::ScriptExhausted { call: 1 })
        ));

        assert!(matches!(
            MockBackend::from_fixture(&dir.path().join("missing.txt")),
            Err(BackendError::Fixture { .. })
        ));
    }

    #[test]
    fn config_validation() {
        assert!(BackendConfig::default().validate().is_ok());
        let zero = BackendConfig {
            max_new_tokens: 0,
            ..Default::default()
        };
        assert!(zero.validate().is_err());
        let no_timeout = BackendConfig {
            timeout: Duration::ZERO,
            ..Default::default()
        };
        assert!(HttpBackend::new(no_timeout).is_err());
    }

    #[test]
    fn completion_parsing() {
        let ok = json!({"choices": [{"message": {"content": "Hi."}, "finish_reason": "stop"}],
                        "usage": {"prompt_tokens": 12, "completion_tokens": 2}});
        let c = parse_completion(&ok, 96).unwrap();
        assert_eq!(
            (c.text.as_str(), c.finish_reason, c.usage_prompt_tokens),
            ("Hi.", FinishReason::Stop, 12)
        );

        let cut = json!({"choices": [{"message": {"content": "long"}, "finish_reason": "length"}]});
        let c = parse_completion(&cut, 96).unwrap();
        assert_eq!(c.finish_reason, FinishReason::Length);
        assert!(c.usage_completion_tokens >= 96);

        assert!(parse_completion(&json!({"choices": []}), 96).is_err());
    }

    #[test]
    fn retryable_classes() {
        let http = |status| BackendError::Http {
            endpoint: "e".into(),
            status,
            body: String::new(),
        };
        assert!(http(503).is_retryable());
        assert!(http(429).is_retryable());
        assert!(!http(400).is_retryable());
        assert!(!BackendError::ScriptExhausted { call: 1 }.is_retryable());
    }

    proptest! {
        #[test]
        fn fixture_escaping_round_trips(text in "[a-z\\\\\n n]{0,30}") {
            prop_assert_eq!(unescape_line(&escape_line(&text)), text);
        }
    }
}

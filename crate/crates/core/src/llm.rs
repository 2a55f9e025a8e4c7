//! Provider-agnostic chat-completion client.
//!
//! One live HTTP backend speaking the ubiquitous chat-completion shape
//! (messages array in, choices text out), plus a deterministic scripted
//! backend for tests, offline runs, and transcript replay. Simulation code
//! never branches on which backend is in use.

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use std::collections::{HashMap, VecDeque};
use std::io::Write;
use std::sync::Mutex;
use std::time::{Duration, Instant};
use thiserror::Error;

#[derive(Debug, Error)]
pub enum LlmError {
    #[error("retries exhausted after {attempts} attempts (exchange {exchange_id}): {last_error}")]
    Exhausted {
        attempts: u32,
        exchange_id: u64,
        last_error: String,
    },
    #[error("authentication failed (exchange {exchange_id}): {message}")]
    AuthFailure { exchange_id: u64, message: String },
    #[error("request timed out (exchange {exchange_id})")]
    Timeout { exchange_id: u64 },
    #[error("scripted backend exhausted (exchange {exchange_id})")]
    ScriptExhausted { exchange_id: u64 },
    #[error("io: {0}")]
    Io(#[from] std::io::Error),
}

/// Model and transport settings. The credential is an environment-variable
/// name; the secret itself is never stored or serialized.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub endpoint: String,
    pub model: String,
    #[serde(default = "default_temperature")]
    pub temperature: f64,
    #[serde(default = "default_max_tokens")]
    pub max_tokens: u32,
    #[serde(default = "default_timeout_secs")]
    pub timeout_secs: u64,
    #[serde(default = "default_max_retries")]
    pub max_retries: u32,
    #[serde(default = "default_credential_env")]
    pub credential_env: String,
    #[serde(default)]
    pub requests_per_minute: Option<u32>,
}

fn default_temperature() -> f64 {
    1.0
}
fn default_max_tokens() -> u32 {
    1024
}
fn default_timeout_secs() -> u64 {
    60
}
fn default_max_retries() -> u32 {
    3
}
fn default_credential_env() -> String {
    "LLM_API_KEY".to_string()
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig {
            endpoint: "http://localhost:8000/v1/chat/completions".into(),
            model: "scripted".into(),
            temperature: default_temperature(),
            max_tokens: default_max_tokens(),
            timeout_secs: default_timeout_secs(),
            max_retries: default_max_retries(),
            credential_env: default_credential_env(),
            requests_per_minute: None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ChatRequest {
    pub system: Option<String>,
    pub user: String,
}

/// One logged attempt, persisted exactly as sent/received. Scripted
/// backends leave latency and timestamp unset so transcripts stay
/// bit-reproducible.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ChatExchange {
    pub id: u64,
    pub attempt: u32,
    pub request: ChatRequest,
    pub response: Option<String>,
    pub error: Option<String>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub latency_ms: Option<u64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub timestamp_ms: Option<u64>,
}

#[derive(Debug, Clone)]
pub enum BackendError {
    Transport(String),
    RateLimited,
    Timeout,
    Auth(String),
    ScriptExhausted,
}

impl std::fmt::Display for BackendError {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            BackendError::Transport(m) => write!(f, "transport: {m}"),
            BackendError::RateLimited => write!(f, "rate limited"),
            BackendError::Timeout => write!(f, "timeout"),
            BackendError::Auth(m) => write!(f, "auth: {m}"),
            BackendError::ScriptExhausted => write!(f, "script exhausted"),
        }
    }
}

pub trait ChatBackend: Send + Sync {
    fn send(&self, request: &ChatRequest) -> Result<String, BackendError>;
    /// Whether wall-clock metadata should be recorded for this backend.
    fn records_timing(&self) -> bool {
        true
    }
}

fn prompt_key(prompt: &str) -> String {
    let mut hasher = Sha256::new();
    hasher.update(prompt.as_bytes());
    format!("{:x}", hasher.finalize())
}

enum ScriptMode {
    Ordered { queue: VecDeque<String>, cycle: Vec<String> },
    Keyed(HashMap<String, String>),
}

/// Deterministic replay backend.
pub struct ScriptedBackend {
    mode: Mutex<ScriptMode>,
}

impl ScriptedBackend {
    /// Replay responses in order; errors when the script runs out.
    pub fn ordered(responses: Vec<String>) -> Self {
        ScriptedBackend {
            mode: Mutex::new(ScriptMode::Ordered {
                queue: responses.into(),
                cycle: Vec::new(),
            }),
        }
    }

    /// Replay responses in order, restarting from the top when exhausted.
    pub fn cycling(responses: Vec<String>) -> Self {
        assert!(!responses.is_empty());
        ScriptedBackend {
            mode: Mutex::new(ScriptMode::Ordered {
                queue: responses.clone().into(),
                cycle: responses,
            }),
        }
    }

    /// Match responses on a stable hash of the prompt, so identical prompts
    /// always get identical responses.
    pub fn keyed(entries: impl IntoIterator<Item = (String, String)>) -> Self {
        ScriptedBackend {
            mode: Mutex::new(ScriptMode::Keyed(
                entries
                    .into_iter()
                    .map(|(prompt, response)| (prompt_key(&prompt), response))
                    .collect(),
            )),
        }
    }

    /// Keyed backend built from previously recorded exchanges.
    pub fn from_transcript(exchanges: &[ChatExchange]) -> Self {
        ScriptedBackend::keyed(exchanges.iter().filter_map(|e| {
            e.response
                .as_ref()
                .map(|r| (e.request.user.clone(), r.clone()))
        }))
    }
}

impl ChatBackend for ScriptedBackend {
    fn send(&self, request: &ChatRequest) -> Result<String, BackendError> {
        let mut mode = self.mode.lock().unwrap();
        match &mut *mode {
            ScriptMode::Ordered { queue, cycle } => {
                if queue.is_empty() && !cycle.is_empty() {
                    *queue = cycle.clone().into();
                }
                queue.pop_front().ok_or(BackendError::ScriptExhausted)
            }
            ScriptMode::Keyed(map) => map
                .get(&prompt_key(&request.user))
                .cloned()
                .ok_or(BackendError::ScriptExhausted),
        }
    }

    fn records_timing(&self) -> bool {
        false
    }
}

/// Backend that fails a fixed number of times before succeeding; test aid
/// for the retry contract.
pub struct FlakyBackend {
    failures_remaining: Mutex<u32>,
    response: String,
}

impl FlakyBackend {
    pub fn new(failures: u32, response: impl Into<String>) -> Self {
        FlakyBackend {
            failures_remaining: Mutex::new(failures),
            response: response.into(),
        }
    }
}

impl ChatBackend for FlakyBackend {
    fn send(&self, _request: &ChatRequest) -> Result<String, BackendError> {
        let mut left = self.failures_remaining.lock().unwrap();
        if *left > 0 {
            *left -= 1;
            Err(BackendError::Transport("injected failure".into()))
        } else {
            Ok(self.response.clone())
        }
    }

    fn records_timing(&self) -> bool {
        false
    }
}

/// HTTP backend for any provider speaking the chat-completion wire shape.
pub struct HttpBackend {
    client: reqwest::blocking::Client,
    config: ModelConfig,
    api_key: Option<String>,
}

impl HttpBackend {
    pub fn new(config: ModelConfig) -> Self {
        let client = reqwest::blocking::Client::builder()
            .timeout(Duration::from_secs(config.timeout_secs))
            .build()
            .expect("reqwest client");
        let api_key = std::env::var(&config.credential_env).ok();
        HttpBackend {
            client,
            config,
            api_key,
        }
    }
}

impl ChatBackend for HttpBackend {
    fn send(&self, request: &ChatRequest) -> Result<String, BackendError> {
        let mut messages = Vec::new();
        if let Some(system) = &request.system {
            messages.push(serde_json::json!({"role": "system", "content": system}));
        }
        messages.push(serde_json::json!({"role": "user", "content": request.user}));
        let body = serde_json::json!({
            "model": self.config.model,
            "messages": messages,
            "temperature": self.config.temperature,
            "max_tokens": self.config.max_tokens,
        });
        let mut req = self.client.post(&self.config.endpoint).json(&body);
        if let Some(key) = &self.api_key {
            req = req.bearer_auth(key);
        }
        let resp = req.send().map_err(|e| {
            if e.is_timeout() {
                BackendError::Timeout
            } else {
                BackendError::Transport(e.to_string())
            }
        })?;
        match resp.status().as_u16() {
            401 | 403 => return Err(BackendError::Auth(format!("status {}", resp.status()))),
            429 => return Err(BackendError::RateLimited),
            s if s >= 400 => {
                return Err(BackendError::Transport(format!("status {s}")));
            }
            _ => {}
        }
        let json: serde_json::Value = resp
            .json()
            .map_err(|e| BackendError::Transport(e.to_string()))?;
        json["choices"][0]["message"]["content"]
            .as_str()
            .map(str::to_string)
            .ok_or_else(|| BackendError::Transport("malformed completion response".into()))
    }
}

/// Token-bucket limiter, shared across concurrent callers.
struct RateLimiter {
    capacity: f64,
    refill_per_sec: f64,
    state: Mutex<(f64, Instant)>,
}

impl RateLimiter {
    fn new(requests_per_minute: u32) -> Self {
        let capacity = requests_per_minute as f64;
        RateLimiter {
            capacity,
            refill_per_sec: capacity / 60.0,
            state: Mutex::new((capacity, Instant::now())),
        }
    }

    fn acquire(&self) {
        loop {
            let wait = {
                let mut state = self.state.lock().unwrap();
                let now = Instant::now();
                let elapsed = now.duration_since(state.1).as_secs_f64();
                state.0 = (state.0 + elapsed * self.refill_per_sec).min(self.capacity);
                state.1 = now;
                if state.0 >= 1.0 {
                    state.0 -= 1.0;
                    return;
                }
                Duration::from_secs_f64((1.0 - state.0) / self.refill_per_sec)
            };
            std::thread::sleep(wait);
        }
    }
}

/// Chat client with retries, optional rate limiting, and a full append-only
/// transcript of every attempt.
pub struct LlmClient {
    backend: Box<dyn ChatBackend>,
    max_retries: u32,
    base_backoff: Duration,
    limiter: Option<RateLimiter>,
    transcript: Mutex<Vec<ChatExchange>>,
    next_id: Mutex<u64>,
}

impl LlmClient {
    pub fn new(backend: Box<dyn ChatBackend>, config: &ModelConfig) -> Self {
        LlmClient {
            backend,
            max_retries: config.max_retries,
            base_backoff: Duration::from_millis(500),
            limiter: config.requests_per_minute.map(RateLimiter::new),
            transcript: Mutex::new(Vec::new()),
            next_id: Mutex::new(0),
        }
    }

    pub fn scripted(backend: ScriptedBackend, max_retries: u32) -> Self {
        LlmClient {
            backend: Box::new(backend),
            max_retries,
            base_backoff: Duration::ZERO,
            transcript: Mutex::new(Vec::new()),
            limiter: None,
            next_id: Mutex::new(0),
        }
    }

    pub fn with_base_backoff(mut self, backoff: Duration) -> Self {
        self.base_backoff = backoff;
        self
    }

    fn log(&self, exchange: ChatExchange) {
        self.transcript.lock().unwrap().push(exchange);
    }

    /// Send one prompt, retrying transient failures with exponential
    /// backoff. Every attempt, including failures, is logged.
    pub fn complete(&self, system: Option<&str>, prompt: &str) -> Result<String, LlmError> {
        let request = ChatRequest {
            system: system.map(str::to_string),
            user: prompt.to_string(),
        };
        let attempts = self.max_retries.max(1);
        let mut last_error = String::from("no attempts made");
        let mut last_id = 0;
        for attempt in 1..=attempts {
            if let Some(limiter) = &self.limiter {
                limiter.acquire();
            }
            let id = {
                let mut next = self.next_id.lock().unwrap();
                *next += 1;
                *next
            };
            last_id = id;
            let timing = self.backend.records_timing();
            let started = Instant::now();
            let result = self.backend.send(&request);
            let latency = started.elapsed();
            let (response, error) = match &result {
                Ok(text) => (Some(text.clone()), None),
                Err(e) => (None, Some(e.to_string())),
            };
            self.log(ChatExchange {
                id,
                attempt,
                request: request.clone(),
                response,
                error,
                latency_ms: timing.then(|| latency.as_millis() as u64),
                timestamp_ms: timing.then(|| {
                    std::time::SystemTime::now()
                        .duration_since(std::time::UNIX_EPOCH)
                        .unwrap()
                        .as_millis() as u64
                }),
            });
            match result {
                Ok(text) => return Ok(text),
                Err(BackendError::Auth(message)) => {
                    return Err(LlmError::AuthFailure {
                        exchange_id: id,
                        message,
                    });
                }
                Err(BackendError::ScriptExhausted) => {
                    return Err(LlmError::ScriptExhausted { exchange_id: id });
                }
                Err(err) => {
                    last_error = err.to_string();
                    if attempt < attempts && !self.base_backoff.is_zero() {
                        std::thread::sleep(self.base_backoff * 2u32.pow(attempt - 1));
                    }
                }
            }
        }
        Err(LlmError::Exhausted {
            attempts,
            exchange_id: last_id,
            last_error,
        })
    }

    pub fn transcript(&self) -> Vec<ChatExchange> {
        self.transcript.lock().unwrap().clone()
    }

    /// Write the transcript as JSON lines.
    pub fn write_transcript(&self, mut writer: impl Write) -> Result<(), LlmError> {
        for exchange in self.transcript.lock().unwrap().iter() {
            serde_json::to_writer(&mut writer, exchange).map_err(std::io::Error::other)?;
            writeln!(writer)?;
        }
        Ok(())
    }
}

/// Parse a JSON-lines transcript back into exchanges.
pub fn read_transcript(text: &str) -> Result<Vec<ChatExchange>, serde_json::Error> {
    text.lines()
        .filter(|l| !l.trim().is_empty())
        .map(serde_json::from_str)
        .collect()
}

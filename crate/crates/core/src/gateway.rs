//! Transport to the vision-language model.
//!
//! [`HttpGateway`] speaks the OpenAI-compatible chat-completions protocol;
//! [`ReplayGateway`] answers from a directory of recorded fixtures keyed by
//! request digest, which keeps tests free of GPUs and network.

use std::fmt;
use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};
use std::time::{Duration, Instant};

use base64::Engine;
use serde::{Deserialize, Serialize};
use serde_json::{json, Value};
use sha2::{Digest, Sha256};
use thiserror::Error;

use crate::dataset::ImageData;
use crate::prompt::PromptText;

pub const ENDPOINT_ENV: &str = "MEMESHIELD_ENDPOINT";
pub const API_KEY_ENV: &str = "MEMESHIELD_API_KEY";

#[derive(Debug, Error)]
pub enum GatewayError {
    #[error("backend unavailable after {attempts} attempts: {last_error}")]
    BackendUnavailable { attempts: u32, last_error: String },
    #[error("request rejected with HTTP {status}: {body}")]
    RequestRejected { status: u16, body: String },
    #[error("model returned an empty completion")]
    EmptyResponse,
    #[error("no fixture recorded for request {0}")]
    FixtureMissing(RequestDigest),
    #[error("fixture store error: {0}")]
    StorageError(String),
    #[error("invalid request: {0}")]
    InvalidRequest(String),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct InferenceConfig {
    pub temperature: f64,
    pub top_p: f64,
    pub max_output_tokens: u32,
    pub model_id: String,
    pub timeout_secs: u64,
    pub retries: u32,
}

impl Default for InferenceConfig {
    fn default() -> Self {
        Self {
            temperature: 0.7,
            top_p: 1.0,
            max_output_tokens: 512,
            model_id: "llava-llama-2-13b".to_string(),
            timeout_secs: 120,
            retries: 3,
        }
    }
}

impl InferenceConfig {
    pub fn validate(&self) -> Result<(), GatewayError> {
        let bad = |m: &str| Err(GatewayError::InvalidRequest(m.to_string()));
        if !self.temperature.is_finite() || self.temperature < 0.0 {
            return bad("temperature must be a finite value >= 0");
        }
        if !(self.top_p > 0.0 && self.top_p <= 1.0) {
            return bad("top_p must lie in (0, 1]");
        }
        if self.max_output_tokens == 0 {
            return bad("max_output_tokens must be positive");
        }
        if self.model_id.is_empty() {
            return bad("model_id must not be empty");
        }
        Ok(())
    }
}

/// Content hash of everything that determines a model reply.
#[derive(Debug, Clone, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(transparent)]
pub struct RequestDigest(String);

impl RequestDigest {
    pub fn compute(prompt: &PromptText, image: &ImageData, config: &InferenceConfig, trial_index: u32) -> Self {
        // Every variable-length field is length-prefixed so distinct inputs
        // cannot collide by concatenation.
        fn field(h: &mut Sha256, bytes: &[u8]) {
            h.update((bytes.len() as u64).to_le_bytes());
            h.update(bytes);
        }
        let mut h = Sha256::new();
        field(&mut h, b"memeshield-request-v1");
        field(&mut h, prompt.system.as_bytes());
        field(&mut h, prompt.user.as_bytes());
        field(&mut h, image.mime.as_bytes());
        field(&mut h, &image.bytes);
        h.update(config.temperature.to_bits().to_le_bytes());
        h.update(config.top_p.to_bits().to_le_bytes());
        h.update(config.max_output_tokens.to_le_bytes());
        field(&mut h, config.model_id.as_bytes());
        h.update(trial_index.to_le_bytes());
        RequestDigest(hex::encode(h.finalize()))
    }

    pub fn as_str(&self) -> &str {
        &self.0
    }

    fn is_well_formed(s: &str) -> bool {
        s.len() == 64 && s.bytes().all(|b| b.is_ascii_hexdigit())
    }
}

impl fmt::Display for RequestDigest {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.0)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum BackendKind {
    Http,
    Replay,
}

impl std::str::FromStr for BackendKind {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "http" => Ok(BackendKind::Http),
            "replay" => Ok(BackendKind::Replay),
            other => Err(format!("unknown backend {other:?}")),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ChatExchange {
    pub request_digest: RequestDigest,
    /// Verbatim model output.
    pub response_text: String,
    pub latency_secs: f64,
    pub backend: BackendKind,
}

/// One chat request: prompt, image, sampling config and the trial it serves.
#[derive(Debug, Clone, Copy)]
pub struct ChatRequest<'a> {
    pub prompt: &'a PromptText,
    pub image: &'a ImageData,
    pub config: &'a InferenceConfig,
    pub trial_index: u32,
}

impl ChatRequest<'_> {
    pub fn digest(&self) -> RequestDigest {
        RequestDigest::compute(self.prompt, self.image, self.config, self.trial_index)
    }

    fn check(&self) -> Result<(), GatewayError> {
        if self.image.bytes.is_empty() {
            return Err(GatewayError::InvalidRequest("image is empty".into()));
        }
        self.config.validate()
    }
}

pub trait VisionGateway: Send + Sync {
    fn complete(&self, request: ChatRequest<'_>) -> Result<ChatExchange, GatewayError>;

    fn kind(&self) -> BackendKind;
}

/// Directory of `<digest>.txt` files holding verbatim UTF-8 responses.
#[derive(Debug, Clone)]
pub struct FixtureStore {
    dir: PathBuf,
}

impl FixtureStore {
    pub fn new(dir: impl Into<PathBuf>) -> Self {
        Self { dir: dir.into() }
    }

    pub fn dir(&self) -> &Path {
        &self.dir
    }

    pub fn path_for(&self, digest: &RequestDigest) -> PathBuf {
        self.dir.join(format!("{digest}.txt"))
    }

    pub fn contains(&self, digest: &RequestDigest) -> bool {
        self.path_for(digest).is_file()
    }

    pub fn lookup(&self, digest: &RequestDigest) -> Result<String, GatewayError> {
        match fs::read(self.path_for(digest)) {
            Ok(bytes) => String::from_utf8(bytes)
                .map_err(|e| GatewayError::StorageError(format!("fixture {digest} is not UTF-8: {e}"))),
            Err(e) if e.kind() == std::io::ErrorKind::NotFound => Err(GatewayError::FixtureMissing(digest.clone())),
            Err(e) => Err(GatewayError::StorageError(e.to_string())),
        }
    }

    /// Writes a fixture atomically (temp file then rename).
    pub fn put(&self, digest: &RequestDigest, response_text: &str) -> Result<(), GatewayError> {
        let storage = |e: std::io::Error| GatewayError::StorageError(e.to_string());
        fs::create_dir_all(&self.dir).map_err(storage)?;
        let tmp = self
            .dir
            .join(format!(".{digest}.{}.tmp", std::process::id()));
        {
            let mut f = fs::File::create(&tmp).map_err(storage)?;
            f.write_all(response_text.as_bytes()).map_err(storage)?;
            f.sync_all().map_err(storage)?;
        }
        fs::rename(&tmp, self.path_for(digest)).map_err(storage)
    }

    /// All digests present in the store, sorted.
    pub fn digests(&self) -> Result<Vec<RequestDigest>, GatewayError> {
        let entries = match fs::read_dir(&self.dir) {
            Ok(e) => e,
            Err(e) if e.kind() == std::io::ErrorKind::NotFound => return Ok(Vec::new()),
            Err(e) => return Err(GatewayError::StorageError(e.to_string())),
        };
        let mut out = Vec::new();
        for entry in entries {
            let entry = entry.map_err(|e| GatewayError::StorageError(e.to_string()))?;
            let name = entry.file_name();
            let name = name.to_string_lossy();
            if let Some(stem) = name.strip_suffix(".txt") {
                if RequestDigest::is_well_formed(stem) {
                    out.push(RequestDigest(stem.to_string()));
                }
            }
        }
        out.sort();
        Ok(out)
    }
}

/// Persists an exchange obtained from the live backend.
pub fn record_fixture(exchange: &ChatExchange, store: &FixtureStore) -> Result<(), GatewayError> {
    if exchange.backend != BackendKind::Http {
        return Err(GatewayError::StorageError(
            "only exchanges from the http backend can be recorded".into(),
        ));
    }
    store.put(&exchange.request_digest, &exchange.response_text)
}

pub struct ReplayGateway {
    store: FixtureStore,
}

impl ReplayGateway {
    pub fn new(store: FixtureStore) -> Self {
        Self { store }
    }
}

impl VisionGateway for ReplayGateway {
    fn complete(&self, request: ChatRequest<'_>) -> Result<ChatExchange, GatewayError> {
        request.check()?;
        let started = Instant::now();
        let digest = request.digest();
        let response_text = self.store.lookup(&digest)?;
        if response_text.trim().is_empty() {
            return Err(GatewayError::EmptyResponse);
        }
        Ok(ChatExchange {
            request_digest: digest,
            response_text,
            latency_secs: started.elapsed().as_secs_f64(),
            backend: BackendKind::Replay,
        })
    }

    fn kind(&self) -> BackendKind {
        BackendKind::Replay
    }
}

pub struct HttpGateway {
    endpoint: String,
    api_key: Option<String>,
    client: reqwest::blocking::Client,
    backoff_base: Duration,
    recorder: Option<FixtureStore>,
}

enum AttemptError {
    Transient(String),
    Fatal(GatewayError),
}

impl HttpGateway {
    pub fn new(endpoint: impl Into<String>, api_key: Option<String>, timeout: Duration) -> Result<Self, GatewayError> {
        let client = reqwest::blocking::Client::builder()
            .timeout(timeout)
            .build()
            .map_err(|e| GatewayError::InvalidRequest(e.to_string()))?;
        Ok(Self {
            endpoint: endpoint.into().trim_end_matches('/').to_string(),
            api_key,
            client,
            backoff_base: Duration::from_millis(500),
            recorder: None,
        })
    }

    /// Reads `MEMESHIELD_ENDPOINT` / `MEMESHIELD_API_KEY`, letting an explicit
    /// endpoint override the environment.
    pub fn from_env(endpoint: Option<String>, timeout: Duration) -> Result<Self, GatewayError> {
        let endpoint = endpoint
            .or_else(|| std::env::var(ENDPOINT_ENV).ok())
            .ok_or_else(|| GatewayError::InvalidRequest(format!("no endpoint given and {ENDPOINT_ENV} unset")))?;
        let api_key = std::env::var(API_KEY_ENV).ok().filter(|k| !k.is_empty());
        Self::new(endpoint, api_key, timeout)
    }

    pub fn with_backoff_base(mut self, base: Duration) -> Self {
        self.backoff_base = base;
        self
    }

    /// Record every successful exchange into `store`.
    pub fn recording_into(mut self, store: FixtureStore) -> Self {
        self.recorder = Some(store);
        self
    }

    pub fn url(&self) -> String {
        format!("{}/v1/chat/completions", self.endpoint)
    }

    fn attempt(&self, body: &Value) -> Result<String, AttemptError> {
        let mut req = self.client.post(self.url()).json(body);
        if let Some(key) = &self.api_key {
            req = req.bearer_auth(key);
        }
        let resp = req.send().map_err(|e| AttemptError::Transient(e.to_string()))?;
        let status = resp.status();
        let text = resp.text().map_err(|e| AttemptError::Transient(e.to_string()))?;
        if status.is_server_error() || status.as_u16() == 429 || status.as_u16() == 408 {
            return Err(AttemptError::Transient(format!("HTTP {status}: {text}")));
        }
        if status.is_client_error() {
            return Err(AttemptError::Fatal(GatewayError::RequestRejected {
                status: status.as_u16(),
                body: text,
            }));
        }
        let parsed: Value = serde_json::from_str(&text)
            .map_err(|e| AttemptError::Transient(format!("malformed response body: {e}")))?;
        Ok(extract_first_choice(&parsed).unwrap_or_default())
    }
}

pub fn chat_request_body(request: ChatRequest<'_>) -> Value {
    let encoded = base64::engine::general_purpose::STANDARD.encode(&request.image.bytes);
    json!({
        "model": request.config.model_id,
        "temperature": request.config.temperature,
        "top_p": request.config.top_p,
        "max_tokens": request.config.max_output_tokens,
        "messages": [
            { "role": "system", "content": request.prompt.system },
            {
                "role": "user",
                "content": [
                    { "type": "text", "text": request.prompt.user },
                    {
                        "type": "image_url",
                        "image_url": { "url": format!("data:{};base64,{encoded}", request.image.mime) }
                    }
                ]
            }
        ]
    })
}

fn extract_first_choice(body: &Value) -> Option<String> {
    let content = &body["choices"][0]["message"]["content"];
    match content {
        Value::String(s) => Some(s.clone()),
        // Some servers return content parts even for assistant replies.
        Value::Array(parts) => Some(
            parts
                .iter()
                .filter_map(|p| p["text"].as_str())
                .collect::<Vec<_>>()
                .join(""),
        ),
        _ => None,
    }
}

impl VisionGateway for HttpGateway {
    fn complete(&self, request: ChatRequest<'_>) -> Result<ChatExchange, GatewayError> {
        request.check()?;
        let body = chat_request_body(request);
        let digest = request.digest();
        let started = Instant::now();
        let max_attempts = request.config.retries + 1;
        let mut last_error = String::new();
        for attempt in 0..max_attempts {
            if attempt > 0 {
                std::thread::sleep(self.backoff_base * 2u32.saturating_pow(attempt - 1));
            }
            match self.attempt(&body) {
                Ok(text) if text.trim().is_empty() => return Err(GatewayError::EmptyResponse),
                Ok(text) => {
                    let exchange = ChatExchange {
                        request_digest: digest,
                        response_text: text,
                        latency_secs: started.elapsed().as_secs_f64(),
                        backend: BackendKind::Http,
                    };
                    if let Some(store) = &self.recorder {
                        record_fixture(&exchange, store)?;
                    }
                    return Ok(exchange);
                }
                Err(AttemptError::Fatal(e)) => return Err(e),
                Err(AttemptError::Transient(msg)) => {
                    log::warn!("attempt {}/{max_attempts} failed: {msg}", attempt + 1);
                    last_error = msg;
                }
            }
        }
        Err(GatewayError::BackendUnavailable {
            attempts: max_attempts,
            last_error,
        })
    }

    fn kind(&self) -> BackendKind {
        BackendKind::Http
    }
}

//! Chat-completion client with retries, bounded concurrency and an on-disk
//! response cache.
//!
//! The HTTP layer sits behind [`ChatTransport`] so the retry loop can be
//! driven by the scripted transports in [`mock`].

use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};
use std::sync::{Condvar, Mutex};
use std::thread;
use std::time::Duration;

use serde::{Deserialize, Serialize};
use serde_json::Value;
use sha2::{Digest, Sha256};
use thiserror::Error;
use tracing::{debug, warn};

use crate::prompt::{ChatMessage, PromptBundle};
use crate::retry::{classify_status, AttemptClass, RetryPolicy};

pub const MAX_RETRIES_LIMIT: u32 = 10;

#[derive(Debug, Error)]
pub enum LlmError {
    #[error("LLM service unavailable after {attempts} attempt(s): {reason}")]
    LlmUnavailable { attempts: u32, reason: String },
    #[error("LLM service rejected the request with status {status} (attempt {attempts}): {body}")]
    LlmRejected {
        status: u16,
        body: String,
        attempts: u32,
    },
    #[error("LLM request timed out after {attempts} attempt(s)")]
    Timeout { attempts: u32 },
    #[error("malformed completion response: {0}")]
    MalformedResponse(String),
    #[error("invalid LLM endpoint: {0}")]
    InvalidEndpoint(String),
    #[error("response cache error at {path}: {source}")]
    Cache {
        path: String,
        #[source]
        source: std::io::Error,
    },
}

#[derive(Debug, Clone, PartialEq)]
pub struct LlmEndpoint {
    pub base_url: String,
    pub model_name: String,
    pub temperature: f64,
    pub max_output_tokens: u32,
    pub timeout: Duration,
    pub max_retries: u32,
    pub backoff_base: Duration,
    pub max_concurrency: usize,
    pub auth_token: Option<String>,
}

impl Default for LlmEndpoint {
    fn default() -> Self {
        Self {
            base_url: "https://api.openai.com/v1".into(),
            model_name: "gpt-4-turbo".into(),
            temperature: 0.0,
            max_output_tokens: 4096,
            timeout: Duration::from_secs(120),
            max_retries: 3,
            backoff_base: Duration::from_millis(500),
            max_concurrency: 4,
            auth_token: None,
        }
    }
}

impl LlmEndpoint {
    pub fn validate(&self) -> Result<(), LlmError> {
        let bad = |m: &str| Err(LlmError::InvalidEndpoint(m.to_string()));
        if !self.temperature.is_finite() || self.temperature < 0.0 {
            return bad("temperature must be finite and >= 0");
        }
        if self.max_retries > MAX_RETRIES_LIMIT {
            return bad("max_retries must be <= 10");
        }
        if self.max_concurrency == 0 {
            return bad("max_concurrency must be >= 1");
        }
        if self.max_output_tokens == 0 {
            return bad("max_output_tokens must be >= 1");
        }
        if self.model_name.trim().is_empty() {
            return bad("model_name is empty");
        }
        Ok(())
    }

    fn retry_policy(&self) -> RetryPolicy {
        RetryPolicy {
            max_retries: self.max_retries,
            backoff_base: self.backoff_base,
        }
    }
}

/// Chat-completions request body.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ChatRequest {
    pub model: String,
    pub temperature: f64,
    pub max_tokens: u32,
    pub messages: Vec<ChatMessage>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct Usage {
    pub prompt_tokens: u64,
    pub completion_tokens: u64,
    pub total_tokens: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LlmResponse {
    pub text: String,
    pub request_id: String,
    pub attempt_count: u32,
    #[serde(default)]
    pub usage: Option<Usage>,
    /// RFC 3339 time the completion was received from the service.
    pub received_at: String,
    #[serde(default, skip_serializing)]
    pub cached: bool,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct HttpReply {
    pub status: u16,
    pub body: String,
}

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum TransportError {
    #[error("timed out: {0}")]
    Timeout(String),
    #[error("connection failed: {0}")]
    Connection(String),
}

pub trait ChatTransport: Send + Sync {
    fn post(&self, request: &ChatRequest) -> Result<HttpReply, TransportError>;
}

/// `POST {base_url}/chat/completions` with optional bearer auth.
pub struct HttpTransport {
    client: reqwest::blocking::Client,
    url: String,
    token: Option<String>,
}

impl HttpTransport {
    pub fn new(endpoint: &LlmEndpoint) -> Result<Self, LlmError> {
        let client = reqwest::blocking::Client::builder()
            .timeout(endpoint.timeout)
            .build()
            .map_err(|e| LlmError::InvalidEndpoint(e.to_string()))?;
        Ok(Self {
            client,
            url: format!(
                "{}/chat/completions",
                endpoint.base_url.trim_end_matches('/')
            ),
            token: endpoint.auth_token.clone(),
        })
    }
}

impl ChatTransport for HttpTransport {
    fn post(&self, request: &ChatRequest) -> Result<HttpReply, TransportError> {
        let mut builder = self.client.post(&self.url).json(request);
        if let Some(token) = &self.token {
            builder = builder.bearer_auth(token);
        }
        let resp = builder.send().map_err(|e| {
            if e.is_timeout() {
                TransportError::Timeout(e.to_string())
            } else {
                TransportError::Connection(e.to_string())
            }
        })?;
        let status = resp.status().as_u16();
        let body = resp
            .text()
            .map_err(|e| TransportError::Connection(e.to_string()))?;
        Ok(HttpReply { status, body })
    }
}

/// Counting semaphore bounding in-flight requests.
struct Gate {
    limit: usize,
    live: Mutex<usize>,
    freed: Condvar,
}

struct Permit<'a>(&'a Gate);

impl Gate {
    fn new(limit: usize) -> Self {
        Self {
            limit,
            live: Mutex::new(0),
            freed: Condvar::new(),
        }
    }

    fn acquire(&self) -> Permit<'_> {
        let mut live = self.live.lock().expect("gate lock");
        while *live >= self.limit {
            live = self.freed.wait(live).expect("gate lock");
        }
        *live += 1;
        Permit(self)
    }
}

impl Drop for Permit<'_> {
    fn drop(&mut self) {
        *self.0.live.lock().expect("gate lock") -= 1;
        self.0.freed.notify_one();
    }
}

/// Directory of `<sha256>.json` files holding serialized [`LlmResponse`]s.
#[derive(Debug, Clone)]
pub struct ResponseCache {
    dir: PathBuf,
}

impl ResponseCache {
    pub fn open(dir: impl Into<PathBuf>) -> Result<Self, LlmError> {
        let dir = dir.into();
        fs::create_dir_all(&dir).map_err(|source| LlmError::Cache {
            path: dir.display().to_string(),
            source,
        })?;
        Ok(Self { dir })
    }

    fn path(&self, key: &str) -> PathBuf {
        self.dir.join(format!("{key}.json"))
    }

    pub fn get(&self, key: &str) -> Option<LlmResponse> {
        let text = fs::read_to_string(self.path(key)).ok()?;
        match serde_json::from_str::<LlmResponse>(&text) {
            Ok(mut r) => {
                r.cached = true;
                Some(r)
            }
            Err(e) => {
                warn!(key, error = %e, "ignoring corrupt cache entry");
                None
            }
        }
    }

    /// Write-then-rename so concurrent readers never observe partial files.
    pub fn put(&self, key: &str, response: &LlmResponse) -> Result<(), LlmError> {
        let final_path = self.path(key);
        let tmp = self.dir.join(format!(
            "{key}.{}.{:?}.tmp",
            std::process::id(),
            thread::current().id()
        ));
        let io = |source| LlmError::Cache {
            path: final_path.display().to_string(),
            source,
        };
        let body = serde_json::to_string(response).expect("response serializes");
        let mut f = fs::File::create(&tmp).map_err(io)?;
        f.write_all(body.as_bytes()).map_err(io)?;
        f.sync_all().map_err(io)?;
        fs::rename(&tmp, &final_path).map_err(io)
    }

    pub fn dir(&self) -> &Path {
        &self.dir
    }
}

/// Hex SHA-256 over template checksum, rendered input, model and temperature.
pub fn cache_key(
    template_checksum: &str,
    input: &str,
    model_name: &str,
    temperature: f64,
) -> String {
    let mut h = Sha256::new();
    for part in [template_checksum, input, model_name] {
        h.update((part.len() as u64).to_le_bytes());
        h.update(part.as_bytes());
    }
    h.update(temperature.to_bits().to_le_bytes());
    h.finalize().iter().map(|b| format!("{b:02x}")).collect()
}

pub struct LlmClient {
    endpoint: LlmEndpoint,
    transport: Box<dyn ChatTransport>,
    gate: Gate,
    cache: Option<ResponseCache>,
}

impl LlmClient {
    pub fn new(endpoint: LlmEndpoint, transport: Box<dyn ChatTransport>) -> Result<Self, LlmError> {
        endpoint.validate()?;
        let gate = Gate::new(endpoint.max_concurrency);
        Ok(Self {
            endpoint,
            transport,
            gate,
            cache: None,
        })
    }

    pub fn http(endpoint: LlmEndpoint) -> Result<Self, LlmError> {
        let transport = HttpTransport::new(&endpoint)?;
        Self::new(endpoint, Box::new(transport))
    }

    pub fn with_cache(mut self, cache: ResponseCache) -> Self {
        self.cache = Some(cache);
        self
    }

    pub fn endpoint(&self) -> &LlmEndpoint {
        &self.endpoint
    }

    pub fn request_for(&self, bundle: &PromptBundle) -> ChatRequest {
        ChatRequest {
            model: self.endpoint.model_name.clone(),
            temperature: self.endpoint.temperature,
            max_tokens: self.endpoint.max_output_tokens,
            messages: bundle.messages.clone(),
        }
    }

    pub fn complete(&self, bundle: &PromptBundle) -> Result<LlmResponse, LlmError> {
        let key = cache_key(
            &bundle.template_checksum,
            &bundle.input,
            &self.endpoint.model_name,
            self.endpoint.temperature,
        );
        if let Some(hit) = self.cache.as_ref().and_then(|c| c.get(&key)) {
            debug!(key, "response cache hit");
            return Ok(hit);
        }
        let response = self.send_with_retry(&self.request_for(bundle))?;
        if let Some(cache) = &self.cache {
            cache.put(&key, &response)?;
        }
        Ok(response)
    }

    fn send_with_retry(&self, request: &ChatRequest) -> Result<LlmResponse, LlmError> {
        let policy = self.endpoint.retry_policy();
        let mut last_reason = String::new();
        let mut last_was_timeout = false;
        for attempt in 0..=policy.max_retries {
            let attempts = attempt + 1;
            let outcome = {
                let _permit = self.gate.acquire();
                self.transport.post(request)
            };
            match outcome {
                Ok(reply) => match classify_status(reply.status) {
                    AttemptClass::Success => {
                        let mut response = parse_completion(&reply.body)?;
                        response.attempt_count = attempts;
                        return Ok(response);
                    }
                    AttemptClass::Fatal => {
                        return Err(LlmError::LlmRejected {
                            status: reply.status,
                            body: reply.body,
                            attempts,
                        })
                    }
                    AttemptClass::Retryable => {
                        last_was_timeout = false;
                        last_reason = format!("status {}: {}", reply.status, reply.body);
                    }
                },
                Err(TransportError::Timeout(m)) => {
                    last_was_timeout = true;
                    last_reason = m;
                }
                Err(TransportError::Connection(m)) => {
                    last_was_timeout = false;
                    last_reason = m;
                }
            }
            if attempt < policy.max_retries {
                let delay = policy.backoff(attempt);
                warn!(attempt = attempts, delay_ms = delay.as_millis() as u64, reason = %last_reason, "retrying LLM request");
                thread::sleep(delay);
            }
        }
        let attempts = policy.max_retries + 1;
        if last_was_timeout {
            Err(LlmError::Timeout { attempts })
        } else {
            Err(LlmError::LlmUnavailable {
                attempts,
                reason: last_reason,
            })
        }
    }
}

/// Extracts the first choice's message content from a chat-completions body.
fn parse_completion(body: &str) -> Result<LlmResponse, LlmError> {
    let v: Value =
        serde_json::from_str(body).map_err(|e| LlmError::MalformedResponse(e.to_string()))?;
    let text = v
        .pointer("/choices/0/message/content")
        .and_then(Value::as_str)
        .ok_or_else(|| LlmError::MalformedResponse("missing choices[0].message.content".into()))?
        .to_string();
    let request_id = v
        .get("id")
        .and_then(Value::as_str)
        .unwrap_or_default()
        .to_string();
    let usage = v
        .get("usage")
        .and_then(|u| serde_json::from_value(u.clone()).ok());
    // service-reported creation time when available, local receipt time otherwise
    let created = v
        .get("created")
        .and_then(Value::as_i64)
        .and_then(|t| chrono::DateTime::from_timestamp(t, 0));
    let received_at = created.unwrap_or_else(chrono::Utc::now);
    Ok(LlmResponse {
        text,
        request_id,
        attempt_count: 1,
        usage,
        received_at: received_at.to_rfc3339_opts(chrono::SecondsFormat::Secs, true),
        cached: false,
    })
}

/// Offline transports.
pub mod mock {
    use std::sync::atomic::{AtomicUsize, Ordering};

    use super::*;
    use crate::domain::parse_entry_key;
    use crate::graph::extract_json_value;
    use crate::jsonfmt;

    /// A chat-completions response body wrapping `text`.
    pub fn completion_body(text: &str, request_id: &str) -> String {
        serde_json::json!({
            "id": request_id,
            "object": "chat.completion",
            "created": 0,
            "choices": [{"index": 0, "message": {"role": "assistant", "content": text}, "finish_reason": "stop"}],
            "usage": {"prompt_tokens": 0, "completion_tokens": 0, "total_tokens": 0},
        })
        .to_string()
    }

    fn request_digest(request: &ChatRequest) -> String {
        let body = serde_json::to_string(request).expect("request serializes");
        let d = Sha256::digest(body.as_bytes());
        format!(
            "mock-{}",
            d[..8]
                .iter()
                .map(|b| format!("{b:02x}"))
                .collect::<String>()
        )
    }

    /// Replies from a fixed script, repeating the last entry once exhausted.
    /// Tracks call count and peak concurrency.
    pub struct ScriptedTransport {
        script: Vec<Result<HttpReply, TransportError>>,
        calls: AtomicUsize,
        live: AtomicUsize,
        peak: AtomicUsize,
        delay: Duration,
    }

    impl ScriptedTransport {
        pub fn new(script: Vec<Result<HttpReply, TransportError>>) -> Self {
            assert!(!script.is_empty(), "script needs at least one reply");
            Self {
                script,
                calls: AtomicUsize::new(0),
                live: AtomicUsize::new(0),
                peak: AtomicUsize::new(0),
                delay: Duration::ZERO,
            }
        }

        /// Every call succeeds with `text` as the completion.
        pub fn always(text: &str) -> Self {
            Self::new(vec![Ok(HttpReply {
                status: 200,
                body: completion_body(text, "mock-fixed"),
            })])
        }

        pub fn status(status: u16) -> Result<HttpReply, TransportError> {
            Ok(HttpReply {
                status,
                body: format!("{{\"error\": \"status {status}\"}}"),
            })
        }

        pub fn ok(text: &str) -> Result<HttpReply, TransportError> {
            Ok(HttpReply {
                status: 200,
                body: completion_body(text, "mock-scripted"),
            })
        }

        pub fn with_delay(mut self, delay: Duration) -> Self {
            self.delay = delay;
            self
        }

        pub fn calls(&self) -> usize {
            self.calls.load(Ordering::SeqCst)
        }

        pub fn peak_concurrency(&self) -> usize {
            self.peak.load(Ordering::SeqCst)
        }
    }

    impl ChatTransport for ScriptedTransport {
        fn post(&self, _request: &ChatRequest) -> Result<HttpReply, TransportError> {
            let now = self.live.fetch_add(1, Ordering::SeqCst) + 1;
            self.peak.fetch_max(now, Ordering::SeqCst);
            let n = self.calls.fetch_add(1, Ordering::SeqCst);
            if !self.delay.is_zero() {
                thread::sleep(self.delay);
            }
            let reply = self.script[n.min(self.script.len() - 1)].clone();
            self.live.fetch_sub(1, Ordering::SeqCst);
            reply
        }
    }

    impl<T: ChatTransport + ?Sized> ChatTransport for std::sync::Arc<T> {
        fn post(&self, request: &ChatRequest) -> Result<HttpReply, TransportError> {
            (**self).post(request)
        }
    }

    /// Returns a fixed completion text for every request.
    pub struct FixedResponder {
        text: String,
    }

    impl FixedResponder {
        pub fn new(text: impl Into<String>) -> Self {
            Self { text: text.into() }
        }
    }

    impl ChatTransport for FixedResponder {
        fn post(&self, request: &ChatRequest) -> Result<HttpReply, TransportError> {
            Ok(HttpReply {
                status: 200,
                body: completion_body(&self.text, &request_digest(request)),
            })
        }
    }

    /// Derives a deterministic answer from the prompt itself: every union
    /// region listed in an image's captions yields `(first, "near", second)`.
    #[derive(Debug, Default)]
    pub struct PairwiseResponder;

    impl PairwiseResponder {
        pub fn respond(user_content: &str) -> String {
            let input = user_content
                .rfind("### Input:")
                .map(|i| &user_content[i..])
                .unwrap_or(user_content);
            let records = match extract_json_value(input) {
                Some(Value::Array(items)) => items,
                Some(v @ Value::Object(_)) => vec![v],
                _ => Vec::new(),
            };
            let graphs: Vec<Value> = records
                .iter()
                .map(|rec| {
                    let mut seen = std::collections::HashSet::new();
                    let mut rels = Vec::new();
                    let keys = rec.get("captions").and_then(Value::as_object);
                    for key in keys.into_iter().flat_map(|m| m.keys()) {
                        for (a, b) in union_pairs(key) {
                            if seen.insert((a.clone(), b.clone())) {
                                rels.push(serde_json::json!({"source": a, "target": b, "relation": "near"}));
                            }
                        }
                    }
                    serde_json::json!({"image_id": rec.get("image_id").cloned().unwrap_or(Value::Null), "relationships": rels})
                })
                .collect();
            jsonfmt::to_string(&graphs).expect("graphs serialize")
        }
    }

    fn union_pairs(key: &str) -> Vec<(String, String)> {
        let mut out = Vec::new();
        let mut rest = key;
        while let Some(i) = rest.find("Union(") {
            rest = &rest[i + "Union(".len()..];
            let Some((a, after)) = parse_entry_key(rest) else {
                break;
            };
            let Some(after) = after.trim_start().strip_prefix(',') else {
                break;
            };
            let Some((b, after)) = parse_entry_key(after) else {
                break;
            };
            out.push((a.to_string(), b.to_string()));
            rest = after;
        }
        out
    }

    impl ChatTransport for PairwiseResponder {
        fn post(&self, request: &ChatRequest) -> Result<HttpReply, TransportError> {
            let user = request
                .messages
                .iter()
                .rev()
                .find(|m| m.role == crate::prompt::Role::User)
                .map(|m| m.content.as_str())
                .unwrap_or_default();
            Ok(HttpReply {
                status: 200,
                body: completion_body(&Self::respond(user), &request_digest(request)),
            })
        }
    }
}

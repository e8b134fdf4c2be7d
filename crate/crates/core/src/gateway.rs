//! Text-generation backends behind one port.
//!
//! `generate` issues `n` independent single-sample calls with bounded
//! concurrency. Two backends ship: a scripted [`MockBackend`] for offline,
//! byte-deterministic runs and [`OpenAiBackend`] for OpenAI-compatible
//! chat-completions endpoints.

use std::collections::BTreeMap;
use std::path::Path;
use std::sync::Mutex;
use std::time::{Duration, Instant};

use regex::Regex;
use serde::{Deserialize, Serialize};
use serde_json::{json, Value};
use thiserror::Error;

use crate::util::{map_bounded, truncate_utf8};

pub const DEFAULT_CONCURRENCY: usize = 4;
pub const MAX_SAMPLES: u32 = 64;
pub const MAX_TEMPERATURE: f64 = 2.0;
pub const MOCK_BACKEND_ID: &str = "mock";

const BODY_EXCERPT: usize = 512;

#[derive(Debug, Error)]
pub enum GatewayError {
    #[error("invalid sampling parameters: {0}")]
    InvalidParams(String),
    #[error("messages must not be empty")]
    EmptyMessages,
    #[error("{backend}: request rejected with status {status}: {body}")]
    Rejected {
        backend: String,
        status: u16,
        body: String,
    },
    #[error("{backend}: gave up after {attempts} attempts: {last}")]
    RetriesExhausted {
        backend: String,
        attempts: u32,
        last: String,
    },
    #[error("{backend}: malformed response: {message}")]
    MalformedResponse { backend: String, message: String },
    #[error("{backend}: simulated failure: {message}")]
    Scripted { backend: String, message: String },
    #[error("backend configuration: {0}")]
    Config(String),
    #[error("unknown backend id '{0}' in pricing table")]
    UnknownBackend(String),
}

impl GatewayError {
    /// Whether repeating the same request later could succeed.
    pub fn is_retriable(&self) -> bool {
        matches!(self, GatewayError::RetriesExhausted { .. } | GatewayError::Scripted { .. })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Role {
    System,
    User,
    Assistant,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Message {
    pub role: Role,
    pub content: String,
}

impl Message {
    pub fn system(content: impl Into<String>) -> Self {
        Self {
            role: Role::System,
            content: content.into(),
        }
    }

    pub fn user(content: impl Into<String>) -> Self {
        Self {
            role: Role::User,
            content: content.into(),
        }
    }

    pub fn assistant(content: impl Into<String>) -> Self {
        Self {
            role: Role::Assistant,
            content: content.into(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SamplingParams {
    pub temperature: f64,
    pub n: u32,
    pub max_tokens: u32,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub seed: Option<u64>,
}

impl SamplingParams {
    pub fn new(temperature: f64, n: u32, max_tokens: u32) -> Self {
        Self {
            temperature,
            n,
            max_tokens,
            seed: None,
        }
    }

    pub fn validate(&self) -> Result<(), GatewayError> {
        if !(0.0..=MAX_TEMPERATURE).contains(&self.temperature) {
            return Err(GatewayError::InvalidParams(format!(
                "temperature {} outside [0, {MAX_TEMPERATURE}]",
                self.temperature
            )));
        }
        if self.n == 0 || self.n > MAX_SAMPLES {
            return Err(GatewayError::InvalidParams(format!(
                "n = {} outside [1, {MAX_SAMPLES}]",
                self.n
            )));
        }
        if self.max_tokens == 0 {
            return Err(GatewayError::InvalidParams("max_tokens must be positive".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Completion {
    pub text: String,
    pub prompt_tokens: u64,
    pub completion_tokens: u64,
    pub latency_ms: u64,
    pub backend_id: String,
    pub sample_index: u32,
}

/// Where learner code travels when a backend is called.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum BackendClass {
    Local,
    External,
}

pub trait Backend: Send + Sync {
    fn id(&self) -> &str;
    fn class(&self) -> BackendClass;
    /// Produces one sample. `sample_index` distinguishes independent draws.
    fn complete(
        &self,
        messages: &[Message],
        params: &SamplingParams,
        sample_index: u32,
    ) -> Result<Completion, GatewayError>;
    fn concurrency(&self) -> usize {
        DEFAULT_CONCURRENCY
    }
}

#[derive(Debug)]
pub struct SampleFailure {
    pub sample_index: u32,
    pub error: GatewayError,
}

/// Result of an n-sample request: successes in sample order plus failures.
#[derive(Debug, Default)]
pub struct Generation {
    pub completions: Vec<Completion>,
    pub failures: Vec<SampleFailure>,
}

impl Generation {
    pub fn is_degraded(&self) -> bool {
        !self.failures.is_empty()
    }

    /// First completion, or the first failure when nothing succeeded.
    pub fn into_first(self) -> Result<Completion, GatewayError> {
        let mut failures = self.failures.into_iter();
        match self.completions.into_iter().next() {
            Some(c) => Ok(c),
            None => Err(failures
                .next()
                .map(|f| f.error)
                .unwrap_or_else(|| GatewayError::Config("no samples requested".into()))),
        }
    }
}

/// Draws `params.n` independent samples, at most `backend.concurrency()` at a time.
pub fn generate(
    backend: &dyn Backend,
    messages: &[Message],
    params: &SamplingParams,
) -> Result<Generation, GatewayError> {
    if messages.is_empty() {
        return Err(GatewayError::EmptyMessages);
    }
    params.validate()?;
    let indices: Vec<u32> = (0..params.n).collect();
    let outcomes = map_bounded(&indices, backend.concurrency(), |_, &i| {
        backend.complete(messages, params, i)
    });
    let mut generation = Generation::default();
    for (i, outcome) in indices.into_iter().zip(outcomes) {
        match outcome {
            Ok(c) => generation.completions.push(c),
            Err(error) => generation.failures.push(SampleFailure {
                sample_index: i,
                error,
            }),
        }
    }
    Ok(generation)
}

/// Whitespace word count, the mock's stand-in for a real tokenizer.
pub fn approx_tokens(text: &str) -> u64 {
    text.split_whitespace().count() as u64
}

fn prompt_text(messages: &[Message]) -> String {
    messages
        .iter()
        .map(|m| m.content.as_str())
        .collect::<Vec<_>>()
        .join("\n\n")
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Price {
    pub usd_per_1m_prompt_tokens: f64,
    pub usd_per_1m_completion_tokens: f64,
}

/// USD prices per backend id. The mock backend is always free.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(transparent)]
pub struct PricingTable(pub BTreeMap<String, Price>);

impl Default for PricingTable {
    fn default() -> Self {
        let mut m = BTreeMap::new();
        m.insert(
            MOCK_BACKEND_ID.to_string(),
            Price {
                usd_per_1m_prompt_tokens: 0.0,
                usd_per_1m_completion_tokens: 0.0,
            },
        );
        PricingTable(m)
    }
}

impl PricingTable {
    pub fn from_json(text: &str) -> Result<Self, GatewayError> {
        let parsed: BTreeMap<String, Price> =
            serde_json::from_str(text).map_err(|e| GatewayError::Config(format!("pricing table: {e}")))?;
        let mut table = PricingTable::default();
        for (id, price) in parsed {
            let ok = |p: f64| p.is_finite() && p >= 0.0;
            if !ok(price.usd_per_1m_prompt_tokens) || !ok(price.usd_per_1m_completion_tokens) {
                return Err(GatewayError::Config(format!("pricing table: negative price for '{id}'")));
            }
            if id == MOCK_BACKEND_ID
                && (price.usd_per_1m_prompt_tokens != 0.0 || price.usd_per_1m_completion_tokens != 0.0)
            {
                return Err(GatewayError::Config("pricing table: the mock backend must be priced 0".into()));
            }
            table.0.insert(id, price);
        }
        Ok(table)
    }

    pub fn load(path: &Path) -> Result<Self, GatewayError> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| GatewayError::Config(format!("{}: {e}", path.display())))?;
        Self::from_json(&text)
    }

    pub fn insert(&mut self, id: impl Into<String>, price: Price) {
        self.0.insert(id.into(), price);
    }
}

/// Σ (prompt_tokens·prompt_price + completion_tokens·completion_price) / 1e6.
pub fn cost_of(completions: &[Completion], pricing: &PricingTable) -> Result<f64, GatewayError> {
    let mut micro_usd = 0.0;
    for c in completions {
        let price = pricing
            .0
            .get(&c.backend_id)
            .ok_or_else(|| GatewayError::UnknownBackend(c.backend_id.clone()))?;
        micro_usd += c.prompt_tokens as f64 * price.usd_per_1m_prompt_tokens
            + c.completion_tokens as f64 * price.usd_per_1m_completion_tokens;
    }
    Ok(micro_usd / 1e6)
}

/// One model call as seen by telemetry.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CallRecord {
    pub backend_id: String,
    pub backend_class: BackendClass,
    pub sample_index: u32,
    pub prompt_tokens: u64,
    pub completion_tokens: u64,
    pub latency_ms: u64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub error: Option<String>,
}

/// Append-only, thread-safe log of model calls.
#[derive(Debug, Default)]
pub struct TelemetrySink {
    records: Mutex<Vec<CallRecord>>,
}

impl TelemetrySink {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn record(&self, record: CallRecord) {
        self.records.lock().expect("telemetry lock poisoned").push(record);
    }

    pub fn record_generation(&self, backend: &dyn Backend, generation: &Generation) {
        for c in &generation.completions {
            self.record(CallRecord {
                backend_id: c.backend_id.clone(),
                backend_class: backend.class(),
                sample_index: c.sample_index,
                prompt_tokens: c.prompt_tokens,
                completion_tokens: c.completion_tokens,
                latency_ms: c.latency_ms,
                error: None,
            });
        }
        for f in &generation.failures {
            self.record(CallRecord {
                backend_id: backend.id().to_string(),
                backend_class: backend.class(),
                sample_index: f.sample_index,
                prompt_tokens: 0,
                completion_tokens: 0,
                latency_ms: 0,
                error: Some(f.error.to_string()),
            });
        }
    }

    pub fn snapshot(&self) -> Vec<CallRecord> {
        self.records.lock().expect("telemetry lock poisoned").clone()
    }

    pub fn len(&self) -> usize {
        self.records.lock().expect("telemetry lock poisoned").len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

// ---------------------------------------------------------------------------
// Mock backend

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct MockRule {
    /// Regex searched in the prompt (message contents joined by blank lines).
    pub pattern: String,
    /// Restricts the rule to one sample index.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub sample: Option<u32>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub response: Option<String>,
    /// Indexed by sample index, wrapping around.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub responses: Option<Vec<String>>,
    /// Makes the matching call fail with this message.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub error: Option<String>,
}

#[derive(Debug, Clone, Default, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct MockScript {
    #[serde(default)]
    pub rules: Vec<MockRule>,
    #[serde(default)]
    pub default: String,
    /// Reported latency; the mock also sleeps this long.
    #[serde(default)]
    pub latency_ms: u64,
}

/// Prompt seen by the mock, kept for assertions.
#[derive(Debug, Clone, PartialEq)]
pub struct RecordedPrompt {
    pub sample_index: u32,
    pub temperature: f64,
    pub messages: Vec<Message>,
}

#[derive(Debug)]
pub struct MockBackend {
    rules: Vec<(Regex, MockRule)>,
    default: String,
    latency_ms: u64,
    warnings: Vec<String>,
    prompts: Mutex<Vec<RecordedPrompt>>,
}

impl MockBackend {
    pub fn new(script: MockScript) -> Result<Self, GatewayError> {
        let mut rules = Vec::with_capacity(script.rules.len());
        for (i, rule) in script.rules.into_iter().enumerate() {
            let outputs = [rule.response.is_some(), rule.responses.is_some(), rule.error.is_some()];
            if outputs.iter().filter(|&&b| b).count() != 1 {
                return Err(GatewayError::Config(format!(
                    "mock rule {i}: exactly one of response, responses, error is required"
                )));
            }
            if rule.responses.as_ref().is_some_and(Vec::is_empty) {
                return Err(GatewayError::Config(format!("mock rule {i}: responses is empty")));
            }
            let re = Regex::new(&rule.pattern)
                .map_err(|e| GatewayError::Config(format!("mock rule {i}: bad pattern: {e}")))?;
            rules.push((re, rule));
        }
        let warnings = unreachable_rules(&rules);
        for w in &warnings {
            tracing::warn!("{w}");
        }
        Ok(Self {
            rules,
            default: script.default,
            latency_ms: script.latency_ms,
            warnings,
            prompts: Mutex::new(Vec::new()),
        })
    }

    /// A script answering every prompt with `text`.
    pub fn constant(text: &str) -> Self {
        Self::new(MockScript {
            default: text.to_string(),
            ..Default::default()
        })
        .expect("empty rule set is valid")
    }

    pub fn from_json(text: &str) -> Result<Self, GatewayError> {
        let script: MockScript =
            serde_json::from_str(text).map_err(|e| GatewayError::Config(format!("mock script: {e}")))?;
        Self::new(script)
    }

    pub fn load(path: &Path) -> Result<Self, GatewayError> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| GatewayError::Config(format!("{}: {e}", path.display())))?;
        Self::from_json(&text)
    }

    pub fn warnings(&self) -> &[String] {
        &self.warnings
    }

    pub fn prompts(&self) -> Vec<RecordedPrompt> {
        let mut p = self.prompts.lock().expect("prompt log poisoned").clone();
        // concurrent samples land in completion order; sort for stable inspection
        p.sort_by_key(|r| r.sample_index);
        p
    }

    pub fn clear_prompts(&self) {
        self.prompts.lock().expect("prompt log poisoned").clear();
    }

    fn respond(&self, prompt: &str, sample_index: u32) -> Result<String, String> {
        for (re, rule) in &self.rules {
            if rule.sample.is_some_and(|s| s != sample_index) || !re.is_match(prompt) {
                continue;
            }
            if let Some(msg) = &rule.error {
                return Err(msg.clone());
            }
            if let Some(r) = &rule.response {
                return Ok(r.clone());
            }
            if let Some(rs) = &rule.responses {
                return Ok(rs[sample_index as usize % rs.len()].clone());
            }
        }
        Ok(self.default.clone())
    }
}

/// Rules that can never fire because an earlier rule always wins.
fn unreachable_rules(rules: &[(Regex, MockRule)]) -> Vec<String> {
    let catch_all = |re: &Regex| re.is_match("") && re.is_match("\u{1}probe text\nwith lines");
    let mut warnings = Vec::new();
    for (j, (_, later)) in rules.iter().enumerate() {
        let shadowed_by = rules[..j].iter().position(|(re, earlier)| {
            let covers_sample = earlier.sample.is_none() || earlier.sample == later.sample;
            covers_sample && (earlier.pattern == later.pattern || catch_all(re))
        });
        if let Some(i) = shadowed_by {
            warnings.push(format!("mock rule {j} is unreachable: rule {i} always matches first"));
        }
    }
    warnings
}

impl Backend for MockBackend {
    fn id(&self) -> &str {
        MOCK_BACKEND_ID
    }

    fn class(&self) -> BackendClass {
        BackendClass::Local
    }

    fn complete(
        &self,
        messages: &[Message],
        params: &SamplingParams,
        sample_index: u32,
    ) -> Result<Completion, GatewayError> {
        self.prompts.lock().expect("prompt log poisoned").push(RecordedPrompt {
            sample_index,
            temperature: params.temperature,
            messages: messages.to_vec(),
        });
        if self.latency_ms > 0 {
            std::thread::sleep(Duration::from_millis(self.latency_ms));
        }
        let prompt = prompt_text(messages);
        let text = self.respond(&prompt, sample_index).map_err(|message| GatewayError::Scripted {
            backend: MOCK_BACKEND_ID.into(),
            message,
        })?;
        Ok(Completion {
            prompt_tokens: approx_tokens(&prompt),
            completion_tokens: approx_tokens(&text),
            text,
            latency_ms: self.latency_ms,
            backend_id: MOCK_BACKEND_ID.into(),
            sample_index,
        })
    }
}

// ---------------------------------------------------------------------------
// OpenAI-compatible HTTP backend

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum RequestLogging {
    #[default]
    Off,
    /// Logs sizes, status and timing but no message text.
    Redacted,
    Full,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct HttpBackendConfig {
    /// Identifier used in telemetry and pricing.
    pub id: String,
    /// Base URL up to and including the version segment, e.g. `https://host/v1`.
    pub base_url: String,
    pub model: String,
    /// Name of the environment variable holding the API key.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub api_key_env: Option<String>,
    #[serde(default = "default_timeout_ms")]
    pub timeout_ms: u64,
    #[serde(default = "default_max_retries")]
    pub max_retries: u32,
    #[serde(default = "default_backoff_ms")]
    pub backoff_ms: u64,
    #[serde(default = "default_concurrency")]
    pub concurrency: usize,
    #[serde(default)]
    pub logging: RequestLogging,
    /// `local` for a self-hosted server, `external` for a third-party API.
    #[serde(default = "default_class")]
    pub class: BackendClass,
}

fn default_class() -> BackendClass {
    BackendClass::External
}
fn default_timeout_ms() -> u64 {
    60_000
}
fn default_max_retries() -> u32 {
    3
}
fn default_backoff_ms() -> u64 {
    500
}
fn default_concurrency() -> usize {
    DEFAULT_CONCURRENCY
}

impl HttpBackendConfig {
    pub fn new(id: &str, base_url: &str, model: &str) -> Self {
        Self {
            id: id.into(),
            base_url: base_url.into(),
            model: model.into(),
            api_key_env: None,
            timeout_ms: default_timeout_ms(),
            max_retries: default_max_retries(),
            backoff_ms: default_backoff_ms(),
            concurrency: default_concurrency(),
            logging: RequestLogging::Off,
            class: default_class(),
        }
    }
}

pub struct OpenAiBackend {
    config: HttpBackendConfig,
    api_key: Option<String>,
    endpoint: String,
    client: reqwest::blocking::Client,
}

impl std::fmt::Debug for OpenAiBackend {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("OpenAiBackend")
            .field("id", &self.config.id)
            .field("endpoint", &self.endpoint)
            .field("model", &self.config.model)
            .field("api_key", &self.api_key.as_ref().map(|_| "<redacted>"))
            .finish()
    }
}

enum Attempt {
    Done(Completion),
    Retry(String),
    Fatal(GatewayError),
}

impl OpenAiBackend {
    pub fn new(config: HttpBackendConfig) -> Result<Self, GatewayError> {
        let api_key = match &config.api_key_env {
            Some(var) => Some(std::env::var(var).map_err(|_| {
                GatewayError::Config(format!("environment variable {var} (API key) is not set"))
            })?),
            None => None,
        };
        if !(config.base_url.starts_with("http://") || config.base_url.starts_with("https://")) {
            return Err(GatewayError::Config(format!("base_url must be http(s): {}", config.base_url)));
        }
        let client = reqwest::blocking::Client::builder()
            .timeout(Duration::from_millis(config.timeout_ms))
            .build()
            .map_err(|e| GatewayError::Config(format!("http client: {e}")))?;
        let endpoint = format!("{}/chat/completions", config.base_url.trim_end_matches('/'));
        Ok(Self {
            config,
            api_key,
            endpoint,
            client,
        })
    }

    fn body(&self, messages: &[Message], params: &SamplingParams, sample_index: u32) -> Value {
        let mut body = json!({
            "model": self.config.model,
            "messages": messages,
            "temperature": params.temperature,
            "max_tokens": params.max_tokens,
            "n": 1,
        });
        if let Some(seed) = params.seed {
            body["seed"] = json!(seed.wrapping_add(sample_index as u64));
        }
        body
    }

    fn attempt(&self, body: &Value, sample_index: u32) -> Attempt {
        let started = Instant::now();
        let mut request = self.client.post(&self.endpoint).json(body);
        if let Some(key) = &self.api_key {
            request = request.bearer_auth(key);
        }
        let response = match request.send() {
            Ok(r) => r,
            Err(e) => return Attempt::Retry(format!("transport: {e}")),
        };
        let status = response.status();
        let text = match response.text() {
            Ok(t) => t,
            Err(e) => return Attempt::Retry(format!("reading body: {e}")),
        };
        let latency_ms = started.elapsed().as_millis() as u64;
        self.log_exchange(body, status.as_u16(), &text, latency_ms);
        if status.as_u16() == 429 || status.is_server_error() {
            return Attempt::Retry(format!("status {}: {}", status.as_u16(), truncate_utf8(&text, BODY_EXCERPT)));
        }
        if !status.is_success() {
            return Attempt::Fatal(GatewayError::Rejected {
                backend: self.config.id.clone(),
                status: status.as_u16(),
                body: truncate_utf8(&text, BODY_EXCERPT).to_string(),
            });
        }
        match parse_chat_response(&text) {
            Ok((content, prompt_tokens, completion_tokens)) => Attempt::Done(Completion {
                text: content,
                prompt_tokens,
                completion_tokens,
                latency_ms,
                backend_id: self.config.id.clone(),
                sample_index,
            }),
            Err(message) => Attempt::Fatal(GatewayError::MalformedResponse {
                backend: self.config.id.clone(),
                message,
            }),
        }
    }

    fn log_exchange(&self, body: &Value, status: u16, response: &str, latency_ms: u64) {
        match self.config.logging {
            RequestLogging::Off => {}
            RequestLogging::Redacted => tracing::info!(
                backend = %self.config.id,
                status,
                latency_ms,
                request_bytes = body.to_string().len(),
                response_bytes = response.len(),
                "model call"
            ),
            RequestLogging::Full => tracing::info!(
                backend = %self.config.id,
                status,
                latency_ms,
                request = %body,
                response,
                "model call"
            ),
        }
    }
}

fn parse_chat_response(text: &str) -> Result<(String, u64, u64), String> {
    let v: Value = serde_json::from_str(text).map_err(|e| format!("not JSON: {e}"))?;
    let content = v
        .pointer("/choices/0/message/content")
        .and_then(Value::as_str)
        .ok_or("missing choices[0].message.content")?;
    let usage = |k: &str| v.pointer(&format!("/usage/{k}")).and_then(Value::as_u64).unwrap_or(0);
    Ok((content.to_string(), usage("prompt_tokens"), usage("completion_tokens")))
}

impl Backend for OpenAiBackend {
    fn id(&self) -> &str {
        &self.config.id
    }

    fn class(&self) -> BackendClass {
        self.config.class
    }

    fn concurrency(&self) -> usize {
        self.config.concurrency.max(1)
    }

    fn complete(
        &self,
        messages: &[Message],
        params: &SamplingParams,
        sample_index: u32,
    ) -> Result<Completion, GatewayError> {
        let body = self.body(messages, params, sample_index);
        let attempts = self.config.max_retries + 1;
        let mut last = String::new();
        for attempt in 0..attempts {
            if attempt > 0 {
                let backoff = self.config.backoff_ms.saturating_mul(1 << (attempt - 1).min(16));
                std::thread::sleep(Duration::from_millis(backoff));
            }
            match self.attempt(&body, sample_index) {
                Attempt::Done(c) => return Ok(c),
                Attempt::Fatal(e) => return Err(e),
                Attempt::Retry(cause) => {
                    tracing::debug!(backend = %self.config.id, attempt, %cause, "retrying model call");
                    last = cause;
                }
            }
        }
        Err(GatewayError::RetriesExhausted {
            backend: self.config.id.clone(),
            attempts,
            last,
        })
    }
}

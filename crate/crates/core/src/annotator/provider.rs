use std::collections::{HashMap, VecDeque};
use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::Mutex;
use std::time::Duration;

use serde::{Deserialize, Serialize};

use super::AnnotateError;
use crate::hashing::{fnv1a64, mix64};

/// Connection settings for a chat-completion endpoint. The bearer token is
/// read from the environment variable named by `auth_token_env`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ProviderConfig {
    pub base_url: String,
    pub model_name: String,
    pub auth_token_env: String,
    pub temperature: f64,
    #[serde(default = "default_batch_size")]
    pub batch_size: usize,
    #[serde(default = "default_retries")]
    pub max_retries: u32,
    #[serde(default = "default_timeout")]
    pub timeout_secs: u64,
    /// Concurrent requests.
    #[serde(default = "default_in_flight")]
    pub max_in_flight: usize,
    /// First retry delay; doubles per attempt.
    #[serde(default = "default_backoff")]
    pub retry_backoff_ms: u64,
}

fn default_batch_size() -> usize {
    10
}
fn default_retries() -> u32 {
    3
}
fn default_timeout() -> u64 {
    60
}
fn default_in_flight() -> usize {
    4
}
fn default_backoff() -> u64 {
    500
}

impl Default for ProviderConfig {
    fn default() -> Self {
        Self {
            base_url: "https://api.openai.com/v1".into(),
            model_name: "gpt-4".into(),
            auth_token_env: "SURROGATE_API_KEY".into(),
            temperature: 0.0,
            batch_size: default_batch_size(),
            max_retries: default_retries(),
            timeout_secs: default_timeout(),
            max_in_flight: default_in_flight(),
            retry_backoff_ms: default_backoff(),
        }
    }
}

impl ProviderConfig {
    pub fn validate(&self) -> Result<(), AnnotateError> {
        if self.batch_size == 0 {
            return Err(AnnotateError::InvalidConfig("batch_size must be at least 1".into()));
        }
        if !(0.0..=2.0).contains(&self.temperature) {
            return Err(AnnotateError::InvalidConfig(format!("temperature {} outside [0, 2]", self.temperature)));
        }
        if self.max_in_flight == 0 {
            return Err(AnnotateError::InvalidConfig("max_in_flight must be at least 1".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ChatMessage {
    pub role: String,
    pub content: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ChatRequest {
    pub model: String,
    pub messages: Vec<ChatMessage>,
    pub temperature: f64,
    /// Sampling seed; distinct per iteration so repeated draws differ.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub seed: Option<u64>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
pub struct TokenUsage {
    pub input_tokens: u64,
    pub output_tokens: u64,
}

impl TokenUsage {
    pub fn add(&mut self, other: TokenUsage) {
        self.input_tokens += other.input_tokens;
        self.output_tokens += other.output_tokens;
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ChatResponse {
    pub content: String,
    pub usage: TokenUsage,
}

#[derive(Debug, Clone, PartialEq, Eq, thiserror::Error)]
pub enum ProviderError {
    /// Transport failure or a retryable HTTP status (429, 5xx).
    #[error("transient provider failure: {0}")]
    Transient(String),
    /// Any other non-success response.
    #[error("provider rejected the request ({status}): {body}")]
    Rejected { status: u16, body: String },
}

pub trait Provider: Send + Sync {
    fn complete(&self, request: &ChatRequest) -> Result<ChatResponse, ProviderError>;
}

/// Chat-completion client: POST `{base_url}/chat/completions` with a bearer
/// token; reads `choices[0].message.content` and `usage`.
pub struct HttpProvider {
    client: reqwest::blocking::Client,
    url: String,
    token: String,
}

#[derive(Deserialize)]
struct WireResponse {
    choices: Vec<WireChoice>,
    #[serde(default)]
    usage: Option<WireUsage>,
}

#[derive(Deserialize)]
struct WireChoice {
    message: WireMessage,
}

#[derive(Deserialize)]
struct WireMessage {
    #[serde(default)]
    content: Option<String>,
}

#[derive(Deserialize)]
struct WireUsage {
    #[serde(default)]
    prompt_tokens: u64,
    #[serde(default)]
    completion_tokens: u64,
}

impl HttpProvider {
    /// Fails with `AuthMissing` when the token variable is unset or empty.
    pub fn from_env(config: &ProviderConfig) -> Result<Self, AnnotateError> {
        let token = std::env::var(&config.auth_token_env)
            .ok()
            .filter(|t| !t.trim().is_empty())
            .ok_or_else(|| AnnotateError::AuthMissing(config.auth_token_env.clone()))?;
        Self::with_token(config, token)
    }

    pub fn with_token(config: &ProviderConfig, token: String) -> Result<Self, AnnotateError> {
        let client = reqwest::blocking::Client::builder()
            .timeout(Duration::from_secs(config.timeout_secs))
            .build()
            .map_err(|e| AnnotateError::InvalidConfig(e.to_string()))?;
        let url = format!("{}/chat/completions", config.base_url.trim_end_matches('/'));
        Ok(Self { client, url, token })
    }
}

impl Provider for HttpProvider {
    fn complete(&self, request: &ChatRequest) -> Result<ChatResponse, ProviderError> {
        let resp = self
            .client
            .post(&self.url)
            .bearer_auth(&self.token)
            .json(request)
            .send()
            .map_err(|e| ProviderError::Transient(e.to_string()))?;
        let status = resp.status();
        let body = resp.text().map_err(|e| ProviderError::Transient(e.to_string()))?;
        if status.as_u16() == 429 || status.is_server_error() {
            return Err(ProviderError::Transient(format!("HTTP {status}")));
        }
        if !status.is_success() {
            return Err(ProviderError::Rejected { status: status.as_u16(), body: body.chars().take(500).collect() });
        }
        let wire: WireResponse =
            serde_json::from_str(&body).map_err(|e| ProviderError::Transient(format!("undecodable response: {e}")))?;
        let content = wire
            .choices
            .into_iter()
            .next()
            .and_then(|c| c.message.content)
            .ok_or_else(|| ProviderError::Transient("response has no message content".into()))?;
        let usage = wire
            .usage
            .map(|u| TokenUsage { input_tokens: u.prompt_tokens, output_tokens: u.completion_tokens })
            .unwrap_or_default();
        Ok(ChatResponse { content, usage })
    }
}

/// Scripted misbehaviour for the mock, consumed one per call.
#[derive(Debug, Clone, PartialEq, Eq)]
pub enum MockFault {
    /// Fail the call as a transport error.
    Unreachable,
    /// Answer with the last line dropped.
    DropLine,
    /// Answer this text verbatim.
    Reply(String),
}

/// Offline provider. Answers each numbered text with its gold label, flipped
/// to another lexicon label with probability `noise`. The flip is a pure
/// function of (mock seed, text, request seed), so results do not depend on
/// batching or scheduling.
pub struct MockProvider {
    gold: HashMap<String, String>,
    /// `(label, token)` in lexicon order.
    lexicon: Vec<(String, String)>,
    noise: f64,
    seed: u64,
    script: Mutex<VecDeque<MockFault>>,
    calls: AtomicUsize,
}

impl MockProvider {
    /// `gold` maps text to label; `lexicon` maps label to answer token.
    pub fn new(gold: HashMap<String, String>, lexicon: &std::collections::BTreeMap<String, String>, noise: f64, seed: u64) -> Self {
        let gold = gold.into_iter().map(|(t, l)| (t.split_whitespace().collect::<Vec<_>>().join(" "), l)).collect();
        Self {
            gold,
            lexicon: lexicon.iter().map(|(l, t)| (l.clone(), t.clone())).collect(),
            noise,
            seed,
            script: Mutex::new(VecDeque::new()),
            calls: AtomicUsize::new(0),
        }
    }

    pub fn with_script(self, faults: impl IntoIterator<Item = MockFault>) -> Self {
        self.script.lock().expect("script lock").extend(faults);
        self
    }

    pub fn calls(&self) -> usize {
        self.calls.load(Ordering::SeqCst)
    }

    fn unit(&self, text: &str, request_seed: u64, salt: u64) -> f64 {
        let h = mix64(self.seed ^ mix64(fnv1a64(text.as_bytes()) ^ mix64(request_seed ^ salt)));
        (h >> 11) as f64 / (1u64 << 53) as f64
    }

    fn answer(&self, text: &str, request_seed: u64) -> String {
        let gold = self.gold.get(text);
        let gold_idx = gold.and_then(|g| self.lexicon.iter().position(|(l, _)| l == g));
        let idx = match gold_idx {
            Some(g) if self.lexicon.len() > 1 && self.unit(text, request_seed, 1) < self.noise => {
                // uniform over the other labels
                let k = (self.unit(text, request_seed, 2) * (self.lexicon.len() - 1) as f64) as usize;
                let k = k.min(self.lexicon.len() - 2);
                if k >= g {
                    k + 1
                } else {
                    k
                }
            }
            Some(g) => g,
            None => (self.unit(text, request_seed, 3) * self.lexicon.len() as f64) as usize % self.lexicon.len(),
        };
        self.lexicon[idx].1.clone()
    }
}

fn word_count(s: &str) -> u64 {
    s.split_whitespace().count() as u64
}

impl Provider for MockProvider {
    fn complete(&self, request: &ChatRequest) -> Result<ChatResponse, ProviderError> {
        self.calls.fetch_add(1, Ordering::SeqCst);
        let fault = self.script.lock().expect("script lock").pop_front();
        if fault == Some(MockFault::Unreachable) {
            return Err(ProviderError::Transient("mock: connection refused".into()));
        }
        let user = request.messages.iter().rev().find(|m| m.role == "user").map(|m| m.content.as_str()).unwrap_or("");
        let seed = request.seed.unwrap_or(0);
        let mut lines: Vec<String> = user
            .lines()
            .filter_map(|l| l.split_once(": "))
            .map(|(n, text)| format!("{n}: {}", self.answer(text, seed)))
            .collect();
        if fault == Some(MockFault::DropLine) {
            lines.pop();
        }
        let content = match fault {
            Some(MockFault::Reply(s)) => s,
            _ => lines.join("\n"),
        };
        let input_tokens = request.messages.iter().map(|m| word_count(&m.content)).sum();
        let usage = TokenUsage { input_tokens, output_tokens: 2 * word_count(&content) };
        Ok(ChatResponse { content, usage })
    }
}

//! LLM labeling: versioned prompts, a chat-completion client, a response
//! cache and the multi-iteration `annotate` loop.

mod cache;
mod prompt;
mod provider;

use std::collections::BTreeMap;
use std::sync::atomic::{AtomicBool, AtomicUsize, Ordering};
use std::sync::Mutex;
use std::time::Duration;

use serde::{Deserialize, Serialize};

pub use cache::{cache_key, AnnotationCache, CacheEntry};
pub use prompt::{parse_response, render_prompt, ParseFailure, PromptStore, PromptVersion, RenderedPrompt};
pub use provider::{
    ChatMessage, ChatRequest, ChatResponse, HttpProvider, MockFault, MockProvider, Provider, ProviderConfig,
    ProviderError, TokenUsage,
};

use crate::consistency::AnnotationRecord;
use crate::corpus::{TaskSpec, TextSample};
use crate::hashing::sha256_fields;

#[derive(Debug, thiserror::Error)]
pub enum AnnotateError {
    #[error("batch of {got} items; allowed 1..={max}")]
    OversizedBatch { got: usize, max: usize },
    #[error("environment variable {0} with the API token is not set")]
    AuthMissing(String),
    #[error("provider unreachable after {attempts} attempts: {last_error}")]
    ProviderUnreachable { attempts: u32, last_error: String },
    #[error("provider rejected the request ({status}): {body}")]
    Rejected { status: u16, body: String },
    #[error("prompt lexicon has no token for label {0:?}")]
    MissingLexiconEntry(String),
    #[error("invalid prompt: {0}")]
    InvalidPrompt(String),
    #[error("prompt {id} v{version} not found")]
    UnknownPrompt { id: String, version: u32 },
    #[error("prompt {id} version {version} must be greater than {latest}")]
    VersionNotIncreasing { id: String, version: u32, latest: u32 },
    #[error("invalid provider config: {0}")]
    InvalidConfig(String),
    #[error("iterations must be at least 1")]
    NoIterations,
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

type ParsedBatch = Result<Vec<(usize, String)>, ParseFailure>;

/// One LLM answer for one sample in one iteration. `label` is `None` when the
/// answer could not be read; such slots are never coerced to a label.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct RawAnnotation {
    pub sample_id: String,
    pub iteration: u32,
    pub label: Option<String>,
    pub raw_response: String,
    pub prompt_id: String,
    pub prompt_version: u32,
    pub token_usage: TokenUsage,
}

/// Tokens and requests actually sent; cache hits add nothing.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
pub struct TokenLedger {
    pub requests: u64,
    pub input_tokens: u64,
    pub output_tokens: u64,
}

impl TokenLedger {
    pub fn record(&mut self, usage: TokenUsage) {
        self.requests += 1;
        self.input_tokens += usage.input_tokens;
        self.output_tokens += usage.output_tokens;
    }

    pub fn merge(&mut self, other: &TokenLedger) {
        self.requests += other.requests;
        self.input_tokens += other.input_tokens;
        self.output_tokens += other.output_tokens;
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
pub struct AnnotateStats {
    pub cache_hits: u64,
    pub cache_misses: u64,
    /// Provider calls, including retried ones.
    pub requests: u64,
    pub retries: u64,
    pub unparseable: u64,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct AnnotationRun {
    /// Ordered by input sample, then iteration.
    pub records: Vec<RawAnnotation>,
    pub stats: AnnotateStats,
    pub ledger: TokenLedger,
}

impl AnnotationRun {
    /// Groups draws per sample (input order) into consistency records.
    /// Samples with no readable draw are left out.
    pub fn consistency_records(&self) -> Vec<AnnotationRecord> {
        let mut order: Vec<&str> = Vec::new();
        let mut draws: BTreeMap<&str, Vec<Option<String>>> = BTreeMap::new();
        for r in &self.records {
            let e = draws.entry(&r.sample_id).or_insert_with(|| {
                order.push(&r.sample_id);
                Vec::new()
            });
            e.push(r.label.clone());
        }
        order.iter().filter_map(|id| AnnotationRecord::from_draws(*id, &draws[id])).collect()
    }
}

/// Cache namespace for a prompt at a temperature. Answers at different
/// temperatures are different draws.
pub fn request_hash(prompt: &PromptVersion, temperature: f64) -> String {
    sha256_fields([prompt.hash(), format!("{temperature:?}")])
}

struct Job<'a> {
    iteration: u32,
    /// Indices into the input samples.
    items: Vec<usize>,
    batch: Vec<&'a TextSample>,
}

struct JobResult {
    entries: Vec<CacheEntry>,
    usage: Vec<TokenUsage>,
    retries: u64,
}

fn apportion(total: u64, n: usize) -> impl Iterator<Item = u64> {
    let n = n as u64;
    (0..n).map(move |i| total / n + u64::from(i < total % n))
}

fn split_usage(u: TokenUsage, n: usize) -> Vec<TokenUsage> {
    apportion(u.input_tokens, n)
        .zip(apportion(u.output_tokens, n))
        .map(|(input_tokens, output_tokens)| TokenUsage { input_tokens, output_tokens })
        .collect()
}

fn run_job(
    job: &Job<'_>,
    prompt: &PromptVersion,
    provider: &dyn Provider,
    config: &ProviderConfig,
    namespace: &str,
) -> Result<JobResult, AnnotateError> {
    let owned: Vec<TextSample> = job.batch.iter().map(|s| (*s).clone()).collect();
    let rendered = render_prompt(prompt, &owned, config.batch_size)?;
    let request = ChatRequest {
        model: config.model_name.clone(),
        messages: vec![
            ChatMessage { role: "system".into(), content: rendered.system },
            ChatMessage { role: "user".into(), content: rendered.user },
        ],
        temperature: config.temperature,
        seed: Some(u64::from(job.iteration)),
    };
    let attempts = config.max_retries + 1;
    let mut usage = Vec::new();
    let mut retries = 0;
    // (raw response, parse result) of the last attempt that got a response.
    let mut outcome: Option<(String, ParsedBatch)> = None;
    let mut last_error = String::new();
    for attempt in 0..attempts {
        if attempt > 0 {
            retries += 1;
            let delay = config.retry_backoff_ms.saturating_mul(1 << (attempt - 1).min(6));
            if delay > 0 {
                std::thread::sleep(Duration::from_millis(delay.min(30_000)));
            }
        }
        match provider.complete(&request) {
            Ok(resp) => {
                usage.push(resp.usage);
                let parsed = parse_response(&resp.content, job.batch.len(), prompt);
                if let Err(e) = &parsed {
                    log::warn!("iteration {} batch starting at {}: {e}", job.iteration, job.batch[0].id);
                }
                let ok = parsed.is_ok();
                outcome = Some((resp.content, parsed));
                if ok {
                    break;
                }
            }
            Err(ProviderError::Rejected { status, body }) => return Err(AnnotateError::Rejected { status, body }),
            Err(ProviderError::Transient(e)) => {
                log::warn!("provider call failed (attempt {}): {e}", attempt + 1);
                last_error = e;
                outcome = None;
            }
        }
    }
    let (raw, parsed) = match outcome {
        Some(o) => o,
        // The final attempt was a transport failure.
        None => return Err(AnnotateError::ProviderUnreachable { attempts, last_error }),
    };
    let final_usage = split_usage(*usage.last().expect("a response was received"), job.batch.len());
    let lines: Vec<&str> = raw.lines().map(str::trim).filter(|l| !l.is_empty()).collect();
    let entries = job
        .batch
        .iter()
        .enumerate()
        .map(|(i, s)| {
            let (label, raw_response) = match &parsed {
                Ok(labels) => (Some(labels[i].1.clone()), lines[i].to_string()),
                Err(_) => (None, raw.clone()),
            };
            CacheEntry {
                key: cache_key(&config.model_name, namespace, &s.id, job.iteration),
                sample_id: s.id.clone(),
                iteration: job.iteration,
                label,
                raw_response,
                token_usage: final_usage[i],
            }
        })
        .collect();
    Ok(JobResult { entries, usage, retries })
}

/// Labels every sample `iterations` times. Cached slots are reused; the rest
/// are sent in batches of `config.batch_size`, up to `config.max_in_flight`
/// at a time. A batch whose answer cannot be parsed is re-sent whole up to
/// `max_retries` times and then recorded as unparseable.
pub fn annotate(
    samples: &[TextSample],
    task: &TaskSpec,
    prompt: &PromptVersion,
    provider: &dyn Provider,
    config: &ProviderConfig,
    iterations: u32,
    cache: &AnnotationCache,
) -> Result<AnnotationRun, AnnotateError> {
    config.validate()?;
    prompt.validate_for(task)?;
    if iterations == 0 {
        return Err(AnnotateError::NoIterations);
    }
    let namespace = request_hash(prompt, config.temperature);
    let mut stats = AnnotateStats::default();
    let mut slots: Vec<Vec<Option<CacheEntry>>> = vec![vec![None; iterations as usize]; samples.len()];
    let mut jobs = Vec::new();
    for it in 0..iterations {
        let mut pending = Vec::new();
        for (i, s) in samples.iter().enumerate() {
            match cache.get(&cache_key(&config.model_name, &namespace, &s.id, it)) {
                Some(e) => {
                    stats.cache_hits += 1;
                    slots[i][it as usize] = Some(e);
                }
                None => {
                    stats.cache_misses += 1;
                    pending.push(i);
                }
            }
        }
        for chunk in pending.chunks(config.batch_size) {
            jobs.push(Job { iteration: it, items: chunk.to_vec(), batch: chunk.iter().map(|&i| &samples[i]).collect() });
        }
    }

    let mut ledger = TokenLedger::default();
    if !jobs.is_empty() {
        log::info!("{}: {} requests to send, {} slots cached", task.task_id, jobs.len(), stats.cache_hits);
        let next = AtomicUsize::new(0);
        let abort = AtomicBool::new(false);
        let results: Mutex<Vec<Option<Result<JobResult, AnnotateError>>>> =
            Mutex::new((0..jobs.len()).map(|_| None).collect());
        let workers = config.max_in_flight.min(jobs.len());
        std::thread::scope(|scope| {
            for _ in 0..workers {
                scope.spawn(|| loop {
                    if abort.load(Ordering::SeqCst) {
                        break;
                    }
                    let j = next.fetch_add(1, Ordering::SeqCst);
                    let Some(job) = jobs.get(j) else { break };
                    let mut r = run_job(job, prompt, provider, config, &namespace);
                    if let Ok(ok) = &r {
                        if let Err(e) = cache.insert_all(&ok.entries) {
                            r = Err(e);
                        }
                    }
                    if r.is_err() {
                        abort.store(true, Ordering::SeqCst);
                    }
                    results.lock().expect("results lock")[j] = Some(r);
                });
            }
        });
        // Report the first failure in job order.
        for (job, r) in jobs.iter().zip(results.into_inner().expect("results lock")) {
            let Some(r) = r else { continue };
            let r = r?;
            stats.retries += r.retries;
            stats.requests += r.retries + 1;
            for u in &r.usage {
                ledger.record(*u);
            }
            for (&i, e) in job.items.iter().zip(r.entries) {
                slots[i][job.iteration as usize] = Some(e);
            }
        }
    }

    let mut records = Vec::with_capacity(samples.len() * iterations as usize);
    for per_sample in slots {
        for e in per_sample {
            let e = e.expect("every slot filled");
            if e.label.is_none() {
                stats.unparseable += 1;
            }
            records.push(RawAnnotation {
                sample_id: e.sample_id,
                iteration: e.iteration,
                label: e.label,
                raw_response: e.raw_response,
                prompt_id: prompt.prompt_id.clone(),
                prompt_version: prompt.version,
                token_usage: e.token_usage,
            });
        }
    }
    Ok(AnnotationRun { records, stats, ledger })
}

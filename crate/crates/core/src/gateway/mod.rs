//! Provider-agnostic LLM invocation with retries, content-addressed caching
//! and record/replay transcripts.
//!
//! Every response is keyed by `sha256(canonical config ‖ "\n" ‖ prompt hash ‖
//! "\n" ‖ item id)`. In replay mode only the transcript is consulted; in live
//! mode the transcript doubles as the session cache, so an identical request
//! never reaches the provider twice.

mod http;
mod parse;
mod transcript;

use std::collections::HashMap;
use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::{Arc, Mutex};
use std::time::Duration;

use rand::Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use thiserror::Error;

use crate::codebook::{render_prompt, CodebookError, PromptTemplate};
use crate::corpus::{Dataset, SampleAllocation};
use crate::metrics::{LabelRecord, RaterKind, ScaleDescriptor};

pub use http::{EnvProviders, HttpProvider};
pub use parse::{parse_units, ParseError, UnitSpec};
pub use transcript::{Transcript, TranscriptEntry, TranscriptKey};

#[derive(Debug, Clone, PartialEq, Error)]
pub enum GatewayError {
    #[error("provider unavailable after {attempts} attempts: {last_error}")]
    ProviderUnavailable { attempts: u32, last_error: String },
    #[error("provider rejected the request: {0}")]
    ProviderRejected(String),
    #[error("no recorded response for key {0}")]
    CacheMiss(String),
    #[error("missing credentials: set {0}")]
    MissingCredentials(String),
    #[error("invalid: {0}")]
    Invalid(String),
    #[error("prompt rendering failed: {0}")]
    Render(#[from] CodebookError),
    #[error("every item in the batch failed ({} items)", .0.len())]
    AllFailed(Vec<ItemFailure>),
    #[error("transcript: {0}")]
    Transcript(String),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub provider: String,
    pub model: String,
    pub temperature: f64,
    pub max_output_tokens: u32,
    #[serde(default)]
    pub seed: Option<u64>,
}

impl ModelConfig {
    pub fn new(provider: impl Into<String>, model: impl Into<String>) -> Self {
        Self {
            provider: provider.into(),
            model: model.into(),
            temperature: 0.0,
            max_output_tokens: 512,
            seed: None,
        }
    }

    pub fn validate(&self) -> Result<(), GatewayError> {
        if self.model.trim().is_empty() || self.provider.trim().is_empty() {
            return Err(GatewayError::Invalid("provider and model must be non-empty".into()));
        }
        if !(self.temperature >= 0.0) || !self.temperature.is_finite() {
            return Err(GatewayError::Invalid(format!("temperature {} < 0", self.temperature)));
        }
        Ok(())
    }

    /// Stable textual form used in cache keys.
    pub fn canonical(&self) -> String {
        let seed = self.seed.map_or_else(|| "none".to_string(), |s| s.to_string());
        format!(
            "provider={};model={};temperature={:?};max_output_tokens={};seed={}",
            self.provider, self.model, self.temperature, self.max_output_tokens, seed
        )
    }

    /// Rater id used when this model's outputs join a label matrix.
    pub fn rater_id(&self) -> String {
        format!("model:{}/{}", self.provider, self.model)
    }
}

pub fn sha256_hex(text: &str) -> String {
    hex::encode(Sha256::digest(text.as_bytes()))
}

/// A generated response together with the assessable units parsed from it.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GenerationRecord {
    pub item_id: String,
    pub prompt_version: u32,
    pub prompt_hash: String,
    pub response: String,
    pub response_hash: String,
    pub units: Vec<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub parse_error: Option<ParseError>,
    pub config: ModelConfig,
    pub requested_at: u64,
    pub completed_at: u64,
    pub attempts: u32,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ItemFailure {
    pub item_id: String,
    pub error: String,
}

/// Per-item results of a batch, in allocation order.
#[derive(Debug, Clone, PartialEq)]
pub struct BatchOutcome {
    pub results: Vec<Result<GenerationRecord, ItemFailure>>,
}

impl BatchOutcome {
    pub fn records(&self) -> impl Iterator<Item = &GenerationRecord> {
        self.results.iter().filter_map(|r| r.as_ref().ok())
    }

    pub fn failures(&self) -> impl Iterator<Item = &ItemFailure> {
        self.results.iter().filter_map(|r| r.as_ref().err())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub enum ProviderError {
    /// Worth retrying: timeouts, rate limits, server errors.
    Transient(String),
    Fatal(String),
}

pub trait Provider: Send + Sync {
    fn complete(&self, config: &ModelConfig, prompt: &str) -> Result<String, ProviderError>;
}

impl<F> Provider for F
where
    F: Fn(&ModelConfig, &str) -> Result<String, ProviderError> + Send + Sync,
{
    fn complete(&self, config: &ModelConfig, prompt: &str) -> Result<String, ProviderError> {
        self(config, prompt)
    }
}

/// Exponential backoff with jitter, bounded by `max_attempts`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RetryPolicy {
    pub max_attempts: u32,
    pub base_delay_ms: u64,
    pub max_delay_ms: u64,
}

impl Default for RetryPolicy {
    fn default() -> Self {
        Self {
            max_attempts: 5,
            base_delay_ms: 500,
            max_delay_ms: 30_000,
        }
    }
}

impl RetryPolicy {
    /// Delay before retry number `attempt` (1-based), jittered into [d/2, d].
    pub fn delay(&self, attempt: u32) -> Duration {
        let exp = self
            .base_delay_ms
            .saturating_mul(1u64 << attempt.saturating_sub(1).min(20))
            .min(self.max_delay_ms);
        let jittered = if exp > 1 {
            rand::thread_rng().gen_range(exp / 2..=exp)
        } else {
            exp
        };
        Duration::from_millis(jittered)
    }
}

pub enum Mode {
    Live(Arc<dyn Provider>),
    Replay,
}

type Sleeper = Box<dyn Fn(Duration) + Send + Sync>;

pub struct Gateway {
    mode: Mode,
    retry: RetryPolicy,
    sleeper: Sleeper,
    transcript: Mutex<Transcript>,
    in_flight: Mutex<HashMap<String, Arc<Mutex<()>>>>,
    provider_calls: AtomicUsize,
}

fn now_ms() -> u64 {
    std::time::SystemTime::now()
        .duration_since(std::time::UNIX_EPOCH)
        .map(|d| d.as_millis() as u64)
        .unwrap_or(0)
}

impl Gateway {
    pub fn replay(transcript: Transcript) -> Self {
        Self::with_mode(Mode::Replay, transcript)
    }

    /// Live mode; `transcript` seeds the session cache and collects new responses.
    pub fn live(provider: Arc<dyn Provider>, transcript: Transcript) -> Self {
        Self::with_mode(Mode::Live(provider), transcript)
    }

    fn with_mode(mode: Mode, transcript: Transcript) -> Self {
        Self {
            mode,
            retry: RetryPolicy::default(),
            sleeper: Box::new(std::thread::sleep),
            transcript: Mutex::new(transcript),
            in_flight: Mutex::new(HashMap::new()),
            provider_calls: AtomicUsize::new(0),
        }
    }

    pub fn with_retry(mut self, retry: RetryPolicy) -> Self {
        self.retry = retry;
        self
    }

    pub fn with_sleeper(mut self, sleeper: impl Fn(Duration) + Send + Sync + 'static) -> Self {
        self.sleeper = Box::new(sleeper);
        self
    }

    pub fn is_replay(&self) -> bool {
        matches!(self.mode, Mode::Replay)
    }

    /// Number of requests that actually reached the provider this session.
    pub fn provider_calls(&self) -> usize {
        self.provider_calls.load(Ordering::SeqCst)
    }

    pub fn transcript(&self) -> Transcript {
        self.transcript.lock().expect("transcript lock").clone()
    }

    pub fn generate(
        &self,
        item_id: &str,
        prompt_version: u32,
        prompt: &str,
        config: &ModelConfig,
        spec: &UnitSpec,
    ) -> Result<GenerationRecord, GatewayError> {
        config.validate()?;
        let key = TranscriptKey::new(config, &sha256_hex(prompt), item_id);
        let digest = key.digest();
        let entry = match &self.mode {
            Mode::Replay => self
                .lookup(&digest)
                .ok_or_else(|| GatewayError::CacheMiss(digest.clone()))?,
            Mode::Live(provider) => {
                let guard = {
                    let mut map = self.in_flight.lock().expect("in-flight lock");
                    map.entry(digest.clone()).or_default().clone()
                };
                let _held = guard.lock().expect("key lock");
                match self.lookup(&digest) {
                    Some(hit) => hit,
                    None => {
                        let entry = self.call_with_retries(provider.as_ref(), key, prompt)?;
                        self.transcript
                            .lock()
                            .expect("transcript lock")
                            .insert(entry.clone());
                        entry
                    }
                }
            }
        };
        Ok(record_from_entry(entry, prompt_version, spec))
    }

    fn lookup(&self, digest: &str) -> Option<TranscriptEntry> {
        self.transcript.lock().expect("transcript lock").get(digest).cloned()
    }

    fn call_with_retries(
        &self,
        provider: &dyn Provider,
        key: TranscriptKey,
        prompt: &str,
    ) -> Result<TranscriptEntry, GatewayError> {
        let requested_at = now_ms();
        let mut attempt = 0;
        loop {
            attempt += 1;
            self.provider_calls.fetch_add(1, Ordering::SeqCst);
            match provider.complete(&key.config, prompt) {
                Ok(response) => {
                    return Ok(TranscriptEntry {
                        key,
                        response,
                        attempts: attempt,
                        requested_at,
                        completed_at: now_ms(),
                    })
                }
                Err(ProviderError::Fatal(e)) => return Err(GatewayError::ProviderRejected(e)),
                Err(ProviderError::Transient(e)) => {
                    if attempt >= self.retry.max_attempts {
                        tracing::warn!(attempts = attempt, error = %e, "provider unavailable");
                        return Err(GatewayError::ProviderUnavailable {
                            attempts: attempt,
                            last_error: e,
                        });
                    }
                    tracing::debug!(attempt, error = %e, "retrying provider call");
                    (self.sleeper)(self.retry.delay(attempt));
                }
            }
        }
    }

    /// Renders `template` for every allocated item and generates responses
    /// with up to `parallelism` requests in flight. Results keep allocation
    /// order regardless of completion order.
    #[allow(clippy::too_many_arguments)]
    pub fn generate_batch(
        &self,
        dataset: &Dataset,
        allocation: &SampleAllocation,
        template: &PromptTemplate,
        input_slot: &str,
        config: &ModelConfig,
        spec: &UnitSpec,
        parallelism: usize,
    ) -> Result<BatchOutcome, GatewayError> {
        if allocation.item_ids.is_empty() {
            return Err(GatewayError::Invalid("allocation is empty".into()));
        }
        let mut prompts = Vec::with_capacity(allocation.item_ids.len());
        for id in &allocation.item_ids {
            let item = dataset
                .get(id)
                .ok_or_else(|| GatewayError::Invalid(format!("item {id:?} not in dataset")))?;
            prompts.push(render_prompt(template, &item.payload(input_slot))?);
        }
        let n = prompts.len();
        let slots: Vec<Mutex<Option<Result<GenerationRecord, ItemFailure>>>> =
            (0..n).map(|_| Mutex::new(None)).collect();
        let next = AtomicUsize::new(0);
        let workers = parallelism.clamp(1, n);
        std::thread::scope(|scope| {
            for _ in 0..workers {
                scope.spawn(|| loop {
                    let i = next.fetch_add(1, Ordering::SeqCst);
                    if i >= n {
                        break;
                    }
                    let id = &allocation.item_ids[i];
                    let out = self
                        .generate(id, template.meta.version, &prompts[i], config, spec)
                        .map_err(|e| ItemFailure {
                            item_id: id.clone(),
                            error: e.to_string(),
                        });
                    *slots[i].lock().expect("slot lock") = Some(out);
                });
            }
        });
        let results: Vec<_> = slots
            .into_iter()
            .map(|s| s.into_inner().expect("slot lock").expect("every slot filled"))
            .collect();
        if results.iter().all(Result::is_err) {
            return Err(GatewayError::AllFailed(
                results.into_iter().filter_map(Result::err).collect(),
            ));
        }
        Ok(BatchOutcome { results })
    }

    /// Runs the same allocation under each configuration.
    #[allow(clippy::too_many_arguments)]
    pub fn compare_models(
        &self,
        dataset: &Dataset,
        allocation: &SampleAllocation,
        template: &PromptTemplate,
        input_slot: &str,
        configs: &[ModelConfig],
        spec: &UnitSpec,
        parallelism: usize,
    ) -> Result<Vec<(ModelConfig, BatchOutcome)>, GatewayError> {
        if configs.len() < 2 {
            return Err(GatewayError::Invalid("model comparison needs at least 2 configs".into()));
        }
        configs
            .iter()
            .map(|c| {
                self.generate_batch(dataset, allocation, template, input_slot, c, spec, parallelism)
                    .map(|out| (c.clone(), out))
            })
            .collect()
    }
}

fn record_from_entry(entry: TranscriptEntry, prompt_version: u32, spec: &UnitSpec) -> GenerationRecord {
    let (units, parse_error) = match parse_units(&entry.response, spec) {
        Ok(u) => (u, None),
        Err(e) => (Vec::new(), Some(e)),
    };
    GenerationRecord {
        item_id: entry.key.item_id,
        prompt_version,
        prompt_hash: entry.key.prompt_hash,
        response_hash: sha256_hex(&entry.response),
        response: entry.response,
        units,
        parse_error,
        config: entry.key.config,
        requested_at: entry.requested_at,
        completed_at: entry.completed_at,
        attempts: entry.attempts,
    }
}

/// Converts classification outputs into model-rater label records for
/// `criterion`, one column per configuration. Items whose response did not
/// parse to a scale value are left missing.
pub fn model_label_records(
    runs: &[(ModelConfig, BatchOutcome)],
    criterion: &str,
    scale: &ScaleDescriptor,
) -> Vec<LabelRecord> {
    let mut out = Vec::new();
    for (config, outcome) in runs {
        for rec in outcome.records() {
            if let Some(label) = rec.units.first().filter(|l| scale.index_of(l).is_some()) {
                out.push(LabelRecord {
                    item_id: rec.item_id.clone(),
                    rater_id: config.rater_id(),
                    criterion_id: criterion.to_string(),
                    label: label.clone(),
                    rater_kind: RaterKind::Model,
                });
            }
        }
    }
    out
}

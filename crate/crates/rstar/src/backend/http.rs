//! Blocking HTTP client for completion-API endpoints
//! (`POST {base_url}/v1/completions`), with bounded retries on transient
//! failures and a hard cap on in-flight requests.

use std::sync::{Condvar, Mutex};
use std::time::Duration;

use serde::{Deserialize, Serialize};

use super::{BackendError, CompletionBackend, CompletionRequest, CompletionResponse};

/// Environment variable overriding the generator endpoint URL.
pub const ENV_GENERATOR_URL: &str = "RSTAR_GENERATOR_URL";
/// Environment variable overriding the discriminator endpoint URL.
pub const ENV_DISCRIMINATOR_URL: &str = "RSTAR_DISCRIMINATOR_URL";
/// Environment variable carrying the bearer credential, if the endpoint
/// requires one.
pub const ENV_API_KEY: &str = "RSTAR_API_KEY";

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct EndpointConfig {
    pub base_url: String,
    pub model_name: String,
    #[serde(default = "default_timeout_secs")]
    pub timeout_secs: u64,
    #[serde(default = "default_max_retries")]
    pub max_retries: u32,
    /// Sleep before retry attempt i is `retry_backoff_ms[min(i, len-1)]`.
    #[serde(default = "default_backoff_ms")]
    pub retry_backoff_ms: Vec<u64>,
    #[serde(default = "default_concurrency")]
    pub max_concurrent_requests: usize,
}

fn default_timeout_secs() -> u64 {
    120
}
fn default_max_retries() -> u32 {
    3
}
fn default_backoff_ms() -> Vec<u64> {
    vec![200, 1000, 4000]
}
fn default_concurrency() -> usize {
    8
}

impl EndpointConfig {
    pub fn new(base_url: impl Into<String>, model_name: impl Into<String>) -> Self {
        EndpointConfig {
            base_url: base_url.into(),
            model_name: model_name.into(),
            timeout_secs: default_timeout_secs(),
            max_retries: default_max_retries(),
            retry_backoff_ms: default_backoff_ms(),
            max_concurrent_requests: default_concurrency(),
        }
    }
}

/// Counting semaphore bounding in-flight requests.
struct Gate {
    slots: Mutex<usize>,
    freed: Condvar,
}

impl Gate {
    fn new(slots: usize) -> Self {
        Gate { slots: Mutex::new(slots.max(1)), freed: Condvar::new() }
    }

    fn acquire(&self) -> GatePermit<'_> {
        let mut slots = self.slots.lock().expect("gate poisoned");
        while *slots == 0 {
            slots = self.freed.wait(slots).expect("gate poisoned");
        }
        *slots -= 1;
        GatePermit { gate: self }
    }
}

struct GatePermit<'a> {
    gate: &'a Gate,
}

impl Drop for GatePermit<'_> {
    fn drop(&mut self) {
        *self.gate.slots.lock().expect("gate poisoned") += 1;
        self.gate.freed.notify_one();
    }
}

#[derive(Serialize)]
struct WireRequest<'a> {
    model: &'a str,
    prompt: &'a str,
    n: u32,
    temperature: f64,
    max_tokens: u32,
    #[serde(skip_serializing_if = "Vec::is_empty")]
    stop: Vec<String>,
}

#[derive(Deserialize)]
struct WireChoice {
    text: String,
    index: Option<u32>,
}

#[derive(Deserialize, Default)]
struct WireUsage {
    #[serde(default)]
    prompt_tokens: u64,
    #[serde(default)]
    completion_tokens: u64,
}

#[derive(Deserialize)]
struct WireResponse {
    choices: Vec<WireChoice>,
    #[serde(default)]
    usage: Option<WireUsage>,
}

pub struct HttpBackend {
    client: reqwest::blocking::Client,
    config: EndpointConfig,
    bearer: Option<String>,
    gate: Gate,
}

impl HttpBackend {
    /// Builds the client. `RSTAR_API_KEY` supplies the bearer credential.
    pub fn new(config: EndpointConfig) -> Result<Self, BackendError> {
        let client = reqwest::blocking::Client::builder()
            .timeout(Duration::from_secs(config.timeout_secs))
            .build()
            .map_err(|e| BackendError::MalformedResponse(e.to_string()))?;
        let bearer = std::env::var(ENV_API_KEY).ok().filter(|k| !k.is_empty());
        let gate = Gate::new(config.max_concurrent_requests);
        Ok(HttpBackend { client, config, bearer, gate })
    }

    fn completions_url(&self) -> String {
        format!("{}/v1/completions", self.config.base_url.trim_end_matches('/'))
    }

    fn attempt(&self, request: &CompletionRequest) -> Result<CompletionResponse, AttemptOutcome> {
        let body = WireRequest {
            model: &self.config.model_name,
            prompt: &request.prompt,
            n: request.n,
            temperature: request.temperature,
            max_tokens: request.max_tokens,
            stop: request.stop_sequences.clone(),
        };
        let mut builder = self.client.post(self.completions_url()).json(&body);
        if let Some(key) = &self.bearer {
            builder = builder.bearer_auth(key);
        }
        let response = builder.send().map_err(|e| {
            if e.is_timeout() {
                AttemptOutcome::Transient(BackendError::Timeout)
            } else {
                AttemptOutcome::Transient(BackendError::MalformedResponse(e.to_string()))
            }
        })?;
        let status = response.status();
        if status.as_u16() == 429 || status.is_server_error() {
            return Err(AttemptOutcome::Transient(BackendError::Rejected { status: status.as_u16() }));
        }
        if !status.is_success() {
            return Err(AttemptOutcome::Fatal(BackendError::Rejected { status: status.as_u16() }));
        }
        let wire: WireResponse = response
            .json()
            .map_err(|e| AttemptOutcome::Fatal(BackendError::MalformedResponse(e.to_string())))?;
        let mut choices = wire.choices;
        choices.sort_by_key(|c| c.index.unwrap_or(0));
        let usage = wire.usage.unwrap_or_default();
        Ok(CompletionResponse {
            samples: choices.into_iter().map(|c| c.text).collect(),
            prompt_tokens: usage.prompt_tokens,
            completion_tokens: usage.completion_tokens,
        })
    }
}

enum AttemptOutcome {
    Transient(BackendError),
    Fatal(BackendError),
}

impl CompletionBackend for HttpBackend {
    fn complete(&self, request: &CompletionRequest) -> Result<CompletionResponse, BackendError> {
        let _permit = self.gate.acquire();
        let attempts = self.config.max_retries + 1;
        let mut last_error = String::new();
        for attempt in 0..attempts {
            match self.attempt(request) {
                Ok(response) => return Ok(response),
                Err(AttemptOutcome::Fatal(err)) => return Err(err),
                Err(AttemptOutcome::Transient(err)) => {
                    last_error = err.to_string();
                    if attempt + 1 < attempts {
                        let idx = (attempt as usize)
                            .min(self.config.retry_backoff_ms.len().saturating_sub(1));
                        let ms = self.config.retry_backoff_ms.get(idx).copied().unwrap_or(200);
                        std::thread::sleep(Duration::from_millis(ms));
                    }
                }
            }
        }
        Err(BackendError::EndpointUnavailable { attempts, last_error })
    }
}

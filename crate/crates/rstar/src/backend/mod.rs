//! Text-completion backends: the abstract contract, an HTTP client for
//! completion-API endpoints, a deterministic synthetic oracle, and a replay
//! backend serving mirrored request logs.

pub mod http;
pub mod replay;
pub mod synthetic;

use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::Path;
use std::sync::atomic::{AtomicU64, Ordering};
use std::sync::Mutex;

use serde::{Deserialize, Serialize};
use thiserror::Error;

pub use http::{EndpointConfig, HttpBackend};
pub use replay::{ReplayBackend, ReplayRecord};
pub use synthetic::{SyntheticBank, SyntheticOracle, SyntheticProblem};

#[derive(Debug, Error)]
pub enum BackendError {
    #[error("request timed out")]
    Timeout,
    #[error("endpoint unavailable after {attempts} attempts: {last_error}")]
    EndpointUnavailable { attempts: u32, last_error: String },
    #[error("malformed response: {0}")]
    MalformedResponse(String),
    #[error("endpoint rejected request with HTTP {status}")]
    Rejected { status: u16 },
    #[error("synthetic oracle does not recognize the prompt: {0}")]
    UnrecognizedPrompt(String),
    #[error("replay log has no record for ordinal {ordinal}")]
    ReplayMiss { ordinal: u64 },
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

impl BackendError {
    /// Persistent failures abort a run; anything else is skipped per rollout.
    pub fn is_fatal(&self) -> bool {
        matches!(self, BackendError::EndpointUnavailable { .. })
    }
}

/// One completion call: `n` samples for a prompt at a given temperature.
/// The ordinal is monotone within a run and seeds deterministic backends.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct CompletionRequest {
    pub prompt: String,
    pub n: u32,
    pub temperature: f64,
    pub max_tokens: u32,
    pub stop_sequences: Vec<String>,
    pub request_ordinal: u64,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct CompletionResponse {
    pub samples: Vec<String>,
    pub prompt_tokens: u64,
    pub completion_tokens: u64,
}

/// The completion contract. Implementations must accept concurrent calls;
/// deterministic backends must be pure functions of
/// (backend seed, request ordinal, prompt, n, temperature).
pub trait CompletionBackend: Send + Sync {
    fn complete(&self, request: &CompletionRequest) -> Result<CompletionResponse, BackendError>;
}

impl<B: CompletionBackend + ?Sized> CompletionBackend for &B {
    fn complete(&self, request: &CompletionRequest) -> Result<CompletionResponse, BackendError> {
        (**self).complete(request)
    }
}

/// Cost counters accumulated over a session.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct Usage {
    pub calls: u64,
    pub prompt_tokens: u64,
    pub completion_tokens: u64,
}

impl Usage {
    pub fn add(&mut self, other: Usage) {
        self.calls += other.calls;
        self.prompt_tokens += other.prompt_tokens;
        self.completion_tokens += other.completion_tokens;
    }
}

/// Stamps monotone request ordinals, accumulates token accounting, and
/// optionally mirrors every request/response pair to a JSONL replay log.
pub struct BackendSession<'a> {
    backend: &'a dyn CompletionBackend,
    next_ordinal: AtomicU64,
    calls: AtomicU64,
    prompt_tokens: AtomicU64,
    completion_tokens: AtomicU64,
    mirror: Option<Mutex<BufWriter<File>>>,
}

impl<'a> BackendSession<'a> {
    pub fn new(backend: &'a dyn CompletionBackend) -> Self {
        BackendSession {
            backend,
            next_ordinal: AtomicU64::new(0),
            calls: AtomicU64::new(0),
            prompt_tokens: AtomicU64::new(0),
            completion_tokens: AtomicU64::new(0),
            mirror: None,
        }
    }

    pub fn with_mirror(backend: &'a dyn CompletionBackend, path: &Path) -> Result<Self, BackendError> {
        let file = File::create(path)?;
        let mut session = BackendSession::new(backend);
        session.mirror = Some(Mutex::new(BufWriter::new(file)));
        Ok(session)
    }

    /// Reserves the next ordinal. Exposed so callers that fan work out to
    /// threads can pre-assign ordinals in a deterministic order.
    pub fn reserve_ordinal(&self) -> u64 {
        self.next_ordinal.fetch_add(1, Ordering::Relaxed)
    }

    pub fn complete_with_ordinal(
        &self,
        ordinal: u64,
        prompt: String,
        n: u32,
        temperature: f64,
        max_tokens: u32,
        stop_sequences: Vec<String>,
    ) -> Result<CompletionResponse, BackendError> {
        let request = CompletionRequest {
            prompt,
            n,
            temperature,
            max_tokens,
            stop_sequences,
            request_ordinal: ordinal,
        };
        let response = self.backend.complete(&request)?;
        self.calls.fetch_add(1, Ordering::Relaxed);
        self.prompt_tokens.fetch_add(response.prompt_tokens, Ordering::Relaxed);
        self.completion_tokens.fetch_add(response.completion_tokens, Ordering::Relaxed);
        if let Some(mirror) = &self.mirror {
            let record = ReplayRecord::from_pair(&request, &response);
            let mut writer = mirror.lock().expect("mirror writer poisoned");
            serde_json::to_writer(&mut *writer, &record).map_err(std::io::Error::other)?;
            writer.write_all(b"\n")?;
            writer.flush()?;
        }
        Ok(response)
    }

    pub fn complete(
        &self,
        prompt: String,
        n: u32,
        temperature: f64,
        max_tokens: u32,
        stop_sequences: Vec<String>,
    ) -> Result<CompletionResponse, BackendError> {
        let ordinal = self.reserve_ordinal();
        self.complete_with_ordinal(ordinal, prompt, n, temperature, max_tokens, stop_sequences)
    }

    pub fn usage(&self) -> Usage {
        Usage {
            calls: self.calls.load(Ordering::Relaxed),
            prompt_tokens: self.prompt_tokens.load(Ordering::Relaxed),
            completion_tokens: self.completion_tokens.load(Ordering::Relaxed),
        }
    }
}

#[cfg(test)]
pub(crate) mod testing {
    use super::*;
    use std::sync::Mutex;

    /// Test backend that serves scripted sample lists in call order.
    pub struct ScriptedBackend {
        responses: Mutex<Vec<Vec<String>>>,
    }

    impl ScriptedBackend {
        pub fn new(responses: Vec<Vec<&str>>) -> Self {
            ScriptedBackend {
                responses: Mutex::new(
                    responses
                        .into_iter()
                        .rev()
                        .map(|samples| samples.into_iter().map(String::from).collect())
                        .collect(),
                ),
            }
        }
    }

    impl CompletionBackend for ScriptedBackend {
        fn complete(&self, request: &CompletionRequest) -> Result<CompletionResponse, BackendError> {
            let mut queue = self.responses.lock().unwrap();
            let samples = queue.pop().ok_or_else(|| {
                BackendError::MalformedResponse("scripted backend exhausted".into())
            })?;
            let completion_tokens = samples.iter().map(|s| s.len() as u64 / 4).sum();
            Ok(CompletionResponse {
                samples,
                prompt_tokens: request.prompt.len() as u64 / 4,
                completion_tokens,
            })
        }
    }
}

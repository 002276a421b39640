//! Replay backend: serves mirrored request/response pairs verbatim so runs
//! can be re-executed offline and deterministically.

use std::collections::HashMap;
use std::io::{BufRead, BufReader};
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::{BackendError, CompletionBackend, CompletionRequest, CompletionResponse};
use crate::seed::fnv1a;

/// One mirrored call, exactly as issued and answered.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ReplayRecord {
    pub request_ordinal: u64,
    pub prompt: String,
    pub n: u32,
    pub temperature: f64,
    pub max_tokens: u32,
    pub stop_sequences: Vec<String>,
    pub samples: Vec<String>,
    pub prompt_tokens: u64,
    pub completion_tokens: u64,
}

impl ReplayRecord {
    pub fn from_pair(request: &CompletionRequest, response: &CompletionResponse) -> Self {
        ReplayRecord {
            request_ordinal: request.request_ordinal,
            prompt: request.prompt.clone(),
            n: request.n,
            temperature: request.temperature,
            max_tokens: request.max_tokens,
            stop_sequences: request.stop_sequences.clone(),
            samples: response.samples.clone(),
            prompt_tokens: response.prompt_tokens,
            completion_tokens: response.completion_tokens,
        }
    }

    fn response(&self) -> CompletionResponse {
        CompletionResponse {
            samples: self.samples.clone(),
            prompt_tokens: self.prompt_tokens,
            completion_tokens: self.completion_tokens,
        }
    }
}

/// Serves a recorded JSONL log keyed by (ordinal, prompt hash).
pub struct ReplayBackend {
    records: HashMap<(u64, u64), ReplayRecord>,
}

impl ReplayBackend {
    pub fn from_path(path: &Path) -> Result<Self, BackendError> {
        let file = std::fs::File::open(path)?;
        let mut records = HashMap::new();
        for (lineno, line) in BufReader::new(file).lines().enumerate() {
            let line = line?;
            if line.trim().is_empty() {
                continue;
            }
            let record: ReplayRecord = serde_json::from_str(&line).map_err(|e| {
                BackendError::MalformedResponse(format!("replay line {}: {e}", lineno + 1))
            })?;
            records.insert((record.request_ordinal, fnv1a(record.prompt.as_bytes())), record);
        }
        Ok(ReplayBackend { records })
    }

    pub fn len(&self) -> usize {
        self.records.len()
    }

    pub fn is_empty(&self) -> bool {
        self.records.is_empty()
    }
}

impl CompletionBackend for ReplayBackend {
    fn complete(&self, request: &CompletionRequest) -> Result<CompletionResponse, BackendError> {
        self.records
            .get(&(request.request_ordinal, fnv1a(request.prompt.as_bytes())))
            .map(ReplayRecord::response)
            .ok_or(BackendError::ReplayMiss { ordinal: request.request_ordinal })
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::backend::synthetic::{SyntheticBank, SyntheticOracle};
    use crate::backend::BackendSession;

    #[test]
    fn mirror_then_replay_serves_identical_samples() {
        let dir = tempfile::tempdir().unwrap();
        let log = dir.path().join("mirror.jsonl");
        let problem = &SyntheticBank::generate(1, 1)[0];
        let registry = crate::actions::TemplateRegistry::default();
        let prompt = crate::actions::render_prompt(
            crate::actions::ActionKind::RemainingSteps,
            &problem.question(),
            &[],
            &registry,
        )
        .unwrap();

        let oracle = SyntheticOracle::new(0.3, 99);
        let recorded = {
            let session = BackendSession::with_mirror(&oracle, &log).unwrap();
            session.complete(prompt.text.clone(), 3, 0.8, 256, vec![]).unwrap()
        };

        let replay = ReplayBackend::from_path(&log).unwrap();
        assert_eq!(replay.len(), 1);
        let session = BackendSession::new(&replay);
        let served = session.complete(prompt.text.clone(), 3, 0.8, 256, vec![]).unwrap();
        assert_eq!(served.samples, recorded.samples);
        assert_eq!(served.completion_tokens, recorded.completion_tokens);

        // A request the log never saw is a miss.
        let miss = session.complete("other".into(), 1, 0.8, 256, vec![]).unwrap_err();
        assert!(matches!(miss, BackendError::ReplayMiss { .. }));
    }
}

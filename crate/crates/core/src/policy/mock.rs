//! Deterministic policy doubles: scripted replay, closure-driven responders and a recorder that
//! turns any policy's traffic into a replayable script.

use std::collections::HashMap;
use std::path::Path;
use std::sync::Mutex;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use super::{CompletionRequest, CompletionResponse, Message, PolicyClient, PolicyError};

/// SHA-256 over the role/content sequence of a transcript.
pub fn transcript_digest(transcript: &[Message]) -> String {
    let mut hasher = Sha256::new();
    for m in transcript {
        let role = serde_json::to_string(&m.role).unwrap_or_default();
        hasher.update((role.len() as u64).to_le_bytes());
        hasher.update(role.as_bytes());
        hasher.update((m.content.len() as u64).to_le_bytes());
        hasher.update(m.content.as_bytes());
    }
    hex::encode(hasher.finalize())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Exchange {
    pub digest: String,
    pub seed: Option<u64>,
    pub response: CompletionResponse,
}

/// Recorded exchanges keyed by (transcript digest, seed).
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct Script {
    pub exchanges: Vec<Exchange>,
}

impl Script {
    pub fn push(&mut self, transcript: &[Message], seed: Option<u64>, response: CompletionResponse) {
        self.exchanges.push(Exchange {
            digest: transcript_digest(transcript),
            seed,
            response,
        });
    }

    pub fn load(path: &Path) -> std::io::Result<Self> {
        let text = std::fs::read_to_string(path)?;
        serde_json::from_str(&text).map_err(|e| std::io::Error::new(std::io::ErrorKind::InvalidData, e))
    }

    pub fn save(&self, path: &Path) -> std::io::Result<()> {
        let text = serde_json::to_string_pretty(self).map_err(std::io::Error::other)?;
        std::fs::write(path, text + "\n")
    }
}

/// Replays a [`Script`]; a request with no recorded exchange is a contract error.
pub struct ScriptedPolicy {
    table: HashMap<(String, Option<u64>), CompletionResponse>,
}

pub fn mock_from_script(script: Script) -> ScriptedPolicy {
    let table = script
        .exchanges
        .into_iter()
        .map(|e| ((e.digest, e.seed), e.response))
        .collect();
    ScriptedPolicy { table }
}

impl PolicyClient for ScriptedPolicy {
    fn complete(&self, request: &CompletionRequest) -> Result<CompletionResponse, PolicyError> {
        let digest = transcript_digest(&request.transcript);
        let key = (digest, request.sampling.seed);
        self.table.get(&key).cloned().ok_or_else(|| {
            PolicyError::BackendContract(format!(
                "no scripted exchange for transcript {} with seed {:?}",
                &key.0[..12],
                key.1
            ))
        })
    }
}

/// A policy backed by a closure over the request; used to express fixture behaviour by rule.
pub struct FnPolicy<F>(pub F);

impl<F> PolicyClient for FnPolicy<F>
where
    F: Fn(&CompletionRequest) -> Result<CompletionResponse, PolicyError> + Send + Sync,
{
    fn complete(&self, request: &CompletionRequest) -> Result<CompletionResponse, PolicyError> {
        (self.0)(request)
    }
}

/// Wraps a policy and records every successful exchange.
pub struct RecordingPolicy<P> {
    inner: P,
    log: Mutex<Vec<Exchange>>,
}

impl<P: PolicyClient> RecordingPolicy<P> {
    pub fn new(inner: P) -> Self {
        Self {
            inner,
            log: Mutex::new(Vec::new()),
        }
    }

    /// The recorded exchanges, deduplicated and sorted so the script is stable across runs.
    pub fn script(&self) -> Script {
        let mut exchanges = self.log.lock().expect("recorder lock").clone();
        exchanges.sort_by(|a, b| (&a.digest, a.seed).cmp(&(&b.digest, b.seed)));
        exchanges.dedup_by(|a, b| a.digest == b.digest && a.seed == b.seed);
        Script { exchanges }
    }
}

impl<P: PolicyClient> PolicyClient for RecordingPolicy<P> {
    fn complete(&self, request: &CompletionRequest) -> Result<CompletionResponse, PolicyError> {
        let response = self.inner.complete(request)?;
        self.log.lock().expect("recorder lock").push(Exchange {
            digest: transcript_digest(&request.transcript),
            seed: request.sampling.seed,
            response: response.clone(),
        });
        Ok(response)
    }
}

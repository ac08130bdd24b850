//! Boundary to text-generation backends.
//!
//! Every agent stage talks to a model through [`PolicyClient`]. Two backends exist: a remote
//! inference server speaking a JSON chat-completions format ([`remote::RemoteClient`]) and
//! deterministic in-process doubles for tests ([`mock`]).

pub mod mock;
pub mod remote;

use std::collections::BTreeMap;
use std::sync::Arc;

use serde::{Deserialize, Serialize};

pub use mock::{mock_from_script, Exchange, FnPolicy, RecordingPolicy, Script, ScriptedPolicy};
pub use remote::{RemoteClient, RemoteConfig};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Role {
    System,
    User,
    Assistant,
    /// Execution feedback and loop notices; sent as `user` on the wire.
    Environment,
}

#[derive(Debug, Clone, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct Message {
    pub role: Role,
    pub content: String,
}

impl Message {
    pub fn new(role: Role, content: impl Into<String>) -> Self {
        Self {
            role,
            content: content.into(),
        }
    }

    pub fn user(content: impl Into<String>) -> Self {
        Self::new(Role::User, content)
    }

    pub fn assistant(content: impl Into<String>) -> Self {
        Self::new(Role::Assistant, content)
    }

    pub fn environment(content: impl Into<String>) -> Self {
        Self::new(Role::Environment, content)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SamplingParams {
    pub temperature: f64,
    pub top_p: f64,
    pub top_k: u32,
    pub seed: Option<u64>,
}

impl SamplingParams {
    pub fn greedy() -> Self {
        Self {
            temperature: 0.0,
            top_p: 1.0,
            top_k: 0,
            seed: None,
        }
    }

    pub fn is_greedy(&self) -> bool {
        self.temperature == 0.0
    }

    pub fn with_seed(mut self, seed: Option<u64>) -> Self {
        self.seed = seed;
        self
    }

    /// Seed for the `index`-th independent sample drawn with these parameters.
    pub fn derived(&self, index: usize) -> Self {
        self.with_seed(self.seed.map(|s| s.wrapping_add(index as u64)))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CompletionRequest {
    pub transcript: Vec<Message>,
    pub sampling: SamplingParams,
    pub max_new_tokens: u32,
    pub want_first_token_distribution: bool,
}

impl CompletionRequest {
    pub fn new(transcript: Vec<Message>, sampling: SamplingParams) -> Self {
        Self {
            transcript,
            sampling,
            max_new_tokens: 2048,
            want_first_token_distribution: false,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FinishReason {
    Stop,
    Length,
    Error,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CompletionResponse {
    pub text: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub first_token_distribution: Option<BTreeMap<String, f64>>,
    pub finish_reason: FinishReason,
}

impl CompletionResponse {
    pub fn text(text: impl Into<String>) -> Self {
        Self {
            text: text.into(),
            first_token_distribution: None,
            finish_reason: FinishReason::Stop,
        }
    }

    pub fn with_distribution<I, S>(mut self, dist: I) -> Self
    where
        I: IntoIterator<Item = (S, f64)>,
        S: Into<String>,
    {
        self.first_token_distribution = Some(dist.into_iter().map(|(k, v)| (k.into(), v)).collect());
        self
    }
}

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum PolicyError {
    #[error("policy backend unavailable after {attempts} attempt(s): {last_error}")]
    Unavailable { attempts: u32, last_error: String },
    #[error("policy backend broke its contract: {0}")]
    BackendContract(String),
}

pub trait PolicyClient: Send + Sync {
    fn complete(&self, request: &CompletionRequest) -> Result<CompletionResponse, PolicyError>;
}

impl<P: PolicyClient + ?Sized> PolicyClient for Arc<P> {
    fn complete(&self, request: &CompletionRequest) -> Result<CompletionResponse, PolicyError> {
        (**self).complete(request)
    }
}

impl<P: PolicyClient + ?Sized> PolicyClient for &P {
    fn complete(&self, request: &CompletionRequest) -> Result<CompletionResponse, PolicyError> {
        (**self).complete(request)
    }
}

impl<P: PolicyClient + ?Sized> PolicyClient for Box<P> {
    fn complete(&self, request: &CompletionRequest) -> Result<CompletionResponse, PolicyError> {
        (**self).complete(request)
    }
}

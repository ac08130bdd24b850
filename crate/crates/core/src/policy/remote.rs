//! HTTP client for an inference server speaking a JSON chat-completions format.
//!
//! Request: `{messages, temperature, top_p, top_k, seed, max_tokens, logprobs: {top_n}}`.
//! Response: `{text, finish_reason, top_logprobs_first_token: {token: logprob}}`.

use std::collections::BTreeMap;
use std::sync::{Condvar, Mutex};
use std::time::Duration;

use serde::{Deserialize, Serialize};
use serde_json::json;
use tracing::{debug, warn};

use super::{CompletionRequest, CompletionResponse, FinishReason, PolicyClient, PolicyError, Role};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct RemoteConfig {
    pub url: String,
    /// Sent as a bearer token; never logged.
    pub api_key: Option<String>,
    pub max_attempts: u32,
    pub initial_backoff_ms: u64,
    pub request_timeout_secs: u64,
    /// Number of first-token alternatives requested when a distribution is wanted.
    pub top_n: u32,
    pub max_in_flight: usize,
}

impl Default for RemoteConfig {
    fn default() -> Self {
        Self {
            url: "http://127.0.0.1:8000/v1/complete".to_string(),
            api_key: None,
            max_attempts: 4,
            initial_backoff_ms: 250,
            request_timeout_secs: 300,
            top_n: 20,
            max_in_flight: 16,
        }
    }
}

#[derive(Debug, Deserialize)]
struct WireResponse {
    text: String,
    #[serde(default)]
    finish_reason: Option<String>,
    #[serde(default)]
    top_logprobs_first_token: Option<BTreeMap<String, f64>>,
}

struct Permits {
    available: Mutex<usize>,
    freed: Condvar,
}

impl Permits {
    fn acquire(&self) -> PermitGuard<'_> {
        let mut n = self.available.lock().expect("permit lock");
        while *n == 0 {
            n = self.freed.wait(n).expect("permit lock");
        }
        *n -= 1;
        PermitGuard(self)
    }
}

struct PermitGuard<'a>(&'a Permits);

impl Drop for PermitGuard<'_> {
    fn drop(&mut self) {
        *self.0.available.lock().expect("permit lock") += 1;
        self.0.freed.notify_one();
    }
}

pub struct RemoteClient {
    cfg: RemoteConfig,
    agent: ureq::Agent,
    permits: Permits,
}

enum Attempt {
    Retry(String),
    Fatal(PolicyError),
}

impl RemoteClient {
    pub fn new(cfg: RemoteConfig) -> Self {
        let agent: ureq::Agent = ureq::Agent::config_builder()
            .timeout_global(Some(Duration::from_secs(cfg.request_timeout_secs)))
            .http_status_as_error(false)
            .build()
            .into();
        let permits = Permits {
            available: Mutex::new(cfg.max_in_flight.max(1)),
            freed: Condvar::new(),
        };
        Self { cfg, agent, permits }
    }

    fn body(&self, request: &CompletionRequest) -> serde_json::Value {
        let messages: Vec<serde_json::Value> = request
            .transcript
            .iter()
            .map(|m| {
                let role = match m.role {
                    Role::System => "system",
                    Role::User | Role::Environment => "user",
                    Role::Assistant => "assistant",
                };
                json!({"role": role, "content": m.content})
            })
            .collect();
        let s = &request.sampling;
        let mut body = json!({
            "messages": messages,
            "temperature": s.temperature,
            "top_p": s.top_p,
            "top_k": s.top_k,
            "seed": s.seed,
            "max_tokens": request.max_new_tokens,
        });
        if request.want_first_token_distribution {
            body["logprobs"] = json!({"top_n": self.cfg.top_n});
        }
        body
    }

    fn attempt(&self, body: &serde_json::Value, want_dist: bool) -> Result<CompletionResponse, Attempt> {
        let _permit = self.permits.acquire();
        let mut req = self.agent.post(&self.cfg.url);
        if let Some(key) = &self.cfg.api_key {
            req = req.header("Authorization", &format!("Bearer {key}"));
        }
        let mut resp = req
            .send_json(body)
            .map_err(|e| Attempt::Retry(e.to_string()))?;
        let status = resp.status().as_u16();
        let text = resp
            .body_mut()
            .read_to_string()
            .map_err(|e| Attempt::Retry(e.to_string()))?;
        debug!(status, body = %text, "policy response");
        if status == 429 || status >= 500 {
            return Err(Attempt::Retry(format!("HTTP {status}")));
        }
        if status >= 400 {
            return Err(Attempt::Fatal(PolicyError::BackendContract(format!(
                "HTTP {status}: {text}"
            ))));
        }
        let wire: WireResponse = serde_json::from_str(&text)
            .map_err(|e| Attempt::Fatal(PolicyError::BackendContract(e.to_string())))?;
        let finish_reason = match wire.finish_reason.as_deref() {
            None | Some("stop") => FinishReason::Stop,
            Some("length") => FinishReason::Length,
            Some("error") => FinishReason::Error,
            Some(other) => {
                return Err(Attempt::Fatal(PolicyError::BackendContract(format!(
                    "unknown finish_reason `{other}`"
                ))))
            }
        };
        let first_token_distribution = if want_dist {
            let logprobs = wire.top_logprobs_first_token.ok_or_else(|| {
                Attempt::Fatal(PolicyError::BackendContract(
                    "first-token log-probabilities requested but not returned".into(),
                ))
            })?;
            Some(logprobs.into_iter().map(|(k, lp)| (k, lp.exp().clamp(0.0, 1.0))).collect())
        } else {
            None
        };
        Ok(CompletionResponse {
            text: wire.text,
            first_token_distribution,
            finish_reason,
        })
    }
}

impl PolicyClient for RemoteClient {
    fn complete(&self, request: &CompletionRequest) -> Result<CompletionResponse, PolicyError> {
        let body = self.body(request);
        debug!(url = %self.cfg.url, body = %body, "policy request");
        let attempts = self.cfg.max_attempts.max(1);
        let mut backoff = Duration::from_millis(self.cfg.initial_backoff_ms);
        let mut last_error = String::new();
        for attempt in 1..=attempts {
            match self.attempt(&body, request.want_first_token_distribution) {
                Ok(r) => return Ok(r),
                Err(Attempt::Fatal(e)) => return Err(e),
                Err(Attempt::Retry(msg)) => {
                    warn!(attempt, error = %msg, "policy request failed");
                    last_error = msg;
                    if attempt < attempts {
                        std::thread::sleep(backoff);
                        backoff *= 2;
                    }
                }
            }
        }
        Err(PolicyError::Unavailable {
            attempts,
            last_error,
        })
    }
}

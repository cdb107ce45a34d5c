use std::sync::atomic::{AtomicUsize, Ordering};
use std::time::Duration;

use serde::{Deserialize, Serialize};
use serde_json::{json, Value};

use super::{LanguageModel, SamplingParams, ScoredContinuation};
use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RetryPolicy {
    pub max_retries: usize,
    pub initial_backoff_secs: f64,
}

impl Default for RetryPolicy {
    fn default() -> Self {
        RetryPolicy { max_retries: 3, initial_backoff_secs: 0.5 }
    }
}

/// How teacher-forced scores are requested.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum ScoringMode {
    /// Echo the prompt with `max_tokens = 0` and read prompt-token logprobs.
    #[default]
    Echo,
    /// Append the continuation one whitespace segment at a time and read each
    /// segment's log-probability from the top alternatives of a one-token
    /// completion. Segments missing from the alternatives are a capability
    /// error.
    Chunked,
    /// Echo first; switch to chunked if the endpoint refuses echo scoring.
    Auto,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelEndpoint {
    pub base_url: String,
    pub model_name: String,
    /// Name of the environment variable holding the bearer token.
    #[serde(default)]
    pub api_key_source: Option<String>,
    pub max_inflight: usize,
    #[serde(default)]
    pub retry_policy: RetryPolicy,
    #[serde(default)]
    pub scoring_mode: ScoringMode,
    #[serde(default = "default_top_logprobs")]
    pub chunked_top_logprobs: usize,
    #[serde(default = "default_timeout")]
    pub timeout_secs: f64,
}

fn default_top_logprobs() -> usize {
    20
}

fn default_timeout() -> f64 {
    120.0
}

impl ModelEndpoint {
    pub fn new(base_url: impl Into<String>, model_name: impl Into<String>) -> Self {
        ModelEndpoint {
            base_url: base_url.into(),
            model_name: model_name.into(),
            api_key_source: None,
            max_inflight: 4,
            retry_policy: RetryPolicy::default(),
            scoring_mode: ScoringMode::default(),
            chunked_top_logprobs: default_top_logprobs(),
            timeout_secs: default_timeout(),
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.max_inflight < 1 {
            return Err(Error::Config("max_inflight must be >= 1".into()));
        }
        if self.base_url.trim().is_empty() {
            return Err(Error::Config("endpoint base URL is empty".into()));
        }
        Ok(())
    }
}

/// Completions-style HTTP backend (`POST {base_url}/completions`).
pub struct HttpModel {
    endpoint: ModelEndpoint,
    agent: ureq::Agent,
    api_key: Option<String>,
    requests: AtomicUsize,
}

impl std::fmt::Debug for HttpModel {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("HttpModel").field("endpoint", &self.endpoint).finish()
    }
}

enum Failure {
    Retryable(String),
    Fatal(Error),
}

impl HttpModel {
    pub fn new(endpoint: ModelEndpoint) -> Result<Self> {
        endpoint.validate()?;
        let api_key = endpoint
            .api_key_source
            .as_deref()
            .and_then(|var| std::env::var(var).ok());
        let agent = ureq::AgentBuilder::new()
            .timeout(Duration::from_secs_f64(endpoint.timeout_secs))
            .build();
        Ok(HttpModel { endpoint, agent, api_key, requests: AtomicUsize::new(0) })
    }

    pub fn endpoint(&self) -> &ModelEndpoint {
        &self.endpoint
    }

    /// Total HTTP requests attempted, retries included.
    pub fn request_count(&self) -> usize {
        self.requests.load(Ordering::SeqCst)
    }

    fn url(&self) -> String {
        format!("{}/completions", self.endpoint.base_url.trim_end_matches('/'))
    }

    fn post_once(&self, body: &Value) -> std::result::Result<Value, Failure> {
        self.requests.fetch_add(1, Ordering::SeqCst);
        let mut req = self.agent.post(&self.url()).set("Content-Type", "application/json");
        if let Some(key) = &self.api_key {
            req = req.set("Authorization", &format!("Bearer {key}"));
        }
        match req.send_json(body.clone()) {
            Ok(resp) => resp
                .into_json::<Value>()
                .map_err(|e| Failure::Retryable(format!("unreadable response body: {e}"))),
            Err(ureq::Error::Status(code, resp)) => {
                let text = resp.into_string().unwrap_or_default();
                if code == 429 || code >= 500 {
                    Err(Failure::Retryable(format!("HTTP {code}: {text}")))
                } else if code == 401 || code == 403 {
                    Err(Failure::Fatal(Error::Transport {
                        attempts: 1,
                        message: format!("authentication failed (HTTP {code}): {text}"),
                    }))
                } else {
                    Err(Failure::Fatal(Error::Capability(format!(
                        "endpoint rejected request (HTTP {code}): {text}"
                    ))))
                }
            }
            Err(e) => Err(Failure::Retryable(e.to_string())),
        }
    }

    fn post(&self, body: &Value) -> Result<Value> {
        let policy = &self.endpoint.retry_policy;
        let mut last = String::new();
        for attempt in 0..=policy.max_retries {
            if attempt > 0 {
                let wait = policy.initial_backoff_secs * 2f64.powi(attempt as i32 - 1);
                std::thread::sleep(Duration::from_secs_f64(wait.max(0.0)));
            }
            match self.post_once(body) {
                Ok(v) => return Ok(v),
                Err(Failure::Fatal(e)) => return Err(e),
                Err(Failure::Retryable(msg)) => last = msg,
            }
        }
        Err(Error::Transport { attempts: policy.max_retries + 1, message: last })
    }

    fn score_echo(&self, prefix: &str, continuation: &str) -> Result<ScoredContinuation> {
        let body = json!({
            "model": self.endpoint.model_name,
            "prompt": format!("{prefix}{continuation}"),
            "max_tokens": 0,
            "echo": true,
            "logprobs": 0,
            "temperature": 0.0,
        });
        let resp = self.post(&body)?;
        let lp = &resp["choices"][0]["logprobs"];
        let (Some(tokens), Some(logprobs), Some(offsets)) = (
            lp["tokens"].as_array(),
            lp["token_logprobs"].as_array(),
            lp["text_offset"].as_array(),
        ) else {
            return Err(Error::Capability(format!(
                "endpoint did not return echoed prompt logprobs for model `{}`",
                self.endpoint.model_name
            )));
        };
        if tokens.len() != logprobs.len() || tokens.len() != offsets.len() {
            return Err(Error::Data("logprob arrays have mismatched lengths".into()));
        }
        // Offsets count characters of the echoed prompt.
        let boundary = prefix.chars().count() as u64;
        let mut out = Vec::new();
        for (off, lp) in offsets.iter().zip(logprobs) {
            let off = off.as_u64().ok_or_else(|| Error::Data("non-integer text offset".into()))?;
            if off < boundary {
                continue;
            }
            let v = lp
                .as_f64()
                .ok_or_else(|| Error::Data("missing logprob for continuation token".into()))?;
            out.push(v.min(0.0));
        }
        ScoredContinuation::new(prefix, continuation, out)
    }

    fn score_chunked(&self, prefix: &str, continuation: &str) -> Result<ScoredContinuation> {
        let mut context = prefix.to_string();
        let mut out = Vec::new();
        for segment in split_keep_leading_space(continuation) {
            let body = json!({
                "model": self.endpoint.model_name,
                "prompt": context,
                "max_tokens": 1,
                "logprobs": self.endpoint.chunked_top_logprobs,
                "temperature": 0.0,
            });
            let resp = self.post(&body)?;
            let top = resp["choices"][0]["logprobs"]["top_logprobs"][0]
                .as_object()
                .ok_or_else(|| {
                    Error::Capability("endpoint returned no top logprobs for chunked scoring".into())
                })?;
            let wanted = segment.trim();
            let lp = top
                .iter()
                .find(|(tok, _)| tok.trim() == wanted)
                .and_then(|(_, v)| v.as_f64())
                .ok_or_else(|| {
                    Error::Capability(format!(
                        "segment `{wanted}` not among the top {} alternatives",
                        self.endpoint.chunked_top_logprobs
                    ))
                })?;
            out.push(lp.min(0.0));
            context.push_str(segment);
        }
        ScoredContinuation::new(prefix, continuation, out)
    }
}

fn split_keep_leading_space(s: &str) -> Vec<&str> {
    let mut out = Vec::new();
    let mut start = 0;
    let mut seen_text = false;
    for (i, ch) in s.char_indices() {
        if ch.is_whitespace() {
            if seen_text {
                out.push(&s[start..i]);
                start = i;
                seen_text = false;
            }
        } else {
            seen_text = true;
        }
    }
    if seen_text {
        out.push(&s[start..]);
    }
    out
}

impl LanguageModel for HttpModel {
    fn model_name(&self) -> &str {
        &self.endpoint.model_name
    }

    fn complete(&self, prompt: &str, params: &SamplingParams) -> Result<String> {
        let mut body = json!({
            "model": self.endpoint.model_name,
            "prompt": prompt,
            "max_tokens": params.max_tokens,
            "temperature": params.temperature,
            "top_p": params.nucleus_mass,
        });
        if !params.stop_markers.is_empty() {
            body["stop"] = json!(params.stop_markers);
        }
        if let Some(seed) = params.seed {
            body["seed"] = json!(seed);
        }
        let resp = self.post(&body)?;
        resp["choices"][0]["text"]
            .as_str()
            .map(str::to_string)
            .ok_or(Error::EmptyGeneration)
    }

    fn score(&self, prefix: &str, continuation: &str) -> Result<ScoredContinuation> {
        match self.endpoint.scoring_mode {
            ScoringMode::Echo => self.score_echo(prefix, continuation),
            ScoringMode::Chunked => self.score_chunked(prefix, continuation),
            ScoringMode::Auto => match self.score_echo(prefix, continuation) {
                Err(Error::Capability(_)) => self.score_chunked(prefix, continuation),
                other => other,
            },
        }
    }

    fn max_inflight(&self) -> usize {
        self.endpoint.max_inflight
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn segments_keep_leading_whitespace() {
        assert_eq!(split_keep_leading_space(" a bb  c"), vec![" a", " bb", "  c"]);
        assert_eq!(split_keep_leading_space("x"), vec!["x"]);
    }

    #[test]
    fn endpoint_validation() {
        let mut e = ModelEndpoint::new("http://localhost:1", "m");
        assert!(e.validate().is_ok());
        e.max_inflight = 0;
        assert!(matches!(HttpModel::new(e), Err(Error::Config(_))));
    }
}

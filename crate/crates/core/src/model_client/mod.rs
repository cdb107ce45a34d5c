//! Language-model access: sampling completions and teacher-forced scoring.
//!
//! Two backends implement [`LanguageModel`]: [`HttpModel`] talks to a
//! completions-style endpoint, [`MockModel`] replays a deterministic script.
//! [`ScoreCache`] persists scores per model so reruns skip the endpoint.

mod cache;
mod http;
mod mock;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};

pub use cache::ScoreCache;
pub use http::{HttpModel, ModelEndpoint, RetryPolicy, ScoringMode};
pub use mock::{make_mock_model, MockCompletion, MockModel, MockRule, MockScript};

/// Per-token log-probabilities of a continuation given a prefix.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScoredContinuation {
    pub prefix_hash: String,
    pub continuation_text: String,
    /// Natural-log probabilities, each `<= 0`.
    pub token_logprobs: Vec<f64>,
    pub token_count: usize,
}

impl ScoredContinuation {
    pub fn new(prefix: &str, continuation: &str, token_logprobs: Vec<f64>) -> Result<Self> {
        if token_logprobs.is_empty() {
            return Err(Error::Data(format!(
                "no token log-probabilities returned for continuation `{continuation}`"
            )));
        }
        if let Some(bad) = token_logprobs.iter().find(|lp| !(**lp <= 0.0)) {
            return Err(Error::Data(format!(
                "token log-probability {bad} is not <= 0"
            )));
        }
        Ok(ScoredContinuation {
            prefix_hash: digest_hex(prefix.as_bytes()),
            continuation_text: continuation.to_string(),
            token_count: token_logprobs.len(),
            token_logprobs,
        })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SamplingParams {
    pub temperature: f64,
    pub nucleus_mass: f64,
    pub max_tokens: usize,
    #[serde(default)]
    pub stop_markers: Vec<String>,
    #[serde(default)]
    pub seed: Option<u64>,
}

impl Default for SamplingParams {
    fn default() -> Self {
        SamplingParams {
            temperature: 0.7,
            nucleus_mass: 0.95,
            max_tokens: 512,
            stop_markers: vec!["\n\nQuestion:".to_string()],
            seed: None,
        }
    }
}

impl SamplingParams {
    pub fn validate(&self) -> Result<()> {
        if self.max_tokens < 1 {
            return Err(Error::Config("max_tokens must be >= 1".into()));
        }
        if !(self.temperature >= 0.0) {
            return Err(Error::Config("temperature must be >= 0".into()));
        }
        if !(self.nucleus_mass > 0.0 && self.nucleus_mass <= 1.0) {
            return Err(Error::Config("nucleus mass must lie in (0, 1]".into()));
        }
        Ok(())
    }

    pub fn with_seed(&self, seed: u64) -> Self {
        SamplingParams { seed: Some(seed), ..self.clone() }
    }
}

/// The two capabilities the landscape pipeline needs from a model.
pub trait LanguageModel: Send + Sync {
    fn model_name(&self) -> &str;

    /// Raw completion for `prompt`. Callers should go through
    /// [`sample_completion`], which applies the stop/empty contract.
    fn complete(&self, prompt: &str, params: &SamplingParams) -> Result<String>;

    /// Teacher-forced log-probabilities of `continuation` after `prefix`.
    fn score(&self, prefix: &str, continuation: &str) -> Result<ScoredContinuation>;

    /// Upper bound on concurrent requests this backend accepts.
    fn max_inflight(&self) -> usize {
        1
    }
}

/// Samples a completion and truncates it at the first stop marker.
pub fn sample_completion(
    model: &dyn LanguageModel,
    prompt: &str,
    params: &SamplingParams,
) -> Result<String> {
    if prompt.trim().is_empty() {
        return Err(Error::Argument("prompt is empty".into()));
    }
    params.validate()?;
    let raw = model.complete(prompt, params)?;
    let text = truncate_at_stop(&raw, &params.stop_markers);
    if text.trim().is_empty() {
        return Err(Error::EmptyGeneration);
    }
    Ok(text.to_string())
}

/// Scores `continuation` after `prefix`.
pub fn score_continuation(
    model: &dyn LanguageModel,
    prefix: &str,
    continuation: &str,
) -> Result<ScoredContinuation> {
    if continuation.trim().is_empty() {
        return Err(Error::Argument("continuation is empty".into()));
    }
    model.score(prefix, continuation)
}

/// Cache-aware scoring. Identical `(model, prefix, continuation)` triples hit
/// the cache without touching the model.
pub fn cached_score(
    cache: &ScoreCache,
    model: &dyn LanguageModel,
    prefix: &str,
    continuation: &str,
) -> Result<ScoredContinuation> {
    if continuation.trim().is_empty() {
        return Err(Error::Argument("continuation is empty".into()));
    }
    let key = ScoreCache::key(model.model_name(), prefix, continuation);
    if let Some(hit) = cache.get(&key) {
        return Ok(hit);
    }
    let scored = score_continuation(model, prefix, continuation)?;
    cache.insert(&key, &scored)?;
    Ok(scored)
}

/// A model paired with an optional cache.
#[derive(Clone, Copy)]
pub struct Scorer<'a> {
    pub model: &'a dyn LanguageModel,
    pub cache: Option<&'a ScoreCache>,
}

impl<'a> Scorer<'a> {
    pub fn new(model: &'a dyn LanguageModel, cache: Option<&'a ScoreCache>) -> Self {
        Scorer { model, cache }
    }

    pub fn score(&self, prefix: &str, continuation: &str) -> Result<ScoredContinuation> {
        match self.cache {
            Some(c) => cached_score(c, self.model, prefix, continuation),
            None => score_continuation(self.model, prefix, continuation),
        }
    }

    pub fn max_inflight(&self) -> usize {
        self.model.max_inflight()
    }
}

pub(crate) fn truncate_at_stop<'a>(text: &'a str, stops: &[String]) -> &'a str {
    let cut = stops
        .iter()
        .filter(|s| !s.is_empty())
        .filter_map(|s| text.find(s.as_str()))
        .min()
        .unwrap_or(text.len());
    &text[..cut]
}

pub fn digest_hex(bytes: &[u8]) -> String {
    hex::encode(Sha256::digest(bytes))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn stop_marker_truncates() {
        let stops = vec!["STOP".to_string(), "##".to_string()];
        assert_eq!(truncate_at_stop("abc ## def STOP", &stops), "abc ");
        assert_eq!(truncate_at_stop("plain", &stops), "plain");
    }

    #[test]
    fn scored_continuation_rejects_positive_logprobs() {
        assert!(ScoredContinuation::new("p", "c", vec![0.1]).is_err());
        assert!(ScoredContinuation::new("p", "c", vec![]).is_err());
        let ok = ScoredContinuation::new("p", "c", vec![0.0, -1.0]).unwrap();
        assert_eq!(ok.token_count, 2);
    }

    #[test]
    fn sampling_params_validation() {
        let mut p = SamplingParams::default();
        assert!(p.validate().is_ok());
        p.max_tokens = 0;
        assert!(matches!(p.validate(), Err(Error::Config(_))));
    }
}

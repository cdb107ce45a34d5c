use std::sync::atomic::{AtomicUsize, Ordering};

use serde::{Deserialize, Serialize};

use super::{LanguageModel, SamplingParams, ScoredContinuation};
use crate::error::{Error, Result};

/// Probability assigned to `token` when the scored prefix contains
/// `prefix_pattern`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MockRule {
    pub prefix_pattern: String,
    pub token: String,
    pub probability: f64,
}

/// Completion texts for prompts containing `prompt_pattern`; the sampling
/// seed picks one (`seed % texts.len()`).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MockCompletion {
    pub prompt_pattern: String,
    pub texts: Vec<String>,
}

/// Declarative behaviour of a [`MockModel`].
///
/// Continuations are tokenized on whitespace. When several rules match a
/// token, the one whose pattern occurs latest in the prefix wins; ties go to
/// the rule listed first.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MockScript {
    pub model_name: String,
    #[serde(default)]
    pub rules: Vec<MockRule>,
    pub default_probability: f64,
    #[serde(default)]
    pub completions: Vec<MockCompletion>,
    #[serde(default)]
    pub supports_logprobs: bool,
}

impl Default for MockScript {
    fn default() -> Self {
        MockScript {
            model_name: "mock".into(),
            rules: Vec::new(),
            default_probability: 1.0,
            completions: Vec::new(),
            supports_logprobs: true,
        }
    }
}

/// Deterministic in-process model. Thread-safe; answers never depend on
/// request interleaving.
#[derive(Debug)]
pub struct MockModel {
    script: MockScript,
    completion_calls: AtomicUsize,
    score_calls: AtomicUsize,
}

/// Validates `script` and wraps it as a model.
pub fn make_mock_model(script: MockScript) -> Result<MockModel> {
    let check = |p: f64, what: &str| {
        if p > 0.0 && p <= 1.0 {
            Ok(())
        } else {
            Err(Error::Config(format!("{what} probability {p} outside (0, 1]")))
        }
    };
    check(script.default_probability, "default")?;
    for r in &script.rules {
        check(r.probability, &format!("rule for token `{}`", r.token))?;
    }
    Ok(MockModel {
        script,
        completion_calls: AtomicUsize::new(0),
        score_calls: AtomicUsize::new(0),
    })
}

impl MockModel {
    pub fn script(&self) -> &MockScript {
        &self.script
    }

    pub fn completion_calls(&self) -> usize {
        self.completion_calls.load(Ordering::SeqCst)
    }

    pub fn score_calls(&self) -> usize {
        self.score_calls.load(Ordering::SeqCst)
    }

    fn token_probability(&self, prefix: &str, token: &str) -> f64 {
        let mut best: Option<(usize, f64)> = None;
        for rule in self.script.rules.iter().filter(|r| r.token == token) {
            let Some(pos) = prefix.rfind(rule.prefix_pattern.as_str()) else {
                continue;
            };
            let end = pos + rule.prefix_pattern.len();
            if best.map_or(true, |(b, _)| end > b) {
                best = Some((end, rule.probability));
            }
        }
        best.map_or(self.script.default_probability, |(_, p)| p)
    }
}

impl LanguageModel for MockModel {
    fn model_name(&self) -> &str {
        &self.script.model_name
    }

    fn complete(&self, prompt: &str, params: &SamplingParams) -> Result<String> {
        self.completion_calls.fetch_add(1, Ordering::SeqCst);
        let entry = self
            .script
            .completions
            .iter()
            .find(|c| prompt.contains(c.prompt_pattern.as_str()))
            .ok_or(Error::EmptyGeneration)?;
        if entry.texts.is_empty() {
            return Ok(String::new());
        }
        let pick = params.seed.unwrap_or(0) as usize % entry.texts.len();
        let text = &entry.texts[pick];
        // Honor max_tokens with whitespace tokens as the unit.
        let mut end = text.len();
        let mut count = 0;
        let mut in_token = false;
        for (i, ch) in text.char_indices() {
            if ch.is_whitespace() {
                in_token = false;
            } else if !in_token {
                in_token = true;
                count += 1;
                if count > params.max_tokens {
                    end = i;
                    break;
                }
            }
        }
        Ok(text[..end].trim_end().to_string())
    }

    fn score(&self, prefix: &str, continuation: &str) -> Result<ScoredContinuation> {
        self.score_calls.fetch_add(1, Ordering::SeqCst);
        if !self.script.supports_logprobs {
            return Err(Error::Capability(format!(
                "model `{}` does not expose token log-probabilities",
                self.script.model_name
            )));
        }
        let logprobs = continuation
            .split_whitespace()
            .map(|tok| self.token_probability(prefix, tok).ln())
            .collect();
        ScoredContinuation::new(prefix, continuation, logprobs)
    }
}

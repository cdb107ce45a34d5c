//! Chain-of-thought trajectories: prompting, sampling, thought segmentation,
//! answer extraction and the line-delimited trajectory record format.

use std::collections::HashMap;
use std::path::Path;
use std::sync::OnceLock;

use regex::Regex;
use serde::{Deserialize, Serialize};

use crate::dataset::{index_to_letter, Question};
use crate::error::{Error, Result};
use crate::features::state_distance;
use crate::model_client::{digest_hex, sample_completion, LanguageModel, SamplingParams, Scorer};
use crate::parallel;

/// Separator placed between the prompt and each thought when a state is
/// rebuilt, and between a state and any continuation scored after it.
pub const STATE_JOIN: &str = " ";

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Thought {
    pub text: String,
    /// 1-based position in the trajectory.
    pub index: usize,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum TrajectorySource {
    #[default]
    Sampled,
    Ingested,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct TrajectoryMeta {
    /// Sampling slot within the question (0-based).
    #[serde(default)]
    pub slot: usize,
    /// Degenerate completions discarded before this one was accepted.
    #[serde(default)]
    pub resamples: usize,
    /// The predicted answer came from the final-state distance argmin rather
    /// than an explicit declaration.
    #[serde(default)]
    pub answer_fallback: bool,
}

/// One sampled (or ingested) solution. States are rebuilt on demand from the
/// prompt and thoughts; see [`Trajectory::state_text`].
#[derive(Debug, Clone, PartialEq)]
pub struct Trajectory {
    pub question_id: String,
    pub prompt: String,
    pub thoughts: Vec<Thought>,
    /// Canonical choice index (correct choice is 0).
    pub predicted_index: Option<usize>,
    pub is_correct: Option<bool>,
    pub prompt_fingerprint: String,
    pub sampling_params: Option<SamplingParams>,
    pub source: TrajectorySource,
    pub meta: TrajectoryMeta,
}

impl Trajectory {
    pub fn n(&self) -> usize {
        self.thoughts.len()
    }

    /// State `s_i`: the prompt followed by the first `i` thoughts.
    pub fn state_text(&self, i: usize) -> String {
        let mut s = self.prompt.clone();
        for t in &self.thoughts[..i.min(self.thoughts.len())] {
            s.push_str(STATE_JOIN);
            s.push_str(&t.text);
        }
        s
    }

    pub fn set_prediction(&mut self, predicted: Option<usize>) {
        self.predicted_index = predicted;
        self.is_correct = predicted.map(|p| p == 0);
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum PromptTemplate {
    CotFewshot,
    #[default]
    CotZeroshot,
}

/// Worked example for the few-shot template.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FewshotExemplar {
    pub question: String,
    pub choices: Vec<String>,
    pub reasoning: String,
    pub answer_index: usize,
}

fn placeholder_exemplars() -> Vec<FewshotExemplar> {
    vec![
        FewshotExemplar {
            question: "A box holds 3 red balls and 2 blue balls. How many balls are in the box?".into(),
            choices: vec!["4".into(), "5".into(), "6".into(), "7".into()],
            reasoning: "There are 3 red balls. There are 2 blue balls. Together that is 3 + 2 = 5 balls.".into(),
            answer_index: 1,
        },
        FewshotExemplar {
            question: "Which of these is a mammal?".into(),
            choices: vec!["Shark".into(), "Eagle".into(), "Dolphin".into()],
            reasoning: "Sharks are fish. Eagles are birds. Dolphins breathe air and nurse their young, so they are mammals.".into(),
            answer_index: 2,
        },
    ]
}

fn choice_block(choices: &[&str]) -> String {
    choices
        .iter()
        .enumerate()
        .map(|(i, c)| format!("({}) {}", index_to_letter(i), c))
        .collect::<Vec<_>>()
        .join(" ")
}

/// Renders the prompt (state `s_0`). Choices appear in source order so the
/// canonical reordering never leaks into what the model sees.
pub fn render_prompt(
    q: &Question,
    template: PromptTemplate,
    exemplars: Option<&[FewshotExemplar]>,
) -> String {
    let target = format!(
        "Question: {}\nAnswer Choices: {}\nAnswer: Let's think step by step.",
        q.stem.trim(),
        choice_block(&q.original_choices())
    );
    match template {
        PromptTemplate::CotZeroshot => target,
        PromptTemplate::CotFewshot => {
            let owned;
            let shots = match exemplars {
                Some(e) => e,
                None => {
                    owned = placeholder_exemplars();
                    &owned[..]
                }
            };
            let mut out = String::new();
            for ex in shots {
                let choices: Vec<&str> = ex.choices.iter().map(String::as_str).collect();
                out.push_str(&format!(
                    "Question: {}\nAnswer Choices: {}\nAnswer: Let's think step by step. {} The answer is {}.\n\n",
                    ex.question.trim(),
                    choice_block(&choices),
                    ex.reasoning.trim(),
                    index_to_letter(ex.answer_index)
                ));
            }
            out.push_str(&target);
            out
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum SegmentationMode {
    #[default]
    Period,
    OverSplit,
    UnderSplit,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SamplingConfig {
    /// Trajectories per question.
    pub per_question: usize,
    /// Number of questions drawn for the run.
    pub questions: usize,
    pub template: PromptTemplate,
    #[serde(default)]
    pub exemplars: Option<Vec<FewshotExemplar>>,
    #[serde(default)]
    pub segmentation: SegmentationMode,
    /// Extra attempts per slot for degenerate completions.
    pub resample_budget: usize,
}

impl Default for SamplingConfig {
    fn default() -> Self {
        SamplingConfig {
            per_question: 10,
            questions: 50,
            template: PromptTemplate::CotZeroshot,
            exemplars: None,
            segmentation: SegmentationMode::Period,
            resample_budget: 3,
        }
    }
}

impl SamplingConfig {
    pub fn validate(&self) -> Result<()> {
        if self.per_question < 1 {
            return Err(Error::Config("trajectories per question must be >= 1".into()));
        }
        Ok(())
    }
}

fn is_terminal(c: char) -> bool {
    matches!(c, '.' | '!' | '?')
}

/// Splits `text` at boundary characters. A `.` or `,` between two digits is
/// never a boundary; runs of boundary characters stay with the preceding
/// fragment.
fn split_at_boundaries(text: &str, is_boundary: impl Fn(char) -> bool) -> Vec<String> {
    let chars: Vec<char> = text.chars().collect();
    let mut out = Vec::new();
    let mut cur = String::new();
    let mut i = 0;
    while i < chars.len() {
        let c = chars[i];
        cur.push(c);
        let numeric = (c == '.' || c == ',')
            && i > 0
            && chars[i - 1].is_ascii_digit()
            && chars.get(i + 1).is_some_and(|n| n.is_ascii_digit());
        if is_boundary(c) && !numeric {
            while i + 1 < chars.len() && is_boundary(chars[i + 1]) {
                i += 1;
                cur.push(chars[i]);
            }
            out.push(std::mem::take(&mut cur));
        }
        i += 1;
    }
    out.push(cur);
    out.into_iter()
        .map(|s| s.trim().to_string())
        .filter(|s| s.chars().any(char::is_alphanumeric))
        .collect()
}

/// Splits a response into thoughts.
///
/// Returns [`Error::EmptyGeneration`] when nothing survives segmentation so
/// samplers can resample.
pub fn segment_thoughts(response: &str, mode: SegmentationMode) -> Result<Vec<Thought>> {
    let pieces = match mode {
        SegmentationMode::Period => split_at_boundaries(response, is_terminal),
        SegmentationMode::OverSplit => split_at_boundaries(response, |c| is_terminal(c) || c == ','),
        SegmentationMode::UnderSplit => split_at_boundaries(response, is_terminal)
            .chunks(2)
            .map(|pair| pair.join(" "))
            .collect(),
    };
    if pieces.is_empty() {
        return Err(Error::EmptyGeneration);
    }
    Ok(pieces
        .into_iter()
        .enumerate()
        .map(|(i, text)| Thought { text, index: i + 1 })
        .collect())
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Declaration {
    /// Canonical index named by an explicit declaration.
    Found(usize),
    /// A declaration naming more than one option.
    Ambiguous,
    None,
}

fn declaration_patterns() -> &'static [Regex] {
    static PATTERNS: OnceLock<Vec<Regex>> = OnceLock::new();
    PATTERNS.get_or_init(|| {
        vec![
            Regex::new(r"(?i:answer)\s*(?i:is|:)\s*:?\s*\(?([A-Z])\b\)?(.*)$").unwrap(),
            Regex::new(r"\(([A-Z])\)\s*[.!]?\s*()$").unwrap(),
        ]
    })
}

fn is_alternative(rest: &str) -> bool {
    static ALT: OnceLock<Regex> = OnceLock::new();
    ALT.get_or_init(|| Regex::new(r"^\s*(?i:or|and|/|,|&)\s*\(?[A-Z]\b").unwrap())
        .is_match(rest)
}

/// Scans thoughts last-first for an explicit answer declaration.
pub fn declared_answer(thoughts: &[Thought], q: &Question) -> Declaration {
    for t in thoughts.iter().rev() {
        for re in declaration_patterns() {
            let Some(caps) = re.captures(&t.text) else { continue };
            if is_alternative(caps.get(2).map_or("", |m| m.as_str())) {
                return Declaration::Ambiguous;
            }
            let letter = caps[1].chars().next().expect("one letter captured");
            let original = (letter as u8 - b'A') as usize;
            if let Some(canonical) = q.canonical_from_original(original) {
                return Declaration::Found(canonical);
            }
        }
    }
    Declaration::None
}

/// Lowest-index argmin; `None` for an empty slice.
pub fn argmin(values: &[f64]) -> Option<usize> {
    let mut best: Option<(usize, f64)> = None;
    for (i, &v) in values.iter().enumerate() {
        if best.map_or(true, |(_, b)| v < b) {
            best = Some((i, v));
        }
    }
    best.map(|(i, _)| i)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct AnswerExtraction {
    pub index: usize,
    pub fallback: bool,
}

/// Resolves a trajectory's predicted choice: an explicit declaration when
/// present, otherwise the nearest choice to the final state.
pub fn extract_answer(traj: &Trajectory, q: &Question, scorer: &Scorer<'_>) -> Result<AnswerExtraction> {
    extract_answer_with(traj, q, || final_state_distances(traj, q, scorer))
}

/// As [`extract_answer`], with the final-state distances supplied lazily.
pub fn extract_answer_with(
    traj: &Trajectory,
    q: &Question,
    distances: impl FnOnce() -> Result<Vec<f64>>,
) -> Result<AnswerExtraction> {
    if traj.thoughts.is_empty() {
        return Err(Error::Validation("trajectory has no thoughts".into()));
    }
    match declared_answer(&traj.thoughts, q) {
        Declaration::Found(index) => Ok(AnswerExtraction { index, fallback: false }),
        Declaration::Ambiguous | Declaration::None => {
            let d = distances()?;
            let index = argmin(&d).ok_or_else(|| Error::Data("no distances for fallback".into()))?;
            Ok(AnswerExtraction { index, fallback: true })
        }
    }
}

fn final_state_distances(traj: &Trajectory, q: &Question, scorer: &Scorer<'_>) -> Result<Vec<f64>> {
    let state = traj.state_text(traj.n());
    q.choices
        .iter()
        .map(|c| state_distance(&scorer.score(&state, &format!("{STATE_JOIN}{c}"))?))
        .collect()
}

fn slot_seed(base: u64, question_id: &str, slot: usize, attempt: usize) -> u64 {
    let digest = digest_hex(format!("{base}\u{0}{question_id}\u{0}{slot}\u{0}{attempt}").as_bytes());
    u64::from_str_radix(&digest[..16], 16).expect("hex digest")
}

/// Samples `cfg.per_question` trajectories for one canonicalized question.
pub fn sample_trajectories(
    q: &Question,
    cfg: &SamplingConfig,
    model: &dyn LanguageModel,
    params: &SamplingParams,
    scorer: &Scorer<'_>,
) -> Result<Vec<Trajectory>> {
    cfg.validate()?;
    let prompt = render_prompt(q, cfg.template, cfg.exemplars.as_deref());
    let fingerprint = digest_hex(prompt.as_bytes());
    let base_seed = params.seed.unwrap_or(0);
    let mut out = Vec::with_capacity(cfg.per_question);
    for slot in 0..cfg.per_question {
        let mut accepted = None;
        for attempt in 0..=cfg.resample_budget {
            let slot_params = params.with_seed(slot_seed(base_seed, &q.id, slot, attempt));
            let thoughts = match sample_completion(model, &prompt, &slot_params) {
                Ok(text) => segment_thoughts(&text, cfg.segmentation),
                Err(e) => Err(e),
            };
            match thoughts {
                Ok(thoughts) => {
                    accepted = Some((thoughts, slot_params, attempt));
                    break;
                }
                Err(Error::EmptyGeneration) => continue,
                Err(e) => return Err(e),
            }
        }
        let Some((thoughts, slot_params, resamples)) = accepted else {
            return Err(Error::SamplingExhausted {
                question_id: q.id.clone(),
                slot,
                partial_count: out.len(),
                partial: Box::new(out),
            });
        };
        let mut traj = Trajectory {
            question_id: q.id.clone(),
            prompt: prompt.clone(),
            thoughts,
            predicted_index: None,
            is_correct: None,
            prompt_fingerprint: fingerprint.clone(),
            sampling_params: Some(slot_params),
            source: TrajectorySource::Sampled,
            meta: TrajectoryMeta { slot, resamples, answer_fallback: false },
        };
        let answer = extract_answer(&traj, q, scorer)?;
        traj.set_prediction(Some(answer.index));
        traj.meta.answer_fallback = answer.fallback;
        out.push(traj);
    }
    Ok(out)
}

/// Samples every question, up to the model's in-flight limit at once.
/// Output order is question order, then slot order.
pub fn sample_all(
    questions: &[Question],
    cfg: &SamplingConfig,
    model: &dyn LanguageModel,
    params: &SamplingParams,
    scorer: &Scorer<'_>,
) -> Result<Vec<Trajectory>> {
    let per_question = parallel::map_bounded(questions, model.max_inflight(), |q| {
        sample_trajectories(q, cfg, model, params, scorer)
    });
    let mut out = Vec::new();
    for r in per_question {
        out.extend(r?);
    }
    Ok(out)
}

/// Line-delimited trajectory record. `predicted` is an index into the
/// question's choices in source-file order.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrajectoryRecord {
    pub question_id: String,
    pub thoughts: Vec<String>,
    pub predicted: Option<usize>,
    #[serde(default)]
    pub params: Option<SamplingParams>,
    #[serde(default)]
    pub source: TrajectorySource,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub prompt: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub is_correct: Option<bool>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub prompt_fingerprint: Option<String>,
    #[serde(default)]
    pub meta: TrajectoryMeta,
}

impl TrajectoryRecord {
    pub fn from_trajectory(t: &Trajectory, q: &Question) -> Self {
        TrajectoryRecord {
            question_id: t.question_id.clone(),
            thoughts: t.thoughts.iter().map(|th| th.text.clone()).collect(),
            predicted: t.predicted_index.map(|p| q.choice_permutation[p]),
            params: t.sampling_params.clone(),
            source: t.source,
            prompt: Some(t.prompt.clone()),
            is_correct: t.is_correct,
            prompt_fingerprint: Some(t.prompt_fingerprint.clone()),
            meta: t.meta.clone(),
        }
    }

    /// Validates against the question it cites and converts to canonical
    /// indices. A missing prompt is rendered with the zero-shot template.
    pub fn into_trajectory(self, q: &Question) -> Result<Trajectory> {
        if self.thoughts.is_empty() {
            return Err(Error::Validation(format!(
                "trajectory for `{}` has an empty thought list",
                self.question_id
            )));
        }
        if let Some(i) = self.thoughts.iter().position(|t| t.trim().is_empty()) {
            return Err(Error::Validation(format!(
                "trajectory for `{}`: thought {} is empty",
                self.question_id,
                i + 1
            )));
        }
        let predicted = match self.predicted {
            Some(p) => Some(q.canonical_from_original(p).ok_or_else(|| {
                Error::Validation(format!(
                    "trajectory for `{}` predicts choice {p} but the question has {}",
                    self.question_id,
                    q.k()
                ))
            })?),
            None => None,
        };
        let prompt = self
            .prompt
            .unwrap_or_else(|| render_prompt(q, PromptTemplate::CotZeroshot, None));
        let prompt_fingerprint = digest_hex(prompt.as_bytes());
        let mut t = Trajectory {
            question_id: self.question_id,
            prompt,
            thoughts: self
                .thoughts
                .into_iter()
                .enumerate()
                .map(|(i, text)| Thought { text: text.trim().to_string(), index: i + 1 })
                .collect(),
            predicted_index: None,
            is_correct: None,
            prompt_fingerprint,
            sampling_params: self.params,
            source: self.source,
            meta: self.meta,
        };
        t.set_prediction(predicted);
        Ok(t)
    }
}

/// Parses trajectory records, binding each to its question.
pub fn parse_trajectories(text: &str, questions: &[Question]) -> Result<Vec<Trajectory>> {
    let by_id: HashMap<&str, &Question> = questions.iter().map(|q| (q.id.as_str(), q)).collect();
    let mut out = Vec::new();
    for (n, line) in text.lines().enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        let rec: TrajectoryRecord = serde_json::from_str(line)
            .map_err(|e| Error::Parse { line: n + 1, message: e.to_string() })?;
        let q = by_id
            .get(rec.question_id.as_str())
            .ok_or_else(|| Error::Reference(rec.question_id.clone()))?;
        out.push(rec.into_trajectory(q)?);
    }
    Ok(out)
}

/// Reads externally produced trajectories (linearized by their producer).
pub fn ingest_trajectories(path: &Path, questions: &[Question]) -> Result<Vec<Trajectory>> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let mut trajs = parse_trajectories(&text, questions)?;
    for t in &mut trajs {
        t.source = TrajectorySource::Ingested;
    }
    Ok(trajs)
}

/// Serializes trajectories as one record per line.
pub fn trajectories_to_jsonl(trajs: &[Trajectory], questions: &[Question]) -> Result<String> {
    let by_id: HashMap<&str, &Question> = questions.iter().map(|q| (q.id.as_str(), q)).collect();
    let mut out = String::new();
    for t in trajs {
        let q = by_id
            .get(t.question_id.as_str())
            .ok_or_else(|| Error::Reference(t.question_id.clone()))?;
        out.push_str(&serde_json::to_string(&TrajectoryRecord::from_trajectory(t, q))?);
        out.push('\n');
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::dataset::reorder_choices;
    use crate::model_client::{make_mock_model, MockCompletion, MockRule, MockScript};
    use proptest::prelude::*;

    fn texts(ts: &[Thought]) -> Vec<&str> {
        ts.iter().map(|t| t.text.as_str()).collect()
    }

    fn question() -> Question {
        let ch = ["10", "12", "14", "16", "18"].iter().map(|s| s.to_string()).collect();
        reorder_choices(&Question::new("q1", "What is 6 + 6?", ch, 1).unwrap())
    }

    #[test]
    fn period_split() {
        let t = segment_thoughts("A. B. C.", SegmentationMode::Period).unwrap();
        assert_eq!(texts(&t), vec!["A.", "B.", "C."]);
        assert_eq!(t.iter().map(|t| t.index).collect::<Vec<_>>(), vec![1, 2, 3]);
    }

    #[test]
    fn under_split_merges_pairs() {
        let t = segment_thoughts("A. B. C.", SegmentationMode::UnderSplit).unwrap();
        assert_eq!(texts(&t), vec!["A. B.", "C."]);
    }

    #[test]
    fn over_split_adds_commas() {
        let t = segment_thoughts("First, add 1,000 and 2. Done!", SegmentationMode::OverSplit).unwrap();
        assert_eq!(texts(&t), vec!["First,", "add 1,000 and 2.", "Done!"]);
    }

    #[test]
    fn decimal_is_not_a_boundary() {
        let t = segment_thoughts("x = 3.5 is the value.", SegmentationMode::Period).unwrap();
        assert_eq!(texts(&t), vec!["x = 3.5 is the value."]);
    }

    #[test]
    fn punctuation_runs_and_empty_input() {
        let t = segment_thoughts("Why?! Because... ok", SegmentationMode::Period).unwrap();
        assert_eq!(texts(&t), vec!["Why?!", "Because...", "ok"]);
        assert!(matches!(segment_thoughts(" ... ", SegmentationMode::Period), Err(Error::EmptyGeneration)));
    }

    #[test]
    fn states_rebuild_from_prompt_and_thoughts() {
        let q = question();
        let rec = TrajectoryRecord {
            question_id: "q1".into(),
            thoughts: vec!["Six plus six.".into(), "The answer is B.".into()],
            predicted: Some(1),
            params: None,
            source: TrajectorySource::Sampled,
            prompt: Some("P".into()),
            is_correct: None,
            prompt_fingerprint: None,
            meta: TrajectoryMeta::default(),
        };
        let t = rec.into_trajectory(&q).unwrap();
        assert_eq!(t.state_text(0), "P");
        assert_eq!(t.state_text(2), "P Six plus six. The answer is B.");
        assert_eq!(t.predicted_index, Some(0));
        assert_eq!(t.is_correct, Some(true));
    }

    fn traj_with(thoughts: &[&str]) -> Trajectory {
        Trajectory {
            question_id: "q1".into(),
            prompt: "P".into(),
            thoughts: thoughts
                .iter()
                .enumerate()
                .map(|(i, s)| Thought { text: s.to_string(), index: i + 1 })
                .collect(),
            predicted_index: None,
            is_correct: None,
            prompt_fingerprint: String::new(),
            sampling_params: None,
            source: TrajectorySource::Sampled,
            meta: TrajectoryMeta::default(),
        }
    }

    #[test]
    fn declared_answer_maps_through_permutation() {
        let q = question();
        // Source letter C is "14", canonical position 2 after moving "12" first.
        let t = traj_with(&["Compute.", "The answer is C."]);
        let a = extract_answer_with(&t, &q, || panic!("no fallback expected")).unwrap();
        assert_eq!(a, AnswerExtraction { index: 2, fallback: false });
        let b = traj_with(&["So we pick (B)."]);
        assert_eq!(extract_answer_with(&b, &q, || unreachable!()).unwrap().index, 0);
    }

    #[test]
    fn missing_or_ambiguous_declaration_falls_back() {
        let q = question();
        let none = traj_with(&["I am not sure."]);
        let a = extract_answer_with(&none, &q, || Ok(vec![0.1, 0.3, 0.6, 0.7, 0.8])).unwrap();
        assert_eq!(a, AnswerExtraction { index: 0, fallback: true });
        let amb = traj_with(&["The answer is B.", "The answer is C or D."]);
        let b = extract_answer_with(&amb, &q, || Ok(vec![0.5, 0.2, 0.6, 0.7, 0.8])).unwrap();
        assert_eq!(b, AnswerExtraction { index: 1, fallback: true });
        // Letters past k never match.
        let far = traj_with(&["The answer is Z."]);
        assert!(extract_answer_with(&far, &q, || Ok(vec![1.0; 5])).unwrap().fallback);
    }

    fn mock_for(texts: Vec<&str>) -> crate::model_client::MockModel {
        make_mock_model(MockScript {
            completions: vec![MockCompletion {
                prompt_pattern: "6 + 6".into(),
                texts: texts.into_iter().map(String::from).collect(),
            }],
            rules: vec![MockRule { prefix_pattern: "".into(), token: "12".into(), probability: 0.9 }],
            default_probability: 0.1,
            ..MockScript::default()
        })
        .unwrap()
    }

    #[test]
    fn samples_exactly_d_trajectories() {
        let q = question();
        let m = mock_for(vec!["Six and six make twelve. The answer is B."]);
        let scorer = Scorer::new(&m, None);
        let cfg = SamplingConfig { per_question: 10, ..SamplingConfig::default() };
        let ts = sample_trajectories(&q, &cfg, &m, &SamplingParams::default(), &scorer).unwrap();
        assert_eq!(ts.len(), 10);
        assert!(ts.iter().all(|t| t.thoughts == ts[0].thoughts && t.is_correct == Some(true)));
        assert_eq!(ts.iter().map(|t| t.meta.slot).collect::<Vec<_>>(), (0..10).collect::<Vec<_>>());

        let one = SamplingConfig { per_question: 1, ..cfg };
        let ts = sample_trajectories(&q, &one, &m, &SamplingParams::default(), &scorer).unwrap();
        assert_eq!(texts(&ts[0].thoughts), vec!["Six and six make twelve.", "The answer is B."]);
    }

    #[test]
    fn degenerate_completion_is_resampled() {
        let q = question();
        // The mock picks a text from the request seed, so which slots hit the
        // empty text is arbitrary; count resamples instead of predicting them.
        let m = mock_for(vec!["...", "Twelve. The answer is B."]);
        let scorer = Scorer::new(&m, None);
        let cfg = SamplingConfig { per_question: 8, ..SamplingConfig::default() };
        let ts = sample_trajectories(&q, &cfg, &m, &SamplingParams::default(), &scorer).unwrap();
        assert_eq!(ts.len(), 8);
        let total: usize = ts.iter().map(|t| t.meta.resamples).sum();
        assert!(total >= 1, "expected at least one resample");
        assert_eq!(m.completion_calls(), 8 + total);

        let dead = mock_for(vec!["..."]);
        let scorer = Scorer::new(&dead, None);
        match sample_trajectories(&q, &cfg, &dead, &SamplingParams::default(), &scorer) {
            Err(Error::SamplingExhausted { partial_count, slot, .. }) => {
                assert_eq!((partial_count, slot), (0, 0));
                assert_eq!(dead.completion_calls(), 4);
            }
            other => panic!("expected exhaustion, got {other:?}"),
        }
    }

    #[test]
    fn record_errors() {
        let q = question();
        let good = r#"{"question_id":"q1","thoughts":["a."],"predicted":1,"source":"ingested"}"#;
        let ts = parse_trajectories(good, std::slice::from_ref(&q)).unwrap();
        assert_eq!(ts[0].predicted_index, Some(0));
        let unknown = r#"{"question_id":"zz","thoughts":["a."],"predicted":null}"#;
        match parse_trajectories(unknown, std::slice::from_ref(&q)) {
            Err(Error::Reference(id)) => assert_eq!(id, "zz"),
            other => panic!("{other:?}"),
        }
        let empty = r#"{"question_id":"q1","thoughts":[],"predicted":null}"#;
        assert!(matches!(parse_trajectories(empty, std::slice::from_ref(&q)), Err(Error::Validation(_))));
    }

    proptest! {
        #[test]
        fn period_segmentation_is_idempotent(s in "[a1 .!?,]{0,40}") {
            if let Ok(first) = segment_thoughts(&s, SegmentationMode::Period) {
                let joined = first.iter().map(|t| t.text.as_str()).collect::<Vec<_>>().join(" ");
                let again = segment_thoughts(&joined, SegmentationMode::Period).unwrap();
                prop_assert_eq!(texts(&again), texts(&first));
            }
        }

        #[test]
        fn record_round_trip(thoughts in proptest::collection::vec("[a-z ]{0,8}[a-z]\\.", 1..5), pred in 0usize..5) {
            let q = question();
            let rec = TrajectoryRecord {
                question_id: "q1".into(),
                thoughts,
                predicted: Some(pred),
                params: None,
                source: TrajectorySource::Sampled,
                prompt: None,
                is_correct: None,
                prompt_fingerprint: None,
                meta: TrajectoryMeta::default(),
            };
            let t = rec.into_trajectory(&q).unwrap();
            let text = trajectories_to_jsonl(std::slice::from_ref(&t), std::slice::from_ref(&q)).unwrap();
            let back = parse_trajectories(&text, std::slice::from_ref(&q)).unwrap();
            prop_assert_eq!(&back[0], &t);
            prop_assert_eq!(t.is_correct, Some(pred == 1));
        }
    }
}

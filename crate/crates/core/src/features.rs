//! Perplexity-distance state features, choice anchors, the pooled feature
//! matrix and the per-state reasoning metrics.

use std::collections::HashMap;

use serde::{Deserialize, Serialize};

use crate::dataset::Question;
use crate::error::{Error, Result};
use crate::model_client::{ScoredContinuation, Scorer};
use crate::parallel;
use crate::trajectory::{argmin, Trajectory, STATE_JOIN};

/// Smallest probability admitted before taking logs.
pub const PROBABILITY_FLOOR: f64 = 1e-300;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StateFeature {
    /// Perplexity distance to each choice, each `>= 1`.
    pub raw_distances: Vec<f64>,
    /// `raw_distances` scaled to unit l1 norm.
    pub normalized: Vec<f64>,
    pub state_index: usize,
}

impl StateFeature {
    pub fn k(&self) -> usize {
        self.normalized.len()
    }

    /// Nearest choice (lowest index on ties).
    pub fn nearest_choice(&self) -> usize {
        argmin(&self.normalized).expect("state features are non-empty")
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AnchorFeature {
    pub choice_index: usize,
    pub vector: Vec<f64>,
}

/// Features and metric series for one trajectory, states `s_1..s_n`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FeatureTrajectory {
    pub question_id: String,
    #[serde(default)]
    pub slot: usize,
    pub features: Vec<StateFeature>,
    /// Feature of `s_0`, kept only when requested; never enters the matrix.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub initial: Option<StateFeature>,
    pub consistency: Vec<u8>,
    pub uncertainty: Vec<f64>,
    pub thought_perplexities: Vec<f64>,
    pub predicted_index: Option<usize>,
    pub is_correct: Option<bool>,
}

impl FeatureTrajectory {
    pub fn n(&self) -> usize {
        self.features.len()
    }

    pub fn k(&self) -> usize {
        self.features.first().map_or(0, StateFeature::k)
    }

    /// Assembles a trajectory from already computed state features and
    /// thought perplexities, deriving consistency and uncertainty.
    pub fn from_parts(
        question_id: impl Into<String>,
        slot: usize,
        features: Vec<StateFeature>,
        thought_perplexities: Vec<f64>,
        predicted_index: Option<usize>,
    ) -> Result<Self> {
        let last = features
            .last()
            .ok_or_else(|| Error::Argument("trajectory has no states".into()))?
            .clone();
        if thought_perplexities.len() != features.len() {
            return Err(Error::Argument(format!(
                "{} thought perplexities for {} states",
                thought_perplexities.len(),
                features.len()
            )));
        }
        let consistency = features
            .iter()
            .map(|f| consistency(f, &last))
            .collect::<Result<Vec<_>>>()?;
        let uncertainty = features
            .iter()
            .map(|f| uncertainty(&f.normalized))
            .collect::<Result<Vec<_>>>()?;
        let predicted_index = predicted_index.or(Some(last.nearest_choice()));
        Ok(FeatureTrajectory {
            question_id: question_id.into(),
            slot,
            features,
            initial: None,
            consistency,
            uncertainty,
            thought_perplexities,
            predicted_index,
            is_correct: predicted_index.map(|p| p == 0),
        })
    }
}

/// Which entry of the pooled matrix a column came from.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case", tag = "kind")]
pub enum ColumnRef {
    /// `state` is 0-based over `s_1..s_n`.
    State { trajectory: usize, state: usize },
    Anchor { choice: usize },
}

/// Pooled states followed by the `k` anchors, one column per point.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FeatureMatrix {
    pub k: usize,
    pub columns: Vec<Vec<f64>>,
    pub layout: Vec<ColumnRef>,
}

impl FeatureMatrix {
    pub fn n_columns(&self) -> usize {
        self.columns.len()
    }

    pub fn state_columns(&self) -> impl Iterator<Item = (usize, usize, usize)> + '_ {
        self.layout.iter().enumerate().filter_map(|(c, r)| match r {
            ColumnRef::State { trajectory, state } => Some((c, *trajectory, *state)),
            ColumnRef::Anchor { .. } => None,
        })
    }

    pub fn anchor_columns(&self) -> impl Iterator<Item = (usize, usize)> + '_ {
        self.layout.iter().enumerate().filter_map(|(c, r)| match r {
            ColumnRef::Anchor { choice } => Some((c, *choice)),
            ColumnRef::State { .. } => None,
        })
    }
}

fn mean_neg_logprob(logprobs: &[f64]) -> Result<f64> {
    if logprobs.is_empty() {
        return Err(Error::Argument("no token log-probabilities".into()));
    }
    let floor = PROBABILITY_FLOOR.ln();
    let sum: f64 = logprobs.iter().map(|lp| lp.max(floor).min(0.0)).sum();
    Ok(-sum / logprobs.len() as f64)
}

/// Perplexity distance `exp(-mean log p)` of a scored choice.
pub fn state_distance(scored: &ScoredContinuation) -> Result<f64> {
    Ok(mean_neg_logprob(&scored.token_logprobs)?.exp())
}

/// Length-normalized perplexity of a thought given the preceding state.
pub fn thought_perplexity(scored: &ScoredContinuation) -> Result<f64> {
    state_distance(scored)
}

/// l1-normalizes raw distances into a state feature.
pub fn normalize_distances(raw: Vec<f64>, state_index: usize) -> Result<StateFeature> {
    if raw.len() < 2 {
        return Err(Error::Argument(format!("need at least 2 distances, got {}", raw.len())));
    }
    if let Some(bad) = raw.iter().find(|d| !(d.is_finite() && **d >= 1.0)) {
        return Err(Error::Data(format!("perplexity distance {bad} is not a finite value >= 1")));
    }
    let sum: f64 = raw.iter().sum();
    let normalized = raw.iter().map(|d| d / sum).collect();
    Ok(StateFeature { raw_distances: raw, normalized, state_index })
}

/// Feature of the state whose text is `prefix`.
pub fn state_feature(
    prefix: &str,
    choices: &[String],
    scorer: &Scorer<'_>,
    state_index: usize,
) -> Result<StateFeature> {
    if choices.len() < 2 {
        return Err(Error::Argument("need at least 2 choices".into()));
    }
    let raw = choices
        .iter()
        .enumerate()
        .map(|(j, c)| {
            scorer
                .score(prefix, &format!("{STATE_JOIN}{c}"))
                .and_then(|s| state_distance(&s))
                .map_err(|e| Error::Scoring { state: state_index, choice: Some(j), source: Box::new(e) })
        })
        .collect::<Result<Vec<_>>>()?;
    normalize_distances(raw, state_index)
}

/// Landmark for choice `j`: zero at `j`, `1/k` elsewhere.
pub fn anchor_feature(j: usize, k: usize) -> Result<AnchorFeature> {
    if k < 2 || j >= k {
        return Err(Error::Argument(format!("anchor index {j} invalid for k = {k}")));
    }
    let w = 1.0 / k as f64;
    Ok(AnchorFeature {
        choice_index: j,
        vector: (0..k).map(|m| if m == j { 0.0 } else { w }).collect(),
    })
}

/// 1 when the state's nearest choice matches the final state's.
pub fn consistency(f_i: &StateFeature, f_n: &StateFeature) -> Result<u8> {
    if f_i.k() != f_n.k() {
        return Err(Error::Argument(format!("dimension mismatch: {} vs {}", f_i.k(), f_n.k())));
    }
    Ok(u8::from(f_i.nearest_choice() == f_n.nearest_choice()))
}

/// Entropy in nats of a normalized feature, with `0 ln 0 = 0`.
pub fn uncertainty(normalized: &[f64]) -> Result<f64> {
    let sum: f64 = normalized.iter().sum();
    if normalized.is_empty() || normalized.iter().any(|d| !(*d >= 0.0)) || (sum - 1.0).abs() > 1e-9 {
        return Err(Error::Argument(format!("feature is not normalized (sum {sum})")));
    }
    let h: f64 = normalized
        .iter()
        .filter(|d| **d > 0.0)
        .map(|d| -d * d.ln())
        .sum();
    Ok(h.clamp(0.0, (normalized.len() as f64).ln()))
}

/// Scores every state of `traj` against the canonical choices of `q`.
///
/// Issues `n·k + n` scoring requests (`+k` with `include_initial`).
pub fn featurize_trajectory(
    traj: &Trajectory,
    q: &Question,
    scorer: &Scorer<'_>,
    include_initial: bool,
) -> Result<FeatureTrajectory> {
    if traj.thoughts.is_empty() {
        return Err(Error::Validation("trajectory has no thoughts".into()));
    }
    if traj.question_id != q.id {
        return Err(Error::Argument(format!(
            "trajectory cites `{}` but question is `{}`",
            traj.question_id, q.id
        )));
    }
    let n = traj.n();
    let mut features = Vec::with_capacity(n);
    let mut perplexities = Vec::with_capacity(n);
    let mut prev = traj.state_text(0);
    let initial = if include_initial {
        Some(state_feature(&prev, &q.choices, scorer, 0)?)
    } else {
        None
    };
    for i in 1..=n {
        let thought = &traj.thoughts[i - 1].text;
        let scored = scorer
            .score(&prev, &format!("{STATE_JOIN}{thought}"))
            .map_err(|e| Error::Scoring { state: i, choice: None, source: Box::new(e) })?;
        perplexities.push(thought_perplexity(&scored)?);
        let state = traj.state_text(i);
        features.push(state_feature(&state, &q.choices, scorer, i)?);
        prev = state;
    }
    let mut ft = FeatureTrajectory::from_parts(
        traj.question_id.clone(),
        traj.meta.slot,
        features,
        perplexities,
        traj.predicted_index,
    )?;
    ft.initial = initial;
    Ok(ft)
}

/// Featurizes many trajectories, up to the scorer's in-flight limit at once.
/// Output order matches input order.
pub fn featurize_all(
    trajs: &[Trajectory],
    questions: &[Question],
    scorer: &Scorer<'_>,
    include_initial: bool,
) -> Result<Vec<FeatureTrajectory>> {
    let by_id: HashMap<&str, &Question> = questions.iter().map(|q| (q.id.as_str(), q)).collect();
    parallel::map_bounded(trajs, scorer.max_inflight(), |t| {
        let q = by_id
            .get(t.question_id.as_str())
            .ok_or_else(|| Error::Reference(t.question_id.clone()))?;
        featurize_trajectory(t, q, scorer, include_initial)
    })
    .into_iter()
    .collect()
}

/// Pools state features trajectory-major, state-minor, then appends the `k`
/// anchors.
pub fn build_feature_matrix(ftrajs: &[FeatureTrajectory], k: usize) -> Result<FeatureMatrix> {
    let mut columns = Vec::new();
    let mut layout = Vec::new();
    for (t, ft) in ftrajs.iter().enumerate() {
        for (s, f) in ft.features.iter().enumerate() {
            if f.k() != k {
                return Err(Error::Argument(format!(
                    "dimension mismatch: trajectory {t} state {s} has k = {}, expected {k}",
                    f.k()
                )));
            }
            columns.push(f.normalized.clone());
            layout.push(ColumnRef::State { trajectory: t, state: s });
        }
    }
    for j in 0..k {
        columns.push(anchor_feature(j, k)?.vector);
        layout.push(ColumnRef::Anchor { choice: j });
    }
    Ok(FeatureMatrix { k, columns, layout })
}

pub fn feature_trajectories_to_jsonl(ftrajs: &[FeatureTrajectory]) -> Result<String> {
    let mut out = String::new();
    for ft in ftrajs {
        out.push_str(&serde_json::to_string(ft)?);
        out.push('\n');
    }
    Ok(out)
}

pub fn parse_feature_trajectories(text: &str) -> Result<Vec<FeatureTrajectory>> {
    text.lines()
        .enumerate()
        .filter(|(_, l)| !l.trim().is_empty())
        .map(|(n, l)| {
            serde_json::from_str(l).map_err(|e| Error::Parse { line: n + 1, message: e.to_string() })
        })
        .collect()
}

/// Batch variant of [`normalize_distances`] used by synthetic generators.
pub fn normalize_many(exec: parallel::Execution, raws: &[Vec<f64>]) -> Result<Vec<StateFeature>> {
    parallel::map(exec, raws, |r| normalize_distances(r.clone(), 0))
        .into_iter()
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::dataset::reorder_choices;
    use crate::model_client::{make_mock_model, MockRule, MockScript};
    use crate::trajectory::{Thought, TrajectoryMeta, TrajectorySource};
    use proptest::prelude::*;

    fn scored(lps: Vec<f64>) -> ScoredContinuation {
        ScoredContinuation::new("p", "c", lps).unwrap()
    }

    #[test]
    fn distance_examples() {
        assert_eq!(state_distance(&scored(vec![0.0, 0.0])).unwrap(), 1.0);
        let d = state_distance(&scored(vec![0.5f64.ln(), 0.25f64.ln()])).unwrap();
        assert!((d - 8f64.sqrt()).abs() < 1e-12);
        let d = state_distance(&scored(vec![(0.125f64).ln(); 3])).unwrap();
        assert!((d - 8.0).abs() < 1e-12);
        assert!(matches!(mean_neg_logprob(&[]), Err(Error::Argument(_))));
    }

    #[test]
    fn thought_perplexity_examples() {
        assert!((thought_perplexity(&scored(vec![0.2f64.ln()])).unwrap() - 5.0).abs() < 1e-12);
        let a = thought_perplexity(&scored(vec![0.3f64.ln(); 2])).unwrap();
        let b = thought_perplexity(&scored(vec![0.3f64.ln(); 4])).unwrap();
        assert!((a - b).abs() < 1e-12);
    }

    #[test]
    fn normalization_examples() {
        let f = normalize_distances(vec![3.0, 3.0], 0).unwrap();
        assert_eq!(f.normalized, vec![0.5, 0.5]);
        let f = normalize_distances(vec![2.0, 6.0], 0).unwrap();
        assert_eq!(f.normalized, vec![0.25, 0.75]);
        let g = normalize_distances(vec![2.0 * 7.5, 6.0 * 7.5], 0).unwrap();
        assert_eq!(f.normalized, g.normalized);
        assert!(normalize_distances(vec![0.5, 2.0], 0).is_err());
    }

    #[test]
    fn anchor_examples() {
        let t = 1.0 / 3.0;
        assert_eq!(anchor_feature(0, 3).unwrap().vector, vec![0.0, t, t]);
        assert_eq!(anchor_feature(1, 3).unwrap().vector, vec![t, 0.0, t]);
        assert_eq!(anchor_feature(1, 2).unwrap().vector, vec![0.5, 0.0]);
        assert!(anchor_feature(3, 3).is_err());
    }

    #[test]
    fn consistency_examples() {
        let a = normalize_distances(vec![1.0, 9.0], 1).unwrap();
        let b = normalize_distances(vec![9.0, 1.0], 2).unwrap();
        assert_eq!(consistency(&a, &a).unwrap(), 1);
        assert_eq!(consistency(&a, &b).unwrap(), 0);
        let c = normalize_distances(vec![1.0, 2.0, 3.0], 0).unwrap();
        assert!(consistency(&a, &c).is_err());
    }

    #[test]
    fn uncertainty_examples() {
        assert!((uncertainty(&[0.25; 4]).unwrap() - 4f64.ln()).abs() < 1e-12);
        assert_eq!(uncertainty(&[1.0, 0.0]).unwrap(), 0.0);
        let u = uncertainty(&[0.25, 0.75]).unwrap();
        assert!((u - 0.562335).abs() < 1e-6);
        assert!(uncertainty(&[0.3, 0.3]).is_err());
    }

    fn question() -> Question {
        let ch = ["red", "green", "blue"].iter().map(|s| s.to_string()).collect();
        reorder_choices(&Question::new("q", "Pick", ch, 0).unwrap())
    }

    fn traj(thoughts: &[&str]) -> Trajectory {
        Trajectory {
            question_id: "q".into(),
            prompt: "Q".into(),
            thoughts: thoughts
                .iter()
                .enumerate()
                .map(|(i, s)| Thought { text: s.to_string(), index: i + 1 })
                .collect(),
            predicted_index: None,
            is_correct: None,
            prompt_fingerprint: String::new(),
            sampling_params: None,
            source: TrajectorySource::Ingested,
            meta: TrajectoryMeta::default(),
        }
    }

    #[test]
    fn single_state_is_consistent() {
        let m = make_mock_model(MockScript::default()).unwrap();
        let scorer = Scorer::new(&m, None);
        let ft = featurize_trajectory(&traj(&["Only."]), &question(), &scorer, false).unwrap();
        assert_eq!(ft.consistency, vec![1]);
        // Uniform scores: maximal uncertainty everywhere.
        assert!((ft.uncertainty[0] - 3f64.ln()).abs() < 1e-12);
        assert_eq!(m.score_calls(), 1 * 3 + 1);
    }

    #[test]
    fn argmin_flip_at_last_state() {
        let rule = |pat: &str, tok: &str, p: f64| MockRule {
            prefix_pattern: pat.into(),
            token: tok.into(),
            probability: p,
        };
        let script = MockScript {
            rules: vec![rule("think green", "green", 0.9), rule("say red", "red", 0.99)],
            default_probability: 0.1,
            ..MockScript::default()
        };
        let m = make_mock_model(script).unwrap();
        let scorer = Scorer::new(&m, None);
        let t = traj(&["I think green.", "Still think green.", "Finally say red."]);
        let ft = featurize_trajectory(&t, &question(), &scorer, true).unwrap();
        assert_eq!(ft.consistency, vec![0, 0, 1]);
        assert_eq!(ft.predicted_index, Some(0));
        assert_eq!(ft.is_correct, Some(true));
        assert!(ft.initial.is_some());
        assert_eq!(m.score_calls(), 3 * 3 + 3 + 3);
    }

    #[test]
    fn scoring_errors_carry_coordinates() {
        let m = make_mock_model(MockScript { supports_logprobs: false, ..MockScript::default() }).unwrap();
        let scorer = Scorer::new(&m, None);
        let err = featurize_trajectory(&traj(&["a."]), &question(), &scorer, false).unwrap_err();
        assert!(matches!(err, Error::Scoring { state: 1, choice: None, .. }));
        assert!(matches!(err.root(), Error::Capability(_)));
    }

    fn ft(n: usize, k: usize) -> FeatureTrajectory {
        let feats = (0..n)
            .map(|i| normalize_distances((0..k).map(|j| 1.0 + (i + j) as f64).collect(), i).unwrap())
            .collect();
        FeatureTrajectory::from_parts("q", 0, feats, vec![1.0; n], None).unwrap()
    }

    #[test]
    fn matrix_shapes() {
        let m = build_feature_matrix(&[ft(1, 2)], 2).unwrap();
        assert_eq!((m.k, m.n_columns()), (2, 3));
        let m = build_feature_matrix(&[ft(3, 4), ft(3, 4)], 4).unwrap();
        assert_eq!(m.n_columns(), 10);
        assert_eq!(m.layout[4], ColumnRef::State { trajectory: 1, state: 1 });
        for (c, j) in m.anchor_columns() {
            assert_eq!(m.columns[c], anchor_feature(j, 4).unwrap().vector);
        }
        assert!(build_feature_matrix(&[ft(2, 3), ft(2, 4)], 3).is_err());
    }

    proptest! {
        #[test]
        fn consistency_invariant_under_monotone_transform(
            raw in proptest::collection::vec(1.0f64..50.0, 2..7),
            last in proptest::collection::vec(1.0f64..50.0, 2..7),
            power in 0.2f64..4.0,
            shift in 0.0f64..10.0,
        ) {
            let k = raw.len().min(last.len());
            let (raw, last) = (raw[..k].to_vec(), last[..k].to_vec());
            let t = |v: &[f64]| v.iter().map(|x| x.powf(power) + shift).collect::<Vec<_>>();
            let a = consistency(&normalize_distances(raw.clone(), 0).unwrap(), &normalize_distances(last.clone(), 1).unwrap()).unwrap();
            let b = consistency(&normalize_distances(t(&raw), 0).unwrap(), &normalize_distances(t(&last), 1).unwrap()).unwrap();
            prop_assert_eq!(a, b);
        }
    }
}

//! Trajectory verifier: fixed-length summaries, a from-scratch random
//! forest, and verifier-weighted majority voting.

use std::collections::BTreeMap;
use std::path::Path;

use rand::seq::index::sample as sample_indices;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::features::FeatureTrajectory;
use crate::landscape::bin_of;
use crate::parallel::{self, Execution};

pub const FORMAT: &str = "lot-verifier/1";

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct SummaryScheme {
    pub bins: usize,
    pub k_max: usize,
}

impl Default for SummaryScheme {
    fn default() -> Self {
        SummaryScheme { bins: 10, k_max: 5 }
    }
}

impl SummaryScheme {
    pub fn len(&self) -> usize {
        (self.k_max + 1) * self.bins
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    fn validate(&self) -> Result<()> {
        if self.bins < 1 || self.k_max < 1 {
            return Err(Error::Argument(format!(
                "summary needs bins >= 1 and k_max >= 1 (got {} and {})",
                self.bins, self.k_max
            )));
        }
        Ok(())
    }
}

/// Per bin: `k_max` feature slots followed by one consistency slot.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrajectorySummary {
    pub scheme: SummaryScheme,
    pub vector: Vec<f64>,
}

/// Feature vector reordered without labels: distance to the trajectory's own
/// prediction first, then the rest ascending, padded or truncated to `k_max`.
fn label_free_slots(normalized: &[f64], predicted: usize, k_max: usize) -> Vec<f64> {
    let mut rest: Vec<f64> =
        normalized.iter().enumerate().filter(|(j, _)| *j != predicted).map(|(_, v)| *v).collect();
    rest.sort_by(f64::total_cmp);
    let mut out = Vec::with_capacity(k_max);
    out.push(normalized[predicted]);
    out.extend(rest);
    out.truncate(k_max);
    out.resize(k_max, 1.0 / k_max as f64);
    out
}

pub fn summarize_trajectory(ft: &FeatureTrajectory, scheme: SummaryScheme) -> Result<TrajectorySummary> {
    scheme.validate()?;
    let n = ft.n();
    if n < 1 {
        return Err(Error::Argument(format!("trajectory {}#{} has no states", ft.question_id, ft.slot)));
    }
    let predicted = match ft.predicted_index {
        Some(p) if p < ft.k() => p,
        Some(p) => return Err(Error::Data(format!("prediction {p} out of range for k = {}", ft.k()))),
        None => ft.features[n - 1].nearest_choice(),
    };
    let width = scheme.k_max + 1;
    let mut sums = vec![vec![0.0; width]; scheme.bins];
    let mut counts = vec![0usize; scheme.bins];
    for (i, f) in ft.features.iter().enumerate() {
        let b = bin_of(i + 1, n, scheme.bins);
        for (acc, v) in sums[b].iter_mut().zip(label_free_slots(&f.normalized, predicted, scheme.k_max)) {
            *acc += v;
        }
        sums[b][scheme.k_max] += f64::from(ft.consistency[i]);
        counts[b] += 1;
    }
    let filled: Vec<usize> = (0..scheme.bins).filter(|b| counts[*b] > 0).collect();
    let mut vector = Vec::with_capacity(scheme.len());
    for b in 0..scheme.bins {
        // Empty bins copy the nearest non-empty bin, preferring the earlier one.
        let src = *filled.iter().min_by_key(|&&s| (s.abs_diff(b), s)).expect("n >= 1 fills a bin");
        vector.extend(sums[src].iter().map(|v| v / counts[src] as f64));
    }
    Ok(TrajectorySummary { scheme, vector })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum FeatureSubsample {
    Sqrt,
    All,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ForestParams {
    pub trees: usize,
    pub max_depth: usize,
    pub min_leaf: usize,
    pub feature_subsample: FeatureSubsample,
    pub seed: u64,
}

impl Default for ForestParams {
    fn default() -> Self {
        ForestParams { trees: 100, max_depth: 8, min_leaf: 2, feature_subsample: FeatureSubsample::Sqrt, seed: 0 }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "node", rename_all = "kebab-case")]
pub enum Node {
    Split { feature: usize, threshold: f64, left: usize, right: usize },
    Leaf { fraction: f64 },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Tree {
    pub nodes: Vec<Node>,
}

impl Tree {
    pub fn leaf_fraction(&self, x: &[f64]) -> f64 {
        let mut at = 0;
        loop {
            match &self.nodes[at] {
                Node::Leaf { fraction } => return *fraction,
                Node::Split { feature, threshold, left, right } => {
                    at = if x[*feature] <= *threshold { *left } else { *right };
                }
            }
        }
    }

    pub fn depth(&self) -> usize {
        fn walk(nodes: &[Node], at: usize) -> usize {
            match &nodes[at] {
                Node::Leaf { .. } => 0,
                Node::Split { left, right, .. } => 1 + walk(nodes, *left).max(walk(nodes, *right)),
            }
        }
        walk(&self.nodes, 0)
    }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct TrainingTags {
    pub dataset: String,
    pub model: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct VerifierModel {
    pub format: String,
    pub params: ForestParams,
    pub scheme: SummaryScheme,
    pub tags: TrainingTags,
    pub examples: usize,
    pub positives: usize,
    pub trees: Vec<Tree>,
}

struct Builder<'a> {
    x: &'a [Vec<f64>],
    y: &'a [bool],
    params: &'a ForestParams,
    m_features: usize,
    nodes: Vec<Node>,
}

fn gini(pos: usize, total: usize) -> f64 {
    if total == 0 {
        return 0.0;
    }
    let p = pos as f64 / total as f64;
    2.0 * p * (1.0 - p)
}

impl Builder<'_> {
    fn leaf(&mut self, idx: &[usize]) -> usize {
        let pos = idx.iter().filter(|&&i| self.y[i]).count();
        self.nodes.push(Node::Leaf { fraction: pos as f64 / idx.len() as f64 });
        self.nodes.len() - 1
    }

    /// Best (feature, threshold) by weighted Gini over a random feature subset.
    fn best_split(&self, idx: &[usize], rng: &mut ChaCha8Rng) -> Option<(usize, f64)> {
        let dim = self.x[0].len();
        let total = idx.len();
        let total_pos = idx.iter().filter(|&&i| self.y[i]).count();
        let parent = gini(total_pos, total);
        let mut best: Option<(f64, usize, f64)> = None;
        let mut order = idx.to_vec();
        for feature in sample_indices(rng, dim, self.m_features).into_iter() {
            order.sort_by(|&a, &b| self.x[a][feature].total_cmp(&self.x[b][feature]));
            let mut left_pos = 0;
            for cut in 1..total {
                left_pos += usize::from(self.y[order[cut - 1]]);
                let (lo, hi) = (self.x[order[cut - 1]][feature], self.x[order[cut]][feature]);
                if lo == hi || cut < self.params.min_leaf || total - cut < self.params.min_leaf {
                    continue;
                }
                let score = (cut as f64 * gini(left_pos, cut)
                    + (total - cut) as f64 * gini(total_pos - left_pos, total - cut))
                    / total as f64;
                if score < parent - 1e-12 && best.is_none_or(|(s, _, _)| score < s - 1e-15) {
                    best = Some((score, feature, lo + (hi - lo) / 2.0));
                }
            }
        }
        best.map(|(_, f, t)| (f, t))
    }

    fn grow(&mut self, idx: &[usize], depth: usize, rng: &mut ChaCha8Rng) -> usize {
        let pos = idx.iter().filter(|&&i| self.y[i]).count();
        if depth >= self.params.max_depth || idx.len() < 2 * self.params.min_leaf || pos == 0 || pos == idx.len() {
            return self.leaf(idx);
        }
        let Some((feature, threshold)) = self.best_split(idx, rng) else {
            return self.leaf(idx);
        };
        let (l, r): (Vec<usize>, Vec<usize>) = idx.iter().partition(|&&i| self.x[i][feature] <= threshold);
        let at = self.nodes.len();
        self.nodes.push(Node::Leaf { fraction: 0.0 });
        let left = self.grow(&l, depth + 1, rng);
        let right = self.grow(&r, depth + 1, rng);
        self.nodes[at] = Node::Split { feature, threshold, left, right };
        at
    }
}

fn fit_tree(x: &[Vec<f64>], y: &[bool], params: &ForestParams, tree: usize) -> Tree {
    let mut rng = ChaCha8Rng::seed_from_u64(params.seed);
    rng.set_stream(tree as u64);
    let n = x.len();
    let bootstrap: Vec<usize> = (0..n).map(|_| rng.gen_range(0..n)).collect();
    let dim = x[0].len();
    let m_features = match params.feature_subsample {
        FeatureSubsample::Sqrt => ((dim as f64).sqrt().floor() as usize).clamp(1, dim),
        FeatureSubsample::All => dim,
    };
    let mut b = Builder { x, y, params, m_features, nodes: Vec::new() };
    b.grow(&bootstrap, 0, &mut rng);
    Tree { nodes: b.nodes }
}

/// Fits the forest on raw vectors. Trees are independent given their seeds,
/// so sequential and parallel execution give identical forests.
pub fn train_forest(exec: Execution, x: &[Vec<f64>], y: &[bool], params: &ForestParams) -> Result<Vec<Tree>> {
    if params.trees < 1 || params.max_depth < 1 || params.min_leaf < 1 {
        return Err(Error::Config("forest needs trees, max_depth and min_leaf >= 1".into()));
    }
    if x.len() != y.len() {
        return Err(Error::Argument(format!("{} inputs for {} labels", x.len(), y.len())));
    }
    if x.len() < 20 {
        return Err(Error::Training(format!("need at least 20 examples, got {}; sample more trajectories", x.len())));
    }
    let pos = y.iter().filter(|v| **v).count();
    if pos == 0 || pos == y.len() {
        return Err(Error::Training(format!(
            "all {} examples are {}; sample more trajectories or questions so both classes appear",
            y.len(),
            if pos == 0 { "incorrect" } else { "correct" }
        )));
    }
    let dim = x[0].len();
    if dim == 0 || x.iter().any(|r| r.len() != dim || r.iter().any(|v| !v.is_finite())) {
        return Err(Error::Argument("training vectors must share a length and be finite".into()));
    }
    Ok(parallel::map_range(exec, params.trees, |t| fit_tree(x, y, params, t)))
}

pub fn train_verifier(
    exec: Execution,
    data: &[(TrajectorySummary, bool)],
    params: &ForestParams,
    tags: TrainingTags,
) -> Result<VerifierModel> {
    let scheme = data
        .first()
        .map(|(s, _)| s.scheme)
        .ok_or_else(|| Error::Training("no training examples".into()))?;
    if data.iter().any(|(s, _)| s.scheme != scheme) {
        return Err(Error::Argument("training summaries use different schemes".into()));
    }
    let x: Vec<Vec<f64>> = data.iter().map(|(s, _)| s.vector.clone()).collect();
    let y: Vec<bool> = data.iter().map(|(_, c)| *c).collect();
    let trees = train_forest(exec, &x, &y, params)?;
    Ok(VerifierModel {
        format: FORMAT.into(),
        params: params.clone(),
        scheme,
        tags,
        examples: y.len(),
        positives: y.iter().filter(|v| **v).count(),
        trees,
    })
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum ScoreMode {
    #[default]
    Soft,
    /// Thresholds the soft score at 0.5.
    Binary,
}

impl VerifierModel {
    pub fn score_vector(&self, x: &[f64], mode: ScoreMode) -> Result<f64> {
        if x.len() != self.scheme.len() {
            return Err(Error::Argument(format!(
                "summary has length {}, model expects {}",
                x.len(),
                self.scheme.len()
            )));
        }
        let soft = self.trees.iter().map(|t| t.leaf_fraction(x)).sum::<f64>() / self.trees.len() as f64;
        Ok(match mode {
            ScoreMode::Soft => soft,
            ScoreMode::Binary => f64::from(u8::from(soft >= 0.5)),
        })
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string(self)? + "\n")
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let m: VerifierModel = serde_json::from_str(text)?;
        if m.format != FORMAT {
            return Err(Error::Config(format!("unsupported verifier format {:?}", m.format)));
        }
        if m.trees.is_empty() {
            return Err(Error::Config("verifier has no trees".into()));
        }
        Ok(m)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_json()?).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_json(&std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?)
    }
}

pub fn verifier_score(m: &VerifierModel, s: &TrajectorySummary, mode: ScoreMode) -> Result<f64> {
    if s.scheme != m.scheme {
        return Err(Error::Argument(format!(
            "summary scheme {:?} does not match model scheme {:?}",
            s.scheme, m.scheme
        )));
    }
    m.score_vector(&s.vector, mode)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct VoteOutcome {
    pub chosen_index: usize,
    pub tallies: Vec<f64>,
    pub fallback_used: bool,
}

fn argmax_lowest(tallies: &[f64]) -> usize {
    let mut best = 0;
    for (i, v) in tallies.iter().enumerate() {
        if *v > tallies[best] {
            best = i;
        }
    }
    best
}

/// Verifier-weighted majority over `k` choices. All-zero weights fall back to
/// the plain majority.
pub fn weighted_vote(predictions: &[usize], scores: &[f64], k: usize) -> Result<VoteOutcome> {
    if predictions.is_empty() {
        return Err(Error::Argument("cannot vote over zero trajectories".into()));
    }
    if predictions.len() != scores.len() {
        return Err(Error::Argument(format!("{} predictions for {} scores", predictions.len(), scores.len())));
    }
    if let Some(p) = predictions.iter().find(|p| **p >= k) {
        return Err(Error::Argument(format!("prediction {p} out of range for k = {k}")));
    }
    if scores.iter().any(|s| !s.is_finite() || *s < 0.0) {
        return Err(Error::Argument("vote weights must be finite and non-negative".into()));
    }
    let fallback_used = scores.iter().all(|s| *s == 0.0);
    let mut tallies = vec![0.0; k];
    for (p, s) in predictions.iter().zip(scores) {
        tallies[*p] += if fallback_used { 1.0 } else { *s };
    }
    Ok(VoteOutcome { chosen_index: argmax_lowest(&tallies), tallies, fallback_used })
}

pub fn majority_vote(predictions: &[usize], k: usize) -> Result<VoteOutcome> {
    weighted_vote(predictions, &vec![1.0; predictions.len()], k)
}

/// One question's scored trajectories in slot order.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct VotingItem {
    pub question_id: String,
    pub k: usize,
    pub correct_index: usize,
    pub predictions: Vec<usize>,
    pub scores: Vec<f64>,
}

/// Groups featurized trajectories by question (first-seen order, slots
/// ascending) and scores each with `model`. Choice 0 is the correct answer.
pub fn voting_items(
    exec: Execution,
    ftrajs: &[FeatureTrajectory],
    model: &VerifierModel,
    mode: ScoreMode,
) -> Result<Vec<VotingItem>> {
    let scores = parallel::map(exec, ftrajs, |ft| {
        summarize_trajectory(ft, model.scheme).and_then(|s| verifier_score(model, &s, mode))
    })
    .into_iter()
    .collect::<Result<Vec<f64>>>()?;
    let mut order: Vec<String> = Vec::new();
    let mut groups: BTreeMap<String, Vec<(usize, usize, f64, usize)>> = BTreeMap::new();
    for (ft, s) in ftrajs.iter().zip(scores) {
        let p = ft
            .predicted_index
            .ok_or_else(|| Error::Data(format!("trajectory {}#{} has no prediction", ft.question_id, ft.slot)))?;
        if !groups.contains_key(&ft.question_id) {
            order.push(ft.question_id.clone());
        }
        groups.entry(ft.question_id.clone()).or_default().push((ft.slot, p, s, ft.k()));
    }
    Ok(order
        .into_iter()
        .map(|qid| {
            let mut g = groups.remove(&qid).expect("grouped");
            g.sort_by_key(|(slot, ..)| *slot);
            VotingItem {
                k: g[0].3,
                correct_index: 0,
                predictions: g.iter().map(|x| x.1).collect(),
                scores: g.iter().map(|x| x.2).collect(),
                question_id: qid,
            }
        })
        .collect())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct VotingPoint {
    pub q: usize,
    pub questions: usize,
    pub weighted_accuracy: f64,
    pub unweighted_accuracy: f64,
}

/// Accuracy of weighted and unweighted voting over the first `q` slots.
pub fn evaluate_voting(items: &[VotingItem], q_values: &[usize]) -> Result<Vec<VotingPoint>> {
    if items.is_empty() {
        return Err(Error::Argument("no questions to evaluate".into()));
    }
    q_values
        .iter()
        .map(|&q| {
            if q < 1 {
                return Err(Error::Argument("q must be >= 1".into()));
            }
            let (mut w, mut u) = (0usize, 0usize);
            for it in items {
                if it.predictions.len() < q {
                    return Err(Error::Size(format!(
                        "question {} has {} trajectories, q = {q} requested",
                        it.question_id,
                        it.predictions.len()
                    )));
                }
                let wv = weighted_vote(&it.predictions[..q], &it.scores[..q], it.k)?;
                let uv = majority_vote(&it.predictions[..q], it.k)?;
                w += usize::from(wv.chosen_index == it.correct_index);
                u += usize::from(uv.chosen_index == it.correct_index);
            }
            let n = items.len() as f64;
            Ok(VotingPoint {
                q,
                questions: items.len(),
                weighted_accuracy: w as f64 / n,
                unweighted_accuracy: u as f64 / n,
            })
        })
        .collect()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TransferResult {
    pub train: TrainingTags,
    pub test: TrainingTags,
    pub q: usize,
    pub weighted_accuracy: f64,
    pub unweighted_accuracy: f64,
    /// Weighted minus unweighted accuracy; may be negative.
    pub delta: f64,
}

pub fn evaluate_transfer(
    exec: Execution,
    model: &VerifierModel,
    test_tags: TrainingTags,
    ftrajs: &[FeatureTrajectory],
    q: usize,
    mode: ScoreMode,
) -> Result<TransferResult> {
    let items = voting_items(exec, ftrajs, model, mode)?;
    let p = evaluate_voting(&items, &[q])?.remove(0);
    Ok(TransferResult {
        train: model.tags.clone(),
        test: test_tags,
        q,
        weighted_accuracy: p.weighted_accuracy,
        unweighted_accuracy: p.unweighted_accuracy,
        delta: p.weighted_accuracy - p.unweighted_accuracy,
    })
}

/// Area under the ROC curve via the Mann-Whitney statistic; ties count half.
pub fn auc(scores: &[f64], labels: &[bool]) -> Result<f64> {
    if scores.len() != labels.len() {
        return Err(Error::Argument("scores and labels differ in length".into()));
    }
    let mut idx: Vec<usize> = (0..scores.len()).collect();
    idx.sort_by(|&a, &b| scores[a].total_cmp(&scores[b]));
    let (mut rank_sum, mut i) = (0.0, 0);
    while i < idx.len() {
        let mut j = i;
        while j + 1 < idx.len() && scores[idx[j + 1]] == scores[idx[i]] {
            j += 1;
        }
        // Average 1-based rank of the tie group.
        let rank = (i + j) as f64 / 2.0 + 1.0;
        rank_sum += idx[i..=j].iter().filter(|&&t| labels[t]).count() as f64 * rank;
        i = j + 1;
    }
    let pos = labels.iter().filter(|v| **v).count() as f64;
    let neg = labels.len() as f64 - pos;
    if pos == 0.0 || neg == 0.0 {
        return Err(Error::Degenerate("AUC needs both classes".into()));
    }
    Ok((rank_sum - pos * (pos + 1.0) / 2.0) / (pos * neg))
}

/// Summaries and labels for every trajectory with a known outcome.
pub fn labelled_summaries(
    ftrajs: &[FeatureTrajectory],
    scheme: SummaryScheme,
) -> Result<Vec<(TrajectorySummary, bool)>> {
    ftrajs
        .iter()
        .filter_map(|ft| ft.is_correct.map(|c| summarize_trajectory(ft, scheme).map(|s| (s, c))))
        .collect()
}

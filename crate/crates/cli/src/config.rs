//! Declarative run configuration: one TOML file with a section per stage,
//! overridable from the command line.

use std::path::{Path, PathBuf};

use lot_core::landscape::{BandwidthRule, LandscapeConfig, Projector, TsneParams};
use lot_core::model_client::{ModelEndpoint, RetryPolicy, SamplingParams, ScoringMode};
use lot_core::parallel::Execution;
use lot_core::trajectory::{PromptTemplate, SamplingConfig, SegmentationMode};
use lot_core::verifier::{FeatureSubsample, ForestParams, ScoreMode, SummaryScheme};
use serde::{Deserialize, Serialize};
use serde_json::json;

use crate::error::{CliError, CliResult};

pub const MOCK_ENDPOINT: &str = "mock";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunSection {
    pub id: String,
    pub runs_dir: String,
    pub cache_dir: String,
    /// `parallel` or `sequential`; outputs are identical either way.
    pub execution: String,
}

impl Default for RunSection {
    fn default() -> Self {
        RunSection { id: "default".into(), runs_dir: "runs".into(), cache_dir: "cache".into(), execution: "parallel".into() }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DatasetSection {
    pub path: String,
    pub format: String,
    pub tag: String,
    pub train: usize,
    pub eval: usize,
    pub seed: u64,
}

impl Default for DatasetSection {
    fn default() -> Self {
        DatasetSection {
            path: "data/demo.jsonl".into(),
            format: "mcq-jsonl".into(),
            tag: "demo".into(),
            train: 20,
            eval: 50,
            seed: 0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ModelSection {
    /// Base URL of a completions endpoint, or `mock`.
    pub endpoint: String,
    pub name: String,
    /// JSON mock script; empty means one is derived from the dataset.
    pub mock_script: String,
    /// Environment variable holding the API key; empty for none.
    pub api_key_env: String,
    pub max_inflight: usize,
    pub scoring_mode: ScoringMode,
    pub chunked_top_logprobs: usize,
    pub timeout_secs: f64,
    pub max_retries: usize,
    pub initial_backoff_secs: f64,
}

impl Default for ModelSection {
    fn default() -> Self {
        let ep = ModelEndpoint::new(MOCK_ENDPOINT, "mock-demo");
        ModelSection {
            endpoint: ep.base_url,
            name: ep.model_name,
            mock_script: String::new(),
            api_key_env: String::new(),
            max_inflight: ep.max_inflight,
            scoring_mode: ep.scoring_mode,
            chunked_top_logprobs: ep.chunked_top_logprobs,
            timeout_secs: ep.timeout_secs,
            max_retries: ep.retry_policy.max_retries,
            initial_backoff_secs: ep.retry_policy.initial_backoff_secs,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SamplingSection {
    pub per_question: usize,
    pub template: PromptTemplate,
    pub segmentation: SegmentationMode,
    pub resample_budget: usize,
    pub temperature: f64,
    pub nucleus_mass: f64,
    pub max_tokens: usize,
    pub stop_markers: Vec<String>,
    pub seed: u64,
    /// Trajectory records to ingest instead of sampling; empty to sample.
    pub ingest: String,
    /// Also featurize the bare prompt as state 0.
    pub include_initial: bool,
}

impl Default for SamplingSection {
    fn default() -> Self {
        let p = SamplingParams::default();
        let s = SamplingConfig::default();
        SamplingSection {
            per_question: s.per_question,
            template: s.template,
            segmentation: s.segmentation,
            resample_budget: s.resample_budget,
            temperature: p.temperature,
            nucleus_mass: p.nucleus_mass,
            max_tokens: p.max_tokens,
            stop_markers: p.stop_markers,
            seed: 0,
            ingest: String::new(),
            include_initial: false,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct LandscapeSection {
    /// `tsne`, `pca` or `external`.
    pub projector: String,
    /// CSV of precomputed coordinates for the `external` projector.
    pub external_coords: String,
    pub bins: usize,
    pub seed: u64,
    pub perplexity: f64,
    pub iterations: usize,
    pub learning_rate: f64,
    pub early_exaggeration: f64,
    pub exaggeration_iterations: usize,
    pub render_grid: usize,
    pub stats_grid: usize,
    pub margin: f64,
    /// `scott` or a fixed bandwidth in embedding units.
    pub bandwidth: String,
}

impl Default for LandscapeSection {
    fn default() -> Self {
        let t = TsneParams::default();
        let l = LandscapeConfig::default();
        LandscapeSection {
            projector: "tsne".into(),
            external_coords: String::new(),
            bins: l.bins,
            seed: 7,
            perplexity: t.perplexity,
            iterations: t.iterations,
            learning_rate: t.learning_rate,
            early_exaggeration: t.early_exaggeration,
            exaggeration_iterations: t.exaggeration_iterations,
            render_grid: l.render_grid,
            stats_grid: l.stats_grid,
            margin: l.margin,
            bandwidth: "scott".into(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct VerifierSection {
    pub bins: usize,
    pub k_max: usize,
    pub trees: usize,
    pub max_depth: usize,
    pub min_leaf: usize,
    pub feature_subsample: FeatureSubsample,
    pub seed: u64,
    pub score_mode: ScoreMode,
    /// Voting sizes to evaluate; empty means 1..=per_question.
    pub q_values: Vec<usize>,
    /// Feature trajectories to train on; empty means the run's own train split.
    pub train_features: String,
}

impl Default for VerifierSection {
    fn default() -> Self {
        let s = SummaryScheme::default();
        let f = ForestParams::default();
        VerifierSection {
            bins: s.bins,
            k_max: s.k_max,
            trees: f.trees,
            max_depth: f.max_depth,
            min_leaf: f.min_leaf,
            feature_subsample: f.feature_subsample,
            seed: f.seed,
            score_mode: ScoreMode::default(),
            q_values: Vec::new(),
            train_features: String::new(),
        }
    }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct Config {
    pub run: RunSection,
    pub dataset: DatasetSection,
    pub model: ModelSection,
    pub sampling: SamplingSection,
    pub landscape: LandscapeSection,
    pub verifier: VerifierSection,
    /// Directory that relative paths resolve against. Not serialized.
    #[serde(skip)]
    pub base_dir: PathBuf,
}

impl Config {
    pub fn load(path: &Path) -> CliResult<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| CliError::io(path, e))?;
        let mut cfg: Config =
            toml::from_str(&text).map_err(|e| CliError::Config(format!("{}: {e}", path.display())))?;
        cfg.base_dir = path.parent().map(Path::to_path_buf).unwrap_or_default();
        Ok(cfg)
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("config serializes")
    }

    pub fn resolve(&self, p: &str) -> PathBuf {
        let p = Path::new(p);
        if p.is_absolute() {
            p.to_path_buf()
        } else {
            self.base_dir.join(p)
        }
    }

    pub fn run_dir(&self) -> PathBuf {
        self.resolve(&self.run.runs_dir).join(&self.run.id)
    }

    pub fn cache_dir(&self) -> PathBuf {
        self.resolve(&self.run.cache_dir)
    }

    pub fn execution(&self) -> CliResult<Execution> {
        match self.run.execution.as_str() {
            "parallel" => Ok(Execution::Parallel),
            "sequential" => Ok(Execution::Sequential),
            other => Err(CliError::Config(format!("unknown execution mode `{other}`"))),
        }
    }

    pub fn is_mock(&self) -> bool {
        self.model.endpoint == MOCK_ENDPOINT
    }

    pub fn endpoint(&self) -> ModelEndpoint {
        ModelEndpoint {
            base_url: self.model.endpoint.clone(),
            model_name: self.model.name.clone(),
            api_key_source: (!self.model.api_key_env.is_empty()).then(|| self.model.api_key_env.clone()),
            max_inflight: self.model.max_inflight,
            retry_policy: RetryPolicy {
                max_retries: self.model.max_retries,
                initial_backoff_secs: self.model.initial_backoff_secs,
            },
            scoring_mode: self.model.scoring_mode,
            chunked_top_logprobs: self.model.chunked_top_logprobs,
            timeout_secs: self.model.timeout_secs,
        }
    }

    pub fn sampling_config(&self) -> SamplingConfig {
        SamplingConfig {
            per_question: self.sampling.per_question,
            questions: self.dataset.eval,
            template: self.sampling.template,
            exemplars: None,
            segmentation: self.sampling.segmentation,
            resample_budget: self.sampling.resample_budget,
        }
    }

    pub fn sampling_params(&self) -> SamplingParams {
        SamplingParams {
            temperature: self.sampling.temperature,
            nucleus_mass: self.sampling.nucleus_mass,
            max_tokens: self.sampling.max_tokens,
            stop_markers: self.sampling.stop_markers.clone(),
            seed: Some(self.sampling.seed),
        }
    }

    pub fn projector(&self) -> CliResult<Projector> {
        let l = &self.landscape;
        match l.projector.as_str() {
            "tsne" => Ok(Projector::Tsne(TsneParams {
                perplexity: l.perplexity,
                iterations: l.iterations,
                early_exaggeration: l.early_exaggeration,
                exaggeration_iterations: l.exaggeration_iterations,
                learning_rate: l.learning_rate,
                seed: l.seed,
                ..TsneParams::default()
            })),
            "pca" => Ok(Projector::Pca),
            "external" => {
                let path = self.resolve(&l.external_coords);
                let csv = std::fs::read_to_string(&path).map_err(|e| CliError::io(&path, e))?;
                Ok(Projector::External { csv })
            }
            other => Err(CliError::Config(format!("unknown projector `{other}` (tsne, pca or external)"))),
        }
    }

    pub fn landscape_config(&self) -> CliResult<LandscapeConfig> {
        let l = &self.landscape;
        let bandwidth = match l.bandwidth.trim() {
            "scott" => BandwidthRule::Scott,
            v => BandwidthRule::Fixed(
                v.parse().map_err(|_| CliError::Config(format!("bandwidth `{v}` is neither `scott` nor a number")))?,
            ),
        };
        Ok(LandscapeConfig { bins: l.bins, render_grid: l.render_grid, stats_grid: l.stats_grid, bandwidth, margin: l.margin })
    }

    pub fn summary_scheme(&self) -> SummaryScheme {
        SummaryScheme { bins: self.verifier.bins, k_max: self.verifier.k_max }
    }

    pub fn forest_params(&self) -> ForestParams {
        ForestParams {
            trees: self.verifier.trees,
            max_depth: self.verifier.max_depth,
            min_leaf: self.verifier.min_leaf,
            feature_subsample: self.verifier.feature_subsample,
            seed: self.verifier.seed,
        }
    }

    pub fn q_values(&self) -> Vec<usize> {
        if self.verifier.q_values.is_empty() {
            (1..=self.sampling.per_question).collect()
        } else {
            self.verifier.q_values.clone()
        }
    }

    /// Settings that determine each stage's outputs, cumulative over
    /// upstream stages. Concurrency and transport knobs are excluded.
    pub fn stage_inputs(&self, stage: crate::manifest::Stage) -> serde_json::Value {
        use crate::manifest::Stage;
        let d = &self.dataset;
        let m = &self.model;
        let sample = json!({
            "dataset": { "path": d.path, "format": d.format, "tag": d.tag, "train": d.train, "eval": d.eval, "seed": d.seed },
            "model": { "endpoint": m.endpoint, "name": m.name, "mock_script": m.mock_script },
            "sampling": self.sampling,
        });
        let featurize = json!({ "upstream": sample, "scoring_mode": m.scoring_mode, "top": m.chunked_top_logprobs });
        match stage {
            Stage::Sample => sample,
            Stage::Featurize => featurize,
            Stage::Landscape => json!({ "upstream": featurize, "landscape": self.landscape }),
            Stage::Verify => json!({ "upstream": featurize, "verifier": self.verifier }),
            Stage::Stats => json!({ "landscape": self.landscape, "featurize": featurize }),
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn defaults_round_trip_with_every_key() {
        let cfg = Config::default();
        let text = cfg.to_toml();
        for key in ["per_question = 10", "bins = 5", "bins = 10", "k_max = 5", "trees = 100", "render_grid = 200", "stats_grid = 50", "resample_budget = 3"] {
            assert!(text.contains(key), "missing {key} in\n{text}");
        }
        let back: Config = toml::from_str(&text).unwrap();
        assert_eq!(back, cfg);
    }

    #[test]
    fn unknown_keys_rejected() {
        assert!(toml::from_str::<Config>("[sampling]\nper_questions = 3\n").is_err());
    }

    #[test]
    fn partial_file_keeps_defaults() {
        let cfg: Config = toml::from_str("[landscape]\nprojector = \"pca\"\n").unwrap();
        assert_eq!(cfg.landscape.bins, 5);
        assert_eq!(cfg.projector().unwrap(), Projector::Pca);
    }
}

//! Stage orchestration over a persistent run directory.

use std::collections::HashSet;
use std::fs;
use std::path::{Path, PathBuf};
use std::sync::atomic::{AtomicUsize, Ordering};

use lot_core::dataset::{load_dataset, reorder_choices, split_train_eval, DatasetFormat, Question};
use lot_core::features::{featurize_all, feature_trajectories_to_jsonl, parse_feature_trajectories, FeatureTrajectory};
use lot_core::landscape::{aggregate_metrics_by_bin, build_landscape, metrics_to_csv, render_landscape, render_metrics_chart, LandscapeBundle};
use lot_core::model_client::{
    make_mock_model, HttpModel, LanguageModel, MockScript, SamplingParams, ScoreCache, ScoredContinuation, Scorer,
};
use lot_core::parallel::Execution;
use lot_core::stats::{observation_report, ReportTags};
use lot_core::trajectory::{ingest_trajectories, parse_trajectories, sample_all, trajectories_to_jsonl, Trajectory};
use lot_core::verifier::{
    auc, evaluate_voting, labelled_summaries, train_verifier, verifier_score, voting_items, TrainingTags, VerifierModel,
};
use serde::Serialize;

use crate::config::Config;
use crate::demo::demo_script;
use crate::error::{CliError, CliResult};
use crate::manifest::{digest, RunLock, RunManifest, Seeds, Stage, StageDir, Tags};

#[derive(Debug, Clone, Copy, Default)]
pub struct RunOptions {
    /// Recompute completed stages whose configuration changed.
    pub force: bool,
    /// Drop corrupt score-cache entries instead of failing.
    pub repair: bool,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub struct StageOutcome {
    pub stage: Stage,
    pub skipped: bool,
    /// Requests that reached the model (cache hits excluded).
    pub model_calls: usize,
}

/// Counts requests on their way to the wrapped model.
struct Counting {
    inner: Box<dyn LanguageModel>,
    calls: AtomicUsize,
}

impl LanguageModel for Counting {
    fn model_name(&self) -> &str {
        self.inner.model_name()
    }

    fn complete(&self, prompt: &str, params: &SamplingParams) -> lot_core::Result<String> {
        self.calls.fetch_add(1, Ordering::SeqCst);
        self.inner.complete(prompt, params)
    }

    fn score(&self, prefix: &str, continuation: &str) -> lot_core::Result<ScoredContinuation> {
        self.calls.fetch_add(1, Ordering::SeqCst);
        self.inner.score(prefix, continuation)
    }

    fn max_inflight(&self) -> usize {
        self.inner.max_inflight()
    }
}

/// Questions of the configured split, choices reordered correct-first.
pub struct Questions {
    pub all: Vec<Question>,
    pub train: Vec<Question>,
    pub eval: Vec<Question>,
}

impl Questions {
    pub fn load(cfg: &Config) -> CliResult<Self> {
        let format = match cfg.dataset.format.as_str() {
            "mcq-jsonl" => DatasetFormat::McqJsonl,
            other => return Err(CliError::Config(format!("unknown dataset format `{other}`"))),
        };
        let ds = load_dataset(&cfg.resolve(&cfg.dataset.path), format)?;
        let split = split_train_eval(&ds, cfg.dataset.train, cfg.dataset.eval, cfg.dataset.seed)?;
        Ok(Questions {
            all: ds,
            train: split.train.iter().map(reorder_choices).collect(),
            eval: split.eval.iter().map(reorder_choices).collect(),
        })
    }

    pub fn canonical(&self) -> Vec<Question> {
        self.train.iter().chain(&self.eval).cloned().collect()
    }
}

pub struct Run {
    cfg: Config,
    dir: PathBuf,
    opts: RunOptions,
    manifest: RunManifest,
    _lock: RunLock,
}

fn read(path: &Path) -> CliResult<String> {
    fs::read_to_string(path).map_err(|e| CliError::io(path, e))
}

fn json<T: Serialize>(v: &T) -> String {
    serde_json::to_string_pretty(v).expect("serializable") + "\n"
}

impl Run {
    /// Locks the run directory and loads (or starts) its manifest. Stages
    /// whose artifacts no longer match their checksums are marked incomplete.
    pub fn open(cfg: Config, opts: RunOptions) -> CliResult<Self> {
        cfg.execution()?;
        let dir = cfg.run_dir();
        let lock = RunLock::acquire(&dir)?;
        let mut manifest = RunManifest::load(&dir)?.unwrap_or_else(|| RunManifest {
            run_id: cfg.run.id.clone(),
            ..RunManifest::default()
        });
        if !manifest.revalidate(&dir).is_empty() {
            manifest.save(&dir)?;
        }
        Ok(Run { cfg, dir, opts, manifest, _lock: lock })
    }

    pub fn manifest(&self) -> &RunManifest {
        &self.manifest
    }

    pub fn dir(&self) -> &Path {
        &self.dir
    }

    pub fn config(&self) -> &Config {
        &self.cfg
    }

    fn inputs(&self, stage: Stage) -> String {
        digest(self.cfg.stage_inputs(stage).to_string().as_bytes())
    }

    fn check_upstream(&self, stage: Stage) -> CliResult<()> {
        for &up in stage.upstream() {
            let rec = self.manifest.stages.get(&up).filter(|r| r.complete);
            let Some(rec) = rec else {
                return Err(CliError::Dependency { stage, missing: up });
            };
            if rec.inputs != self.inputs(up) {
                return Err(CliError::Drift {
                    stage: up,
                    detail: format!("settings feeding `{stage}` changed since `{up}` ran"),
                });
            }
        }
        Ok(())
    }

    pub fn run_stage(&mut self, stage: Stage) -> CliResult<StageOutcome> {
        self.check_upstream(stage)?;
        let inputs = self.inputs(stage);
        if let Some(rec) = self.manifest.stages.get(&stage).filter(|r| r.complete) {
            if rec.inputs == inputs && !self.opts.force {
                return Ok(StageOutcome { stage, skipped: true, model_calls: 0 });
            }
            if rec.inputs != inputs && !self.opts.force {
                return Err(CliError::Drift { stage, detail: "stage settings changed since it ran".into() });
            }
        }
        let staged = StageDir::begin(&self.dir, stage)?;
        let calls = match stage {
            Stage::Sample => self.sample(&staged),
            Stage::Featurize => self.featurize(&staged),
            Stage::Landscape => self.landscape(&staged).map(|_| 0),
            Stage::Verify => self.verify(&staged).map(|_| 0),
            Stage::Stats => self.stats(&staged).map(|_| 0),
        }?;
        let artifacts = staged.commit()?;
        self.manifest.record(stage, inputs, artifacts);
        self.manifest.run_id = self.cfg.run.id.clone();
        self.manifest.config = self.cfg.to_toml();
        self.manifest.base_dir = self.cfg.base_dir.clone();
        self.manifest.tags = self.tags();
        self.manifest.seeds = Seeds {
            split: self.cfg.dataset.seed,
            sampling: self.cfg.sampling.seed,
            landscape: self.cfg.landscape.seed,
            verifier: self.cfg.verifier.seed,
        };
        self.manifest.save(&self.dir)?;
        Ok(StageOutcome { stage, skipped: false, model_calls: calls })
    }

    /// sample → featurize → landscape → verify → stats.
    pub fn full_pipeline(&mut self) -> CliResult<Vec<StageOutcome>> {
        Stage::ALL.iter().map(|s| self.run_stage(*s)).collect()
    }

    fn tags(&self) -> Tags {
        Tags {
            method: serde_json::to_value(self.cfg.sampling.template)
                .ok()
                .and_then(|v| v.as_str().map(str::to_string))
                .unwrap_or_default(),
            model: self.cfg.model.name.clone(),
            dataset: self.cfg.dataset.tag.clone(),
        }
    }

    fn exec(&self) -> Execution {
        self.cfg.execution().unwrap_or_default()
    }

    fn model(&self, questions: &Questions) -> CliResult<Counting> {
        let inner: Box<dyn LanguageModel> = if self.cfg.is_mock() {
            let script = if self.cfg.model.mock_script.is_empty() {
                demo_script(&self.cfg.model.name, &questions.all)
            } else {
                let path = self.cfg.resolve(&self.cfg.model.mock_script);
                serde_json::from_str::<MockScript>(&read(&path)?)
                    .map_err(|e| CliError::Config(format!("mock script {}: {e}", path.display())))?
            };
            Box::new(make_mock_model(script)?)
        } else {
            Box::new(HttpModel::new(self.cfg.endpoint())?)
        };
        Ok(Counting { inner, calls: AtomicUsize::new(0) })
    }

    fn cache(&self, model: &dyn LanguageModel) -> CliResult<ScoreCache> {
        Ok(ScoreCache::open(&self.cfg.cache_dir(), model.model_name(), self.opts.repair)?)
    }

    fn artifact(&self, stage: Stage, rel: &str) -> PathBuf {
        self.dir.join(stage.dir()).join(rel)
    }

    fn sample(&self, out: &StageDir) -> CliResult<usize> {
        let err = CliError::in_stage(Stage::Sample);
        let qs = Questions::load(&self.cfg)?;
        let canonical = qs.canonical();
        let (train, eval, calls) = if !self.cfg.sampling.ingest.is_empty() {
            let path = self.cfg.resolve(&self.cfg.sampling.ingest);
            let all = lot_core::dataset::parse_mcq_jsonl(&read(&self.cfg.resolve(&self.cfg.dataset.path))?)?;
            let all: Vec<Question> = all.iter().map(reorder_choices).collect();
            let trajs = ingest_trajectories(&path, &all).map_err(&err)?;
            let pick = |set: &[Question]| -> Vec<Trajectory> {
                let ids: HashSet<&str> = set.iter().map(|q| q.id.as_str()).collect();
                trajs.iter().filter(|t| ids.contains(t.question_id.as_str())).cloned().collect()
            };
            (pick(&qs.train), pick(&qs.eval), 0)
        } else {
            let model = self.model(&qs)?;
            let cache = self.cache(&model)?;
            let scorer = Scorer::new(&model, Some(&cache));
            let cfg = self.cfg.sampling_config();
            let params = self.cfg.sampling_params();
            let train = sample_all(&qs.train, &cfg, &model, &params, &scorer).map_err(&err)?;
            let eval = sample_all(&qs.eval, &cfg, &model, &params, &scorer).map_err(&err)?;
            (train, eval, model.calls.load(Ordering::SeqCst))
        };
        out.write("train.jsonl", trajectories_to_jsonl(&train, &canonical)?.as_bytes())?;
        out.write("eval.jsonl", trajectories_to_jsonl(&eval, &canonical)?.as_bytes())?;
        let split = serde_json::json!({
            "seed": self.cfg.dataset.seed,
            "train": qs.train.iter().map(|q| &q.id).collect::<Vec<_>>(),
            "eval": qs.eval.iter().map(|q| &q.id).collect::<Vec<_>>(),
        });
        out.write("split.json", json(&split).as_bytes())?;
        Ok(calls)
    }

    fn featurize(&self, out: &StageDir) -> CliResult<usize> {
        let err = CliError::in_stage(Stage::Featurize);
        let qs = Questions::load(&self.cfg)?;
        let canonical = qs.canonical();
        let model = self.model(&qs)?;
        let cache = self.cache(&model)?;
        let scorer = Scorer::new(&model, Some(&cache));
        for split in ["train", "eval"] {
            let file = format!("{split}.jsonl");
            let trajs = parse_trajectories(&read(&self.artifact(Stage::Sample, &file))?, &canonical).map_err(&err)?;
            let ftrajs = featurize_all(&trajs, &canonical, &scorer, self.cfg.sampling.include_initial).map_err(&err)?;
            out.write(&file, feature_trajectories_to_jsonl(&ftrajs)?.as_bytes())?;
        }
        Ok(model.calls.load(Ordering::SeqCst))
    }

    fn features(&self, path: &Path) -> CliResult<Vec<FeatureTrajectory>> {
        Ok(parse_feature_trajectories(&read(path)?)?)
    }

    fn landscape(&self, out: &StageDir) -> CliResult<()> {
        let err = CliError::in_stage(Stage::Landscape);
        let ftrajs = self.features(&self.artifact(Stage::Featurize, "eval.jsonl"))?;
        let k = ftrajs.first().map(FeatureTrajectory::k).ok_or_else(|| {
            CliError::Stage { stage: Stage::Landscape, source: lot_core::Error::Data("no evaluation trajectories".into()) }
        })?;
        let cfg = self.cfg.landscape_config()?;
        let bundle = build_landscape(self.exec(), &ftrajs, k, &self.cfg.projector()?, &cfg).map_err(&err)?;
        render_landscape(&bundle, &out.tmp).map_err(&err)?;
        out.write("embedding.csv", bundle.embedding.to_csv().as_bytes())?;
        let metrics = aggregate_metrics_by_bin(&ftrajs, cfg.bins).map_err(&err)?;
        out.write("metrics.csv", metrics_to_csv(&metrics).as_bytes())?;
        render_metrics_chart(&metrics, cfg.bins, &out.path("metrics.svg")).map_err(&err)?;
        // Statistics only need the coarse grids and the embedding.
        let stats_bundle = LandscapeBundle { panels: Vec::new(), ..bundle };
        out.write("stats_bundle.json", json(&stats_bundle).as_bytes())?;
        Ok(())
    }

    fn verify(&self, out: &StageDir) -> CliResult<()> {
        let err = CliError::in_stage(Stage::Verify);
        let train_path = if self.cfg.verifier.train_features.is_empty() {
            self.artifact(Stage::Featurize, "train.jsonl")
        } else {
            self.cfg.resolve(&self.cfg.verifier.train_features)
        };
        let train = self.features(&train_path)?;
        let scheme = self.cfg.summary_scheme();
        let data = labelled_summaries(&train, scheme).map_err(&err)?;
        let tags = TrainingTags { dataset: self.cfg.dataset.tag.clone(), model: self.cfg.model.name.clone() };
        let model = train_verifier(self.exec(), &data, &self.cfg.forest_params(), tags).map_err(&err)?;
        out.write("model.json", model.to_json()?.as_bytes())?;
        self.evaluate(&model, out)
    }

    fn evaluate(&self, model: &VerifierModel, out: &StageDir) -> CliResult<()> {
        let err = CliError::in_stage(Stage::Verify);
        let eval = self.features(&self.artifact(Stage::Featurize, "eval.jsonl"))?;
        let mode = self.cfg.verifier.score_mode;
        let items = voting_items(self.exec(), &eval, model, mode).map_err(&err)?;
        let points = evaluate_voting(&items, &self.cfg.q_values()).map_err(&err)?;
        let mut csv = String::from("q,questions,weighted_accuracy,unweighted_accuracy\n");
        for p in &points {
            csv.push_str(&format!("{},{},{:?},{:?}\n", p.q, p.questions, p.weighted_accuracy, p.unweighted_accuracy));
        }
        out.write("voting.csv", csv.as_bytes())?;

        let labelled = labelled_summaries(&eval, model.scheme).map_err(&err)?;
        let scores = labelled
            .iter()
            .map(|(s, _)| verifier_score(model, s, lot_core::verifier::ScoreMode::Soft))
            .collect::<lot_core::Result<Vec<f64>>>()
            .map_err(&err)?;
        let labels: Vec<bool> = labelled.iter().map(|(_, c)| *c).collect();
        let mut per = String::from("question_id,slot,predicted,is_correct,score\n");
        for (ft, s) in eval.iter().filter(|f| f.is_correct.is_some()).zip(&scores) {
            per.push_str(&format!(
                "{},{},{},{},{:?}\n",
                ft.question_id,
                ft.slot,
                ft.predicted_index.map_or(String::new(), |p| p.to_string()),
                ft.is_correct.unwrap_or_default(),
                s
            ));
        }
        out.write("scores.csv", per.as_bytes())?;
        let summary = serde_json::json!({
            "score_mode": mode,
            "auc": auc(&scores, &labels).ok(),
            "voting": points,
            "train_tags": model.tags,
            "eval_tags": { "dataset": self.cfg.dataset.tag, "model": self.cfg.model.name },
        });
        out.write("eval.json", json(&summary).as_bytes())?;
        Ok(())
    }

    fn stats(&self, out: &StageDir) -> CliResult<()> {
        let err = CliError::in_stage(Stage::Stats);
        let ftrajs = self.features(&self.artifact(Stage::Featurize, "eval.jsonl"))?;
        let bundle: LandscapeBundle = serde_json::from_str(&read(&self.artifact(Stage::Landscape, "stats_bundle.json"))?)
            .map_err(|e| CliError::Stage { stage: Stage::Stats, source: e.into() })?;
        let t = self.tags();
        let tags = ReportTags { method: t.method, model: t.model, dataset: t.dataset };
        let report = observation_report(tags, &ftrajs, &bundle).map_err(&err)?;
        out.write("report.json", report.to_json()?.as_bytes())?;
        out.write("report.txt", report.to_text().as_bytes())?;
        Ok(())
    }
}

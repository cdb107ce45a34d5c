//! Argument parsing and dispatch for the `lot` binary.

use std::path::{Path, PathBuf};

use clap::{Args as ClapArgs, Parser, Subcommand};
use serde::de::DeserializeOwned;

use crate::config::Config;
use crate::error::{CliError, CliResult};
use crate::manifest::{RunManifest, Stage};
use crate::pipeline::{Run, RunOptions, StageOutcome};

#[derive(Debug, Parser)]
#[command(name = "lot", version, about = "Reasoning-trajectory landscapes and verifier")]
pub struct Args {
    #[command(flatten)]
    pub global: Global,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Clone, Default, ClapArgs)]
pub struct Global {
    /// TOML configuration file. Without one, an existing run reuses the
    /// configuration stored in its manifest.
    #[arg(long, global = true)]
    pub config: Option<PathBuf>,
    /// Run directory; overrides run.runs_dir and run.id.
    #[arg(long, global = true)]
    pub run_dir: Option<PathBuf>,
    /// Completions endpoint base URL, or `mock`.
    #[arg(long, global = true)]
    pub endpoint: Option<String>,
    #[arg(long, global = true)]
    pub model: Option<String>,
    #[arg(long, global = true)]
    pub max_inflight: Option<usize>,
    /// Dataset file (multiple-choice JSONL).
    #[arg(long, global = true)]
    pub dataset: Option<String>,
    /// `parallel` or `sequential`.
    #[arg(long, global = true)]
    pub execution: Option<String>,
    /// Drop corrupt score-cache lines instead of failing.
    #[arg(long, global = true)]
    pub repair: bool,
    /// Recompute completed stages whose settings changed.
    #[arg(long, global = true)]
    pub force: bool,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Write the effective configuration as TOML.
    InitConfig {
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// sample, featurize, landscape, verify and stats in order.
    Run {
        #[command(flatten)]
        sample: SampleArgs,
        #[command(flatten)]
        landscape: LandscapeArgs,
    },
    /// Sample reasoning trajectories (or ingest them).
    Sample(SampleArgs),
    /// Score every state against every choice.
    Featurize,
    /// Project states to 2-D and render per-bin density maps.
    Landscape(LandscapeArgs),
    #[command(subcommand)]
    Verify(VerifyCommand),
    /// Observation statistics over the landscape.
    Stats,
    /// Stage completion flags of a run.
    Status,
}

#[derive(Debug, Clone, Default, ClapArgs)]
pub struct SampleArgs {
    #[arg(long)]
    pub per_question: Option<usize>,
    /// cot-zeroshot or cot-fewshot.
    #[arg(long)]
    pub template: Option<String>,
    #[arg(long)]
    pub train: Option<usize>,
    #[arg(long)]
    pub eval: Option<usize>,
    #[arg(long)]
    pub sampling_seed: Option<u64>,
    /// Trajectory JSONL to ingest instead of sampling.
    #[arg(long)]
    pub ingest: Option<String>,
}

#[derive(Debug, Clone, Default, ClapArgs)]
pub struct LandscapeArgs {
    /// tsne, pca or external.
    #[arg(long)]
    pub projector: Option<String>,
    #[arg(long)]
    pub bins: Option<usize>,
    #[arg(long)]
    pub seed: Option<u64>,
    /// Coordinates CSV for the external projector.
    #[arg(long)]
    pub coords: Option<String>,
}

#[derive(Debug, Subcommand)]
pub enum VerifyCommand {
    /// Train the verifier and evaluate it.
    Train {
        /// Feature trajectories to train on instead of the run's train split.
        #[arg(long)]
        train_split: Option<String>,
        #[command(flatten)]
        eval: EvalArgs,
    },
    /// Weighted-vote accuracy for a range of voting sizes.
    Eval(EvalArgs),
}

#[derive(Debug, Clone, Default, ClapArgs)]
pub struct EvalArgs {
    /// Voting sizes: `1..50`, `1..=50` or `1,5,10`.
    #[arg(long)]
    pub q: Option<String>,
    /// soft or binary.
    #[arg(long)]
    pub score_mode: Option<String>,
}

/// Parses `a..b` (inclusive), `a..=b` or a comma list.
pub fn parse_q(spec: &str) -> CliResult<Vec<usize>> {
    let bad = || CliError::Config(format!("cannot read voting sizes `{spec}`"));
    let num = |s: &str| s.trim().parse::<usize>().map_err(|_| bad());
    let out: Vec<usize> = if let Some((a, b)) = spec.split_once("..") {
        let (a, b) = (num(a)?, num(b.trim_start_matches('='))?);
        (a..=b).collect()
    } else {
        spec.split(',').map(num).collect::<CliResult<_>>()?
    };
    if out.is_empty() || out.contains(&0) {
        return Err(bad());
    }
    Ok(out)
}

fn kebab<T: DeserializeOwned>(what: &str, v: &str) -> CliResult<T> {
    serde_json::from_value(serde_json::Value::String(v.to_string()))
        .map_err(|_| CliError::Config(format!("unknown {what} `{v}`")))
}

fn absolute(p: &Path) -> PathBuf {
    std::path::absolute(p).unwrap_or_else(|_| p.to_path_buf())
}

impl Global {
    fn apply(&self, cfg: &mut Config) -> CliResult<()> {
        if let Some(dir) = &self.run_dir {
            let dir = absolute(dir);
            let id = dir.file_name().and_then(|n| n.to_str());
            let id = id.ok_or_else(|| CliError::Config(format!("bad run directory {}", dir.display())))?;
            cfg.run.id = id.to_string();
            cfg.run.runs_dir = dir.parent().unwrap_or(Path::new("/")).to_string_lossy().into_owned();
        }
        if let Some(v) = &self.endpoint {
            cfg.model.endpoint = v.clone();
        }
        if let Some(v) = &self.model {
            cfg.model.name = v.clone();
        }
        if let Some(v) = self.max_inflight {
            cfg.model.max_inflight = v;
        }
        if let Some(v) = &self.dataset {
            cfg.dataset.path = absolute(Path::new(v)).to_string_lossy().into_owned();
        }
        if let Some(v) = &self.execution {
            cfg.run.execution = v.clone();
        }
        cfg.execution()?;
        Ok(())
    }
}

impl SampleArgs {
    fn apply(&self, cfg: &mut Config) -> CliResult<()> {
        if let Some(v) = self.per_question {
            cfg.sampling.per_question = v;
        }
        if let Some(v) = &self.template {
            cfg.sampling.template = kebab("template", v)?;
        }
        if let Some(v) = self.train {
            cfg.dataset.train = v;
        }
        if let Some(v) = self.eval {
            cfg.dataset.eval = v;
        }
        if let Some(v) = self.sampling_seed {
            cfg.sampling.seed = v;
        }
        if let Some(v) = &self.ingest {
            cfg.sampling.ingest = absolute(Path::new(v)).to_string_lossy().into_owned();
        }
        Ok(())
    }
}

impl LandscapeArgs {
    fn apply(&self, cfg: &mut Config) -> CliResult<()> {
        if let Some(v) = &self.projector {
            cfg.landscape.projector = v.clone();
        }
        if let Some(v) = self.bins {
            cfg.landscape.bins = v;
        }
        if let Some(v) = self.seed {
            cfg.landscape.seed = v;
        }
        if let Some(v) = &self.coords {
            cfg.landscape.external_coords = absolute(Path::new(v)).to_string_lossy().into_owned();
        }
        cfg.projector()?;
        cfg.landscape_config()?;
        Ok(())
    }
}

impl EvalArgs {
    fn apply(&self, cfg: &mut Config) -> CliResult<()> {
        if let Some(v) = &self.q {
            cfg.verifier.q_values = parse_q(v)?;
        }
        if let Some(v) = &self.score_mode {
            cfg.verifier.score_mode = kebab("score mode", v)?;
        }
        Ok(())
    }
}

/// Configuration file, else the run's stored configuration, else defaults;
/// command-line overrides on top.
pub fn effective_config(global: &Global, command: &Command) -> CliResult<Config> {
    let mut cfg = match &global.config {
        Some(path) => Config::load(path)?,
        None => Config { base_dir: absolute(Path::new(".")), ..Config::default() },
    };
    global.apply(&mut cfg)?;
    if global.config.is_none() {
        if let Some(m) = RunManifest::load(&cfg.run_dir())? {
            if !m.config.is_empty() {
                let mut stored: Config = toml::from_str(&m.config)
                    .map_err(|e| CliError::Config(format!("stored configuration: {e}")))?;
                stored.base_dir = m.base_dir.clone();
                cfg = stored;
                global.apply(&mut cfg)?;
            }
        }
    }
    match command {
        Command::Run { sample, landscape } => {
            sample.apply(&mut cfg)?;
            landscape.apply(&mut cfg)?;
        }
        Command::Sample(a) => a.apply(&mut cfg)?,
        Command::Landscape(a) => a.apply(&mut cfg)?,
        Command::Verify(VerifyCommand::Train { train_split, eval }) => {
            if let Some(p) = train_split {
                cfg.verifier.train_features = absolute(Path::new(p)).to_string_lossy().into_owned();
            }
            eval.apply(&mut cfg)?;
        }
        Command::Verify(VerifyCommand::Eval(a)) => a.apply(&mut cfg)?,
        _ => {}
    }
    Ok(cfg)
}

fn report(outcomes: &[StageOutcome], run: &Run) {
    for o in outcomes {
        if o.skipped {
            println!("{:<10} up to date", o.stage.as_str());
        } else {
            println!("{:<10} done ({} model requests)", o.stage.as_str(), o.model_calls);
        }
    }
    println!("run directory: {}", run.dir().display());
}

pub fn dispatch(args: Args) -> CliResult<()> {
    let cfg = effective_config(&args.global, &args.command)?;
    // Evaluation settings live in the verify stage; changing them is the
    // point of `verify eval`, not drift.
    let eval_only = matches!(args.command, Command::Verify(VerifyCommand::Eval(_)));
    let opts = RunOptions { force: args.global.force || eval_only, repair: args.global.repair };
    let stage = match &args.command {
        Command::InitConfig { out } => {
            let text = cfg.to_toml();
            match out {
                Some(p) => std::fs::write(p, text).map_err(|e| CliError::io(p, e))?,
                None => print!("{text}"),
            }
            return Ok(());
        }
        Command::Status => {
            let m = RunManifest::load(&cfg.run_dir())?.unwrap_or_default();
            for s in Stage::ALL {
                let state = if m.is_complete(s) { "complete" } else { "pending" };
                println!("{:<10} {state}", s.as_str());
            }
            return Ok(());
        }
        Command::Run { .. } => None,
        Command::Sample(_) => Some(Stage::Sample),
        Command::Featurize => Some(Stage::Featurize),
        Command::Landscape(_) => Some(Stage::Landscape),
        Command::Verify(_) => Some(Stage::Verify),
        Command::Stats => Some(Stage::Stats),
    };
    let mut run = Run::open(cfg, opts)?;
    let outcomes = match stage {
        Some(s) => vec![run.run_stage(s)?],
        None => run.full_pipeline()?,
    };
    report(&outcomes, &run);
    if stage == Some(Stage::Stats) {
        let text = std::fs::read_to_string(run.dir().join("stats/report.txt")).map_err(|e| CliError::io("stats/report.txt", e))?;
        print!("{text}");
    }
    Ok(())
}

/// Runs the command and returns the process exit code.
pub fn execute(args: Args) -> i32 {
    match dispatch(args) {
        Ok(()) => 0,
        Err(e) => {
            eprintln!("error: {e}");
            let mut src = std::error::Error::source(&e);
            while let Some(s) = src {
                eprintln!("  caused by: {s}");
                src = s.source();
            }
            e.exit_code()
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn voting_sizes() {
        assert_eq!(parse_q("1..4").unwrap(), vec![1, 2, 3, 4]);
        assert_eq!(parse_q("2..=3").unwrap(), vec![2, 3]);
        assert_eq!(parse_q("1, 5,10").unwrap(), vec![1, 5, 10]);
        assert!(parse_q("0..3").is_err());
        assert!(parse_q("a").is_err());
    }

    #[test]
    fn flags_parse() {
        let a = Args::try_parse_from([
            "lot", "--endpoint", "http://x", "sample", "--per-question", "10", "--template", "cot-zeroshot",
        ])
        .unwrap();
        let cfg = effective_config(
            &Global { run_dir: Some(tempfile::tempdir().unwrap().path().join("r")), ..a.global },
            &a.command,
        )
        .unwrap();
        assert_eq!(cfg.model.endpoint, "http://x");
        assert_eq!(cfg.sampling.per_question, 10);
        assert!(Args::try_parse_from(["lot", "verify", "eval", "--q", "1..50"]).is_ok());
        assert!(Args::try_parse_from(["lot", "landscape", "--projector", "tsne", "--bins", "5", "--seed", "7"]).is_ok());
    }

    #[test]
    fn bad_template_is_validation_error() {
        let a = Args::try_parse_from(["lot", "sample", "--template", "nope"]).unwrap();
        let e = effective_config(&a.global, &a.command).unwrap_err();
        assert_eq!(e.exit_code(), 2);
    }
}

//! Run directory bookkeeping: the manifest, artifact checksums, atomic
//! writes and the single-owner lock.

use std::collections::BTreeMap;
use std::fmt;
use std::fs::{self, File};
use std::path::{Path, PathBuf};

use fs2::FileExt;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{CliError, CliResult};

pub const MANIFEST: &str = "manifest.json";
const LOCK: &str = ".lock";

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Stage {
    Sample,
    Featurize,
    Landscape,
    Verify,
    Stats,
}

impl Stage {
    pub const ALL: [Stage; 5] = [Stage::Sample, Stage::Featurize, Stage::Landscape, Stage::Verify, Stage::Stats];

    pub fn as_str(self) -> &'static str {
        match self {
            Stage::Sample => "sample",
            Stage::Featurize => "featurize",
            Stage::Landscape => "landscape",
            Stage::Verify => "verify",
            Stage::Stats => "stats",
        }
    }

    /// Artifact directory inside the run directory.
    pub fn dir(self) -> &'static str {
        match self {
            Stage::Sample => "trajectories",
            Stage::Featurize => "features",
            Stage::Landscape => "landscape",
            Stage::Verify => "verifier",
            Stage::Stats => "stats",
        }
    }

    pub fn upstream(self) -> &'static [Stage] {
        match self {
            Stage::Sample => &[],
            Stage::Featurize => &[Stage::Sample],
            Stage::Landscape | Stage::Verify => &[Stage::Sample, Stage::Featurize],
            Stage::Stats => &[Stage::Sample, Stage::Featurize, Stage::Landscape],
        }
    }
}

impl fmt::Display for Stage {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct StageRecord {
    pub complete: bool,
    /// Digest of the configuration the stage was computed with.
    pub inputs: String,
    /// Relative artifact path -> sha256.
    pub artifacts: BTreeMap<String, String>,
}

#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct Tags {
    pub method: String,
    pub model: String,
    pub dataset: String,
}

#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct Seeds {
    pub split: u64,
    pub sampling: u64,
    pub landscape: u64,
    pub verifier: u64,
}

#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct RunManifest {
    pub run_id: String,
    pub tags: Tags,
    pub seeds: Seeds,
    /// Effective configuration of the most recent stage run, as TOML.
    pub config: String,
    /// Directory the configuration's relative paths resolve against.
    #[serde(default)]
    pub base_dir: PathBuf,
    pub stages: BTreeMap<Stage, StageRecord>,
}

impl RunManifest {
    pub fn is_complete(&self, stage: Stage) -> bool {
        self.stages.get(&stage).is_some_and(|r| r.complete)
    }

    pub fn load(run_dir: &Path) -> CliResult<Option<Self>> {
        let path = run_dir.join(MANIFEST);
        match fs::read_to_string(&path) {
            Ok(text) => serde_json::from_str(&text)
                .map(Some)
                .map_err(|e| CliError::Config(format!("unreadable manifest {}: {e}", path.display()))),
            Err(e) if e.kind() == std::io::ErrorKind::NotFound => Ok(None),
            Err(e) => Err(CliError::io(path, e)),
        }
    }

    pub fn save(&self, run_dir: &Path) -> CliResult<()> {
        let text = serde_json::to_string_pretty(self).expect("manifest serializes") + "\n";
        write_atomic(&run_dir.join(MANIFEST), text.as_bytes())
    }

    /// Clears the flag of every completed stage whose artifacts are missing
    /// or fail their checksum, and of everything downstream of it.
    pub fn revalidate(&mut self, run_dir: &Path) -> Vec<Stage> {
        let mut invalid = Vec::new();
        for stage in Stage::ALL {
            let Some(rec) = self.stages.get(&stage) else { continue };
            if !rec.complete {
                continue;
            }
            let broken = stage.upstream().iter().any(|u| invalid.contains(u))
                || rec.artifacts.iter().any(|(rel, sum)| checksum(&run_dir.join(rel)).ok().as_ref() != Some(sum));
            if broken {
                invalid.push(stage);
            }
        }
        for s in &invalid {
            if let Some(rec) = self.stages.get_mut(s) {
                rec.complete = false;
            }
        }
        invalid
    }

    /// Marks `stage` done and clears every downstream flag.
    pub fn record(&mut self, stage: Stage, inputs: String, artifacts: BTreeMap<String, String>) {
        for s in Stage::ALL {
            if s.upstream().contains(&stage) {
                if let Some(rec) = self.stages.get_mut(&s) {
                    rec.complete = false;
                }
            }
        }
        self.stages.insert(stage, StageRecord { complete: true, inputs, artifacts });
    }
}

pub fn digest(bytes: &[u8]) -> String {
    hex::encode(Sha256::digest(bytes))
}

pub fn checksum(path: &Path) -> std::io::Result<String> {
    Ok(digest(&fs::read(path)?))
}

/// Writes through a sibling temp file and renames over `path`.
pub fn write_atomic(path: &Path, bytes: &[u8]) -> CliResult<()> {
    let tmp = path.with_extension(format!(
        "{}.tmp",
        path.extension().and_then(|e| e.to_str()).unwrap_or_default()
    ));
    fs::write(&tmp, bytes).map_err(|e| CliError::io(&tmp, e))?;
    fs::rename(&tmp, path).map_err(|e| CliError::io(path, e))
}

/// Staging directory for one stage's artifacts; [`StageDir::commit`]
/// swaps it into place so readers never see a half-written stage.
pub struct StageDir {
    pub tmp: PathBuf,
    target: PathBuf,
}

impl StageDir {
    pub fn begin(run_dir: &Path, stage: Stage) -> CliResult<Self> {
        let target = run_dir.join(stage.dir());
        let tmp = run_dir.join(format!(".{}.tmp", stage.dir()));
        if tmp.exists() {
            fs::remove_dir_all(&tmp).map_err(|e| CliError::io(&tmp, e))?;
        }
        fs::create_dir_all(&tmp).map_err(|e| CliError::io(&tmp, e))?;
        Ok(StageDir { tmp, target })
    }

    pub fn path(&self, rel: &str) -> PathBuf {
        self.tmp.join(rel)
    }

    pub fn write(&self, rel: &str, bytes: &[u8]) -> CliResult<()> {
        let p = self.path(rel);
        if let Some(parent) = p.parent() {
            fs::create_dir_all(parent).map_err(|e| CliError::io(parent, e))?;
        }
        fs::write(&p, bytes).map_err(|e| CliError::io(&p, e))
    }

    /// Moves the staged files into place and returns their checksums keyed
    /// by path relative to the run directory.
    pub fn commit(self) -> CliResult<BTreeMap<String, String>> {
        let mut sums = BTreeMap::new();
        let prefix = self.target.file_name().and_then(|n| n.to_str()).unwrap_or_default().to_string();
        collect_checksums(&self.tmp, &prefix, &mut sums)?;
        if self.target.exists() {
            fs::remove_dir_all(&self.target).map_err(|e| CliError::io(&self.target, e))?;
        }
        fs::rename(&self.tmp, &self.target).map_err(|e| CliError::io(&self.target, e))?;
        Ok(sums)
    }
}

fn collect_checksums(dir: &Path, rel: &str, out: &mut BTreeMap<String, String>) -> CliResult<()> {
    let mut entries: Vec<_> = fs::read_dir(dir)
        .map_err(|e| CliError::io(dir, e))?
        .collect::<Result<_, _>>()
        .map_err(|e| CliError::io(dir, e))?;
    entries.sort_by_key(|e| e.file_name());
    for e in entries {
        let name = e.file_name().to_string_lossy().into_owned();
        let path = e.path();
        let child = format!("{rel}/{name}");
        if path.is_dir() {
            collect_checksums(&path, &child, out)?;
        } else {
            out.insert(child, checksum(&path).map_err(|err| CliError::io(&path, err))?);
        }
    }
    Ok(())
}

/// Exclusive ownership of a run directory for the life of the value.
pub struct RunLock {
    file: File,
}

impl RunLock {
    pub fn acquire(run_dir: &Path) -> CliResult<Self> {
        fs::create_dir_all(run_dir).map_err(|e| CliError::io(run_dir, e))?;
        let path = run_dir.join(LOCK);
        let file = File::create(&path).map_err(|e| CliError::io(&path, e))?;
        file.try_lock_exclusive().map_err(|_| CliError::Locked(run_dir.to_path_buf()))?;
        Ok(RunLock { file })
    }
}

impl Drop for RunLock {
    fn drop(&mut self) {
        let _ = FileExt::unlock(&self.file);
    }
}

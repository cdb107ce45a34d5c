use std::path::PathBuf;

use crate::manifest::Stage;

pub type CliResult<T> = std::result::Result<T, CliError>;

#[derive(Debug, thiserror::Error)]
pub enum CliError {
    #[error("configuration error: {0}")]
    Config(String),
    #[error("stage `{stage}` needs `{missing}` to be completed first")]
    Dependency { stage: Stage, missing: Stage },
    #[error("configuration drift in completed stage `{stage}`: {detail}; rerun with --force to recompute")]
    Drift { stage: Stage, detail: String },
    #[error("run directory {0} is in use by another process")]
    Locked(PathBuf),
    #[error("stage `{stage}` failed: {source}")]
    Stage {
        stage: Stage,
        #[source]
        source: lot_core::Error,
    },
    #[error(transparent)]
    Core(#[from] lot_core::Error),
    #[error("I/O error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
}

impl CliError {
    pub fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        CliError::Io { path: path.into(), source }
    }

    pub fn in_stage(stage: Stage) -> impl Fn(lot_core::Error) -> CliError {
        move |source| CliError::Stage { stage, source }
    }

    /// Process exit code: 2 validation, 3 dependency, 4 transport, 1 other.
    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Config(_) | CliError::Drift { .. } | CliError::Locked(_) => 2,
            CliError::Dependency { .. } => 3,
            CliError::Stage { source, .. } | CliError::Core(source) => core_code(source),
            CliError::Io { .. } => 1,
        }
    }
}

fn core_code(e: &lot_core::Error) -> i32 {
    use lot_core::Error as E;
    match e.root() {
        E::Transport { .. } => 4,
        E::Capability(_) | E::Reference(_) => 3,
        E::Io { .. } => 1,
        _ => 2,
    }
}

//! Dataset I/O, run configuration, orchestration and persistence.

pub mod artifacts;
pub mod config;
pub mod manifest;
mod run;
pub mod synthetic;

use std::path::PathBuf;

use thiserror::Error;

pub use artifacts::{
    evaluate, EvaluationReport, FailureRecord, PredictionRecord, ReportContext, RunArtifacts,
};
pub use config::{ConfigError, ConfigOverrides, MockSettings, RunConfig, UncertaintyMode};
pub use manifest::{load_manifest, DatasetManifest, ManifestEntry, ManifestError, Split};
pub use run::{
    run_ddl, run_uncertainty_mode, with_strategy, ImageFailure, ImageOutcome, PromptSelection,
    Runner, UncertaintyComparison,
};

#[derive(Debug, Error)]
pub enum PipelineError {
    #[error(transparent)]
    Config(#[from] ConfigError),
    #[error(transparent)]
    Manifest(#[from] ManifestError),
    #[error("prompt search failed: {0}")]
    Dape(#[from] crate::dape::DapeError),
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("malformed artifact {0}")]
    Artifact(String),
    #[error("{0}")]
    Runtime(String),
}

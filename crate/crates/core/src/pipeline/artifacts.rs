//! Run outputs and their on-disk layout.
//!
//! ```text
//! <out>/config.json         resolved configuration
//! <out>/dape_history.jsonl  one scored prompt per line
//! <out>/predictions.jsonl   one test image per line
//! <out>/report.json         metrics, calibration, KDE
//! <out>/failures.jsonl      images excluded from metrics
//! ```
//!
//! Every line and document carries the run seed and config hash.

use std::collections::{HashMap, HashSet};
use std::io::BufRead;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use super::config::{RunConfig, UncertaintyMode};
use super::manifest::{DatasetManifest, Split};
use super::PipelineError;
use crate::consolidation::{ScoredDetection, Strategy};
use crate::dape::{EvolveOutcome, PromptHistory, PromptRecord};
use crate::evalcal::{
    calibration, calibration_pairs, kde, CalibrationReport, EvalSample, KdeCurve, KdeSplit,
    MapReport,
};

pub const CONFIG_FILE: &str = "config.json";
pub const HISTORY_FILE: &str = "dape_history.jsonl";
pub const PREDICTIONS_FILE: &str = "predictions.jsonl";
pub const REPORT_FILE: &str = "report.json";
pub const FAILURES_FILE: &str = "failures.jsonl";

/// Decimal places kept for persisted box coordinates.
pub const COORD_DECIMALS: i32 = 4;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PredictionRecord {
    pub image_id: String,
    pub seed: u64,
    pub config_hash: String,
    pub strategy: Strategy,
    pub detections: Vec<ScoredDetection>,
    /// Views whose model call failed and contributed nothing.
    #[serde(default)]
    pub view_failures: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FailureRecord {
    pub image_id: String,
    pub seed: u64,
    pub config_hash: String,
    pub stage: String,
    pub error: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
struct HistoryLine {
    #[serde(flatten)]
    record: PromptRecord,
    seed: u64,
    config_hash: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PromptSearchSummary {
    pub best: PromptRecord,
    pub generations_run: usize,
    pub converged_at: Option<usize>,
    pub skipped: Vec<usize>,
    pub history_len: usize,
}

impl PromptSearchSummary {
    pub fn new(outcome: &EvolveOutcome, history: &PromptHistory) -> Self {
        Self {
            best: outcome.best.clone(),
            generations_run: outcome.generations_run,
            converged_at: outcome.converged_at,
            skipped: outcome.skipped.clone(),
            history_len: history.len(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvaluationReport {
    pub seed: u64,
    pub config_hash: String,
    pub strategy: Strategy,
    pub uncertainty: UncertaintyMode,
    pub prompt: String,
    /// Test images in the manifest.
    pub n_images: usize,
    pub n_evaluated: usize,
    pub n_failed: usize,
    pub map: MapReport,
    pub calibration: Option<CalibrationReport>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub calibration_note: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub prompt_search: Option<PromptSearchSummary>,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub kde: Vec<KdeCurve>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub kde_note: Option<String>,
}

/// Context shared by every report of one run.
#[derive(Debug, Clone)]
pub struct ReportContext<'a> {
    pub seed: u64,
    pub config_hash: &'a str,
    pub strategy: Strategy,
    pub uncertainty: UncertaintyMode,
    pub prompt: &'a str,
}

/// Metrics over the manifest's test split.
///
/// Images listed in `failures` are excluded; test images without a
/// prediction record count as evaluated with no detections.
pub fn evaluate(
    ctx: &ReportContext<'_>,
    manifest: &DatasetManifest,
    predictions: &[PredictionRecord],
    failures: &[FailureRecord],
    history: Option<&PromptHistory>,
) -> EvaluationReport {
    let failed: HashSet<&str> = failures.iter().map(|f| f.image_id.as_str()).collect();
    let by_id: HashMap<&str, &PredictionRecord> = predictions
        .iter()
        .map(|p| (p.image_id.as_str(), p))
        .collect();
    let test = manifest.split(Split::Test);
    let samples: Vec<EvalSample> = test
        .iter()
        .filter(|e| !failed.contains(e.image_id.as_str()))
        .map(|e| EvalSample {
            image_id: e.image_id.clone(),
            ground_truth: e.ground_truth.clone(),
            predictions: by_id
                .get(e.image_id.as_str())
                .map(|p| p.detections.clone())
                .unwrap_or_default(),
        })
        .collect();
    let n_failed = test
        .iter()
        .filter(|e| failed.contains(e.image_id.as_str()))
        .count();

    let (calibration, calibration_note) = match calibration(&calibration_pairs(&samples)) {
        Ok(r) => (Some(r), None),
        Err(e) => (None, Some(e.to_string())),
    };
    let (kde, kde_note) = match history {
        None => (Vec::new(), None),
        Some(h) => {
            let scores: Vec<f64> = h.records().iter().map(|r| r.score).collect();
            match kde(&scores, KdeSplit::Median) {
                Ok(curves) => (curves, None),
                Err(e) => (Vec::new(), Some(e.to_string())),
            }
        }
    };
    EvaluationReport {
        seed: ctx.seed,
        config_hash: ctx.config_hash.to_string(),
        strategy: ctx.strategy,
        uncertainty: ctx.uncertainty,
        prompt: ctx.prompt.to_string(),
        n_images: test.len(),
        n_evaluated: samples.len(),
        n_failed,
        map: MapReport::compute(&samples),
        calibration,
        calibration_note,
        prompt_search: None,
        kde,
        kde_note,
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct RunArtifacts {
    pub config: RunConfig,
    pub config_hash: String,
    pub seed: u64,
    pub prompt: String,
    pub history: Option<PromptHistory>,
    pub predictions: Vec<PredictionRecord>,
    pub failures: Vec<FailureRecord>,
    pub report: EvaluationReport,
}

fn to_lines<T: Serialize>(items: impl IntoIterator<Item = T>) -> String {
    let mut out = String::new();
    for item in items {
        out.push_str(&serde_json::to_string(&item).expect("artifact serializes"));
        out.push('\n');
    }
    out
}

fn write(path: PathBuf, contents: &str) -> Result<(), PipelineError> {
    std::fs::write(&path, contents).map_err(|source| PipelineError::Io { path, source })
}

impl RunArtifacts {
    pub fn predictions_jsonl(&self) -> String {
        to_lines(&self.predictions)
    }

    pub fn failures_jsonl(&self) -> String {
        to_lines(&self.failures)
    }

    pub fn history_jsonl(&self) -> String {
        self.history
            .as_ref()
            .map(|h| history_jsonl(h, self.seed, &self.config_hash))
            .unwrap_or_default()
    }

    pub fn config_json(&self) -> String {
        let value = serde_json::json!({
            "seed": self.seed,
            "config_hash": self.config_hash,
            "config": self.config,
        });
        serde_json::to_string_pretty(&value).expect("config serializes") + "\n"
    }

    /// Write all five files into `dir`, creating it if needed.
    pub fn persist(&self, dir: impl AsRef<Path>) -> Result<(), PipelineError> {
        let dir = dir.as_ref();
        std::fs::create_dir_all(dir).map_err(|source| PipelineError::Io {
            path: dir.to_path_buf(),
            source,
        })?;
        write(dir.join(CONFIG_FILE), &self.config_json())?;
        write(dir.join(HISTORY_FILE), &self.history_jsonl())?;
        write(dir.join(PREDICTIONS_FILE), &self.predictions_jsonl())?;
        write(dir.join(REPORT_FILE), &report_json(&self.report))?;
        write(dir.join(FAILURES_FILE), &self.failures_jsonl())?;
        Ok(())
    }
}

pub fn report_json(report: &EvaluationReport) -> String {
    serde_json::to_string_pretty(report).expect("report serializes") + "\n"
}

pub fn history_jsonl(history: &PromptHistory, seed: u64, config_hash: &str) -> String {
    to_lines(history.records().iter().map(|r| HistoryLine {
        record: r.clone(),
        seed,
        config_hash: config_hash.to_string(),
    }))
}

fn read_lines<T: for<'de> Deserialize<'de>>(path: &Path) -> Result<Vec<T>, PipelineError> {
    let file = std::fs::File::open(path).map_err(|source| PipelineError::Io {
        path: path.to_path_buf(),
        source,
    })?;
    let mut out = Vec::new();
    for (n, line) in std::io::BufReader::new(file).lines().enumerate() {
        let line = line.map_err(|source| PipelineError::Io {
            path: path.to_path_buf(),
            source,
        })?;
        if line.trim().is_empty() {
            continue;
        }
        out.push(
            serde_json::from_str(&line).map_err(|e| {
                PipelineError::Artifact(format!("{}:{}: {e}", path.display(), n + 1))
            })?,
        );
    }
    Ok(out)
}

pub fn load_predictions(path: impl AsRef<Path>) -> Result<Vec<PredictionRecord>, PipelineError> {
    read_lines(path.as_ref())
}

/// Failure log; a missing file means no failures.
pub fn load_failures(path: impl AsRef<Path>) -> Result<Vec<FailureRecord>, PipelineError> {
    let path = path.as_ref();
    if !path.exists() {
        return Ok(Vec::new());
    }
    read_lines(path)
}

pub fn load_report(path: impl AsRef<Path>) -> Result<EvaluationReport, PipelineError> {
    let path = path.as_ref();
    let text = std::fs::read_to_string(path).map_err(|source| PipelineError::Io {
        path: path.to_path_buf(),
        source,
    })?;
    serde_json::from_str(&text)
        .map_err(|e| PipelineError::Artifact(format!("{}: {e}", path.display())))
}

/// Prompt history from a run directory's log (extra fields are ignored).
pub fn load_history(path: impl AsRef<Path>) -> Result<PromptHistory, PipelineError> {
    Ok(PromptHistory::load(path)?)
}

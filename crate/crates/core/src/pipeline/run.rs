//! End-to-end orchestration: prompt search, multi-view inference,
//! consolidation and evaluation.

use log::{info, warn};
use rayon::prelude::*;
use rayon::ThreadPool;

use super::artifacts::{
    evaluate, FailureRecord, PredictionRecord, PromptSearchSummary, ReportContext, RunArtifacts,
    COORD_DECIMALS,
};
use super::config::{RunConfig, UncertaintyMode, LINGUISTIC_TEMPERATURE};
use super::manifest::{DatasetManifest, ManifestEntry, Split};
use super::PipelineError;
use crate::consolidation::{consolidate, ConsensusConfig, ScoredDetection, Strategy};
use crate::dape::{self, DapeError, PromptHistory};
use crate::evalcal::{EvalSample, MapReport};
use crate::geometry::{invert_transform, ImageDims, TransformSpec};
use crate::lvlm_client::{
    ClientError, Detection, DetectionSet, GroundRequest, Grounder, MetaOptimizer,
};
use crate::seeding;
use crate::viewgen::{make_roster, render_view, RasterImage};

const ROSTER_TAG: u64 = 0x7267_7374;

/// Everything one run needs, built once.
pub struct Runner<'a> {
    cfg: &'a RunConfig,
    grounder: &'a dyn Grounder,
    meta: &'a dyn MetaOptimizer,
    consensus: ConsensusConfig,
    seed: u64,
    config_hash: String,
    pool: ThreadPool,
}

/// Per-image inputs shared by every call on that image.
#[derive(Clone, Copy)]
struct Frame<'i> {
    entry: &'i ManifestEntry,
    dims: ImageDims,
    image: Option<&'i RasterImage>,
    prompt: &'i str,
    temperature: f64,
}

/// Result of grounding one image through all views.
#[derive(Debug, Clone, PartialEq)]
pub struct ImageOutcome {
    pub detections: Vec<ScoredDetection>,
    pub view_failures: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ImageFailure {
    pub stage: &'static str,
    pub error: String,
}

impl ImageFailure {
    fn new(stage: &'static str, error: impl ToString) -> Self {
        Self {
            stage,
            error: error.to_string(),
        }
    }
}

/// The instruction used for test inference and how it was obtained.
#[derive(Debug, Clone, PartialEq)]
pub struct PromptSelection {
    pub prompt: String,
    pub history: Option<PromptHistory>,
    pub summary: Option<PromptSearchSummary>,
}

/// Outputs of running both uncertainty modes with one selected prompt.
#[derive(Debug, Clone, PartialEq)]
pub struct UncertaintyComparison {
    pub visual: RunArtifacts,
    pub linguistic: RunArtifacts,
}

impl<'a> Runner<'a> {
    pub fn new(
        cfg: &'a RunConfig,
        grounder: &'a dyn Grounder,
        meta: &'a dyn MetaOptimizer,
    ) -> Result<Self, PipelineError> {
        cfg.validate()?;
        let pool = rayon::ThreadPoolBuilder::new()
            .num_threads(cfg.parallelism)
            .build()
            .map_err(|e| PipelineError::Runtime(e.to_string()))?;
        Ok(Self {
            cfg,
            grounder,
            meta,
            consensus: cfg.consensus(),
            seed: cfg.effective_seed(),
            config_hash: cfg.config_hash(),
            pool,
        })
    }

    pub fn config_hash(&self) -> &str {
        &self.config_hash
    }

    fn image_for(
        &self,
        entry: &ManifestEntry,
    ) -> Result<(ImageDims, Option<RasterImage>), ImageFailure> {
        if !self.grounder.needs_pixels() {
            let dims = entry
                .dims()
                .ok_or_else(|| ImageFailure::new("load", "width/height required without pixels"))?;
            return Ok((dims, None));
        }
        let img = RasterImage::open(&entry.image_path).map_err(|e| ImageFailure::new("load", e))?;
        if let Some(declared) = entry.dims() {
            if declared != img.dims() {
                return Err(ImageFailure::new(
                    "load",
                    format!(
                        "manifest says {}x{}, file is {}x{}",
                        declared.width,
                        declared.height,
                        img.dims().width,
                        img.dims().height
                    ),
                ));
            }
        }
        Ok((img.dims(), Some(img)))
    }

    fn call(
        &self,
        frame: &Frame<'_>,
        view_index: usize,
        spec: TransformSpec,
    ) -> Result<DetectionSet, ClientError> {
        self.grounder.ground(&GroundRequest {
            image_id: &frame.entry.image_id,
            view_index,
            spec,
            dims: spec.output_dims(frame.dims),
            image: frame.image,
            prompt: frame.prompt,
            temperature: frame.temperature,
        })
    }

    /// Ground one view and bring its boxes back to the reference frame.
    fn view(
        &self,
        frame: &Frame<'_>,
        view_index: usize,
        spec: TransformSpec,
    ) -> Result<DetectionSet, ClientError> {
        if spec.is_identity() {
            return self.call(frame, view_index, spec);
        }
        let rendered = match frame.image {
            Some(img) => {
                Some(render_view(img, &spec).map_err(|e| ClientError::Image(e.to_string()))?)
            }
            None => None,
        };
        let set = self.call(
            &Frame {
                image: rendered.as_ref(),
                ..*frame
            },
            view_index,
            spec,
        )?;
        let mut dropped = set.dropped;
        let detections = set
            .detections
            .into_iter()
            .filter_map(|d| match invert_transform(&d.bbox, &spec, frame.dims) {
                Ok(bbox) => Some(Detection {
                    bbox,
                    label: d.label,
                }),
                Err(_) => {
                    dropped += 1;
                    None
                }
            })
            .collect();
        Ok(DetectionSet {
            detections,
            view_index,
            raw_response: set.raw_response,
            dropped,
            clamped: set.clamped,
        })
    }

    /// Reference call only, unscored (cheap prompt scoring).
    fn single_pass(
        &self,
        entry: &ManifestEntry,
        prompt: &str,
    ) -> Result<ImageOutcome, ImageFailure> {
        let (dims, image) = self.image_for(entry)?;
        let frame = Frame {
            entry,
            dims,
            image: image.as_ref(),
            prompt,
            temperature: self.cfg.target_temperature,
        };
        let set = self
            .call(&frame, 0, TransformSpec::Identity)
            .map_err(|e| ImageFailure::new("reference", e))?;
        Ok(ImageOutcome {
            detections: set
                .detections
                .into_iter()
                .map(|d| ScoredDetection {
                    bbox: d.bbox,
                    label: d.label,
                    sigma: None,
                })
                .collect(),
            view_failures: 0,
        })
    }

    /// Reference inference, M further calls, back-projection and
    /// consolidation for one image.
    pub fn infer_image(
        &self,
        entry: &ManifestEntry,
        prompt: &str,
        mode: UncertaintyMode,
    ) -> Result<ImageOutcome, ImageFailure> {
        let (dims, image) = self.image_for(entry)?;
        let reference_frame = Frame {
            entry,
            dims,
            image: image.as_ref(),
            prompt,
            temperature: self.cfg.target_temperature,
        };
        let reference = self
            .call(&reference_frame, 0, TransformSpec::Identity)
            .map_err(|e| ImageFailure::new("reference", e))?;

        let (specs, temperature) = match mode {
            UncertaintyMode::Visual => {
                let roster_seed =
                    seeding::derive(self.seed, &[seeding::hash_str(&entry.image_id), ROSTER_TAG]);
                let roster = make_roster(roster_seed, self.cfg.views)
                    .map_err(|e| ImageFailure::new("roster", e))?;
                (roster.specs, self.cfg.target_temperature)
            }
            UncertaintyMode::Linguistic => (
                vec![TransformSpec::Identity; self.cfg.views],
                LINGUISTIC_TEMPERATURE,
            ),
        };
        let frame = Frame {
            temperature,
            ..reference_frame
        };
        let results: Vec<Result<DetectionSet, ClientError>> = specs
            .par_iter()
            .enumerate()
            .map(|(i, spec)| self.view(&frame, i + 1, *spec))
            .collect();
        let mut view_failures = 0;
        let views: Vec<DetectionSet> = results
            .into_iter()
            .enumerate()
            .map(|(i, r)| {
                r.unwrap_or_else(|e| {
                    warn!(
                        "{}: view {} failed ({e}); using an empty set",
                        entry.image_id,
                        i + 1
                    );
                    view_failures += 1;
                    DetectionSet::empty(i + 1)
                })
            })
            .collect();
        let detections = consolidate(self.cfg.strategy, &reference, &views, &self.consensus)
            .map_err(|e| ImageFailure::new("consolidation", e))?;
        Ok(ImageOutcome {
            detections,
            view_failures,
        })
    }

    /// Mean of mAP@{25,50,75} over the dev split. Failed images count as
    /// images with no detections.
    pub fn score_prompt(&self, dev: &[&ManifestEntry], prompt: &str) -> f64 {
        let samples: Vec<EvalSample> = self.pool.install(|| {
            dev.par_iter()
                .map(|e| {
                    let outcome = if self.cfg.score_with_pipeline {
                        self.infer_image(e, prompt, self.cfg.uncertainty)
                    } else {
                        self.single_pass(e, prompt)
                    };
                    let predictions = outcome.map(|o| o.detections).unwrap_or_else(|f| {
                        warn!(
                            "{}: scoring call failed at {}: {}",
                            e.image_id, f.stage, f.error
                        );
                        Vec::new()
                    });
                    EvalSample {
                        image_id: e.image_id.clone(),
                        ground_truth: e.ground_truth.clone(),
                        predictions,
                    }
                })
                .collect()
        });
        MapReport::compute(&samples).mean()
    }

    /// Fixed prompt, prompt search on the dev split, or the vanilla prompt
    /// when there is nothing to search on.
    pub fn select_prompt(&self, data: &DatasetManifest) -> Result<PromptSelection, PipelineError> {
        if let Some(prompt) = &self.cfg.prompt {
            return Ok(PromptSelection {
                prompt: prompt.clone(),
                history: None,
                summary: None,
            });
        }
        let dev = data.split(Split::Dev);
        if dev.is_empty() {
            warn!("no dev images; using the vanilla prompt");
            return Ok(PromptSelection {
                prompt: dape::VANILLA_PROMPT.to_string(),
                history: None,
                summary: None,
            });
        }
        let mut scorer = |p: &str| -> Result<f64, DapeError> { Ok(self.score_prompt(&dev, p)) };
        let (history, outcome) = dape::run_dape(
            dape::VANILLA_PROMPT,
            self.meta,
            &mut scorer,
            self.cfg.max_generations,
        )?;
        info!(
            "selected prompt scoring {:.4} (vanilla {:.4}) after {} generations",
            outcome.best.score,
            history.baseline(),
            outcome.generations_run
        );
        Ok(PromptSelection {
            prompt: outcome.best.text.clone(),
            summary: Some(PromptSearchSummary::new(&outcome, &history)),
            history: Some(history),
        })
    }

    /// Ground every test image with `prompt` and evaluate.
    pub fn ground_split(
        &self,
        data: &DatasetManifest,
        selection: &PromptSelection,
        mode: UncertaintyMode,
    ) -> RunArtifacts {
        let test = data.split(Split::Test);
        let outcomes: Vec<Result<ImageOutcome, ImageFailure>> = self.pool.install(|| {
            test.par_iter()
                .map(|e| self.infer_image(e, &selection.prompt, mode))
                .collect()
        });
        let mut predictions = Vec::new();
        let mut failures = Vec::new();
        for (entry, outcome) in test.iter().zip(outcomes) {
            match outcome {
                Ok(o) => predictions.push(PredictionRecord {
                    image_id: entry.image_id.clone(),
                    seed: self.seed,
                    config_hash: self.config_hash.clone(),
                    strategy: self.cfg.strategy,
                    detections: o
                        .detections
                        .into_iter()
                        .map(|d| ScoredDetection {
                            bbox: d.bbox.rounded(COORD_DECIMALS),
                            ..d
                        })
                        .collect(),
                    view_failures: o.view_failures,
                }),
                Err(f) => {
                    warn!("{}: failed at {}: {}", entry.image_id, f.stage, f.error);
                    failures.push(FailureRecord {
                        image_id: entry.image_id.clone(),
                        seed: self.seed,
                        config_hash: self.config_hash.clone(),
                        stage: f.stage.to_string(),
                        error: f.error,
                    });
                }
            }
        }
        let ctx = ReportContext {
            seed: self.seed,
            config_hash: &self.config_hash,
            strategy: self.cfg.strategy,
            uncertainty: mode,
            prompt: &selection.prompt,
        };
        let mut report = evaluate(
            &ctx,
            data,
            &predictions,
            &failures,
            selection.history.as_ref(),
        );
        report.prompt_search = selection.summary.clone();
        let mut config = self.cfg.clone();
        config.uncertainty = mode;
        RunArtifacts {
            config,
            config_hash: self.config_hash.clone(),
            seed: self.seed,
            prompt: selection.prompt.clone(),
            history: selection.history.clone(),
            predictions,
            failures,
            report,
        }
    }
}

/// Prompt search on dev, grounding and consolidation on test, evaluation.
pub fn run_ddl(
    cfg: &RunConfig,
    data: &DatasetManifest,
    grounder: &dyn Grounder,
    meta: &dyn MetaOptimizer,
) -> Result<RunArtifacts, PipelineError> {
    let runner = Runner::new(cfg, grounder, meta)?;
    let selection = runner.select_prompt(data)?;
    Ok(runner.ground_split(data, &selection, cfg.uncertainty))
}

/// Run the test split under both uncertainty modes with one selected prompt.
pub fn run_uncertainty_mode(
    cfg: &RunConfig,
    data: &DatasetManifest,
    grounder: &dyn Grounder,
    meta: &dyn MetaOptimizer,
) -> Result<UncertaintyComparison, PipelineError> {
    let runner = Runner::new(cfg, grounder, meta)?;
    let selection = runner.select_prompt(data)?;
    Ok(UncertaintyComparison {
        visual: runner.ground_split(data, &selection, UncertaintyMode::Visual),
        linguistic: runner.ground_split(data, &selection, UncertaintyMode::Linguistic),
    })
}

/// Strategy-swapped copy of a config, for baseline comparisons.
pub fn with_strategy(cfg: &RunConfig, strategy: Strategy) -> RunConfig {
    RunConfig {
        strategy,
        ..cfg.clone()
    }
}

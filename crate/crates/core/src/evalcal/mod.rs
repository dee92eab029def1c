//! Detection metrics, calibration analysis and score-distribution KDE.

mod ap;
mod calibration;
mod kde;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::consolidation::ScoredDetection;
use crate::geometry::BoundingBox;

pub use ap::{average_precision, MapReport, MAP_THRESHOLDS};
pub use calibration::{
    calibration, calibration_pairs, kendall, kendall_p, pearson, ranks, reliability_bins, spearman,
    t_test_p, CalibrationBin, CalibrationReport, Correlation, Significance, N_BINS,
};
pub use kde::{density_at, kde, scott_bandwidth, CurveLabel, KdeCurve, KdeSplit, GRID_POINTS};

#[derive(Debug, Error, Clone, PartialEq)]
pub enum EvalError {
    #[error("need at least {needed} values, got {found}")]
    InsufficientData { needed: usize, found: usize },
    #[error("input has no spread; the statistic is undefined")]
    DegenerateInput,
}

/// Ground truth and predictions for one image.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalSample {
    pub image_id: String,
    pub ground_truth: Vec<BoundingBox>,
    pub predictions: Vec<ScoredDetection>,
}

impl EvalSample {
    /// Predictions with uniform confidence, kept in the given order.
    pub fn unscored(
        image_id: impl Into<String>,
        ground_truth: Vec<BoundingBox>,
        boxes: impl IntoIterator<Item = BoundingBox>,
    ) -> Self {
        Self::scored(image_id, ground_truth, boxes.into_iter().map(|b| (b, None)))
    }

    pub fn scored(
        image_id: impl Into<String>,
        ground_truth: Vec<BoundingBox>,
        predictions: impl IntoIterator<Item = (BoundingBox, Option<f64>)>,
    ) -> Self {
        Self {
            image_id: image_id.into(),
            ground_truth,
            predictions: predictions
                .into_iter()
                .map(|(bbox, sigma)| ScoredDetection {
                    bbox,
                    label: String::new(),
                    sigma,
                })
                .collect(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Improvement {
    pub metric: String,
    pub baseline: f64,
    pub treated: f64,
    /// `None` when the baseline is not positive.
    pub delta_percent: Option<f64>,
    pub rendered: String,
}

/// `100 (treated - baseline) / baseline`, or `None` for a non-positive baseline.
pub fn relative_delta(baseline: f64, treated: f64) -> Option<f64> {
    (baseline > 0.0).then(|| 100.0 * (treated - baseline) / baseline)
}

/// One decimal with an explicit plus sign; "undefined" when absent.
pub fn render_delta(delta: Option<f64>) -> String {
    match delta {
        None => "undefined".to_string(),
        Some(d) => {
            let rounded = (d * 10.0).round() / 10.0;
            if rounded > 0.0 {
                format!("+{rounded:.1}%")
            } else if rounded < 0.0 {
                format!("{rounded:.1}%")
            } else {
                "0.0%".to_string()
            }
        }
    }
}

/// Relative change of every mAP threshold against a baseline.
pub fn improvement_table(baseline: &MapReport, treated: &MapReport) -> Vec<Improvement> {
    baseline
        .metrics()
        .into_iter()
        .zip(treated.metrics())
        .map(|((name, b), (_, t))| {
            let delta_percent = relative_delta(b, t);
            Improvement {
                metric: name.to_string(),
                baseline: b,
                treated: t,
                delta_percent,
                rendered: render_delta(delta_percent),
            }
        })
        .collect()
}

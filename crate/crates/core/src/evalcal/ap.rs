//! Single-class average precision with global pooling.

use serde::{Deserialize, Serialize};

use super::EvalSample;
use crate::geometry::iou;

pub const MAP_THRESHOLDS: [f64; 3] = [0.25, 0.50, 0.75];

/// AP at `iou_threshold` over all samples pooled together.
///
/// Detections are ranked by confidence (unscored ones count as 1.0), ties
/// kept in input order. Each is matched to the unmatched ground truth of its
/// own image with the highest IoU; it is a true positive when that IoU
/// reaches the threshold. The result is the exact area under the
/// precision envelope of the all-point PR curve.
pub fn average_precision(samples: &[EvalSample], iou_threshold: f64) -> f64 {
    let total_gt: usize = samples.iter().map(|s| s.ground_truth.len()).sum();
    let mut ranked: Vec<(f64, usize, usize)> = samples
        .iter()
        .enumerate()
        .flat_map(|(s, sample)| {
            sample
                .predictions
                .iter()
                .enumerate()
                .map(move |(p, pred)| (pred.sigma.unwrap_or(1.0), s, p))
        })
        .collect();
    if total_gt == 0 {
        return if ranked.is_empty() { 1.0 } else { 0.0 };
    }
    ranked.sort_by(|a, b| b.0.total_cmp(&a.0));

    let mut taken: Vec<Vec<bool>> = samples
        .iter()
        .map(|s| vec![false; s.ground_truth.len()])
        .collect();
    let mut hits = Vec::with_capacity(ranked.len());
    for &(_, s, p) in &ranked {
        let pred = &samples[s].predictions[p].bbox;
        let best = samples[s]
            .ground_truth
            .iter()
            .enumerate()
            .filter(|(g, _)| !taken[s][*g])
            .map(|(g, gt)| (g, iou(pred, gt)))
            .fold(None::<(usize, f64)>, |acc, (g, o)| match acc {
                Some((_, best)) if best >= o => acc,
                _ => Some((g, o)),
            });
        match best {
            Some((g, o)) if o >= iou_threshold => {
                taken[s][g] = true;
                hits.push(true);
            }
            _ => hits.push(false),
        }
    }
    area_under_envelope(&hits, total_gt)
}

/// All-point interpolated AP for a ranked hit list.
pub(crate) fn area_under_envelope(hits: &[bool], total_gt: usize) -> f64 {
    let mut tp = 0usize;
    let mut points = Vec::with_capacity(hits.len());
    for (rank, &hit) in hits.iter().enumerate() {
        tp += usize::from(hit);
        let precision = tp as f64 / (rank + 1) as f64;
        let recall = tp as f64 / total_gt as f64;
        points.push((recall, precision));
    }
    // precision envelope: running max from the right
    for i in (0..points.len().saturating_sub(1)).rev() {
        points[i].1 = points[i].1.max(points[i + 1].1);
    }
    let mut area = 0.0;
    let mut prev_recall = 0.0;
    for (recall, precision) in points {
        area += (recall - prev_recall) * precision;
        prev_recall = recall;
    }
    area
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MapReport {
    #[serde(rename = "mAP@25")]
    pub map25: f64,
    #[serde(rename = "mAP@50")]
    pub map50: f64,
    #[serde(rename = "mAP@75")]
    pub map75: f64,
}

impl MapReport {
    pub fn compute(samples: &[EvalSample]) -> Self {
        let [a, b, c] = MAP_THRESHOLDS.map(|t| average_precision(samples, t));
        Self {
            map25: a,
            map50: b,
            map75: c,
        }
    }

    /// Arithmetic mean of the three thresholds.
    pub fn mean(&self) -> f64 {
        (self.map25 + self.map50 + self.map75) / 3.0
    }

    pub fn metrics(&self) -> [(&'static str, f64); 3] {
        [
            ("mAP@25", self.map25),
            ("mAP@50", self.map50),
            ("mAP@75", self.map75),
        ]
    }
}

impl std::fmt::Display for MapReport {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(
            f,
            "mAP@25 {:.4}  mAP@50 {:.4}  mAP@75 {:.4}",
            self.map25, self.map50, self.map75
        )
    }
}

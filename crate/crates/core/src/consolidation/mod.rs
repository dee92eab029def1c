//! Multi-view consolidation of box hypotheses.
//!
//! The primary strategy is reference-anchored Hungarian consolidation (RHC):
//! boxes from the unperturbed view are anchors, each perturbed view is
//! matched one-to-one against them, and every anchor is scored by how often
//! and how tightly it recurs. Simple averaging (SA), IoU-weighted averaging
//! (WA) and DBSCAN clustering are provided as baselines.
//!
//! All inputs must already be in the reference frame. Every strategy is
//! invariant to the order of the non-reference views: per-view work is
//! independent, and wherever boxes from several views are pooled or summed
//! they are first put in a canonical order.

mod dbscan;
mod hungarian;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::geometry::{iou, BoundingBox};
use crate::lvlm_client::DetectionSet;

pub use dbscan::dbscan;
pub use hungarian::{assignment_cost, hungarian, CostMatrix};

pub const DEFAULT_TAU: f64 = 0.1;
pub const DEFAULT_OMEGA1: f64 = 0.6;
pub const DEFAULT_OMEGA2: f64 = 0.4;
pub const DEFAULT_DBSCAN_EPS: f64 = 0.9;
pub const DEFAULT_DBSCAN_MIN_PTS: usize = 2;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum ConsolidationError {
    #[error("configuration error: {0}")]
    Config(String),
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ConsensusConfig {
    /// Minimum IoU for a matched pair to count.
    pub tau: f64,
    /// Weight of recurrence across views.
    pub omega1: f64,
    /// Weight of mean matched IoU.
    pub omega2: f64,
    /// Number of perturbed views (the reference comes on top).
    pub views: usize,
}

impl Default for ConsensusConfig {
    fn default() -> Self {
        Self {
            tau: DEFAULT_TAU,
            omega1: DEFAULT_OMEGA1,
            omega2: DEFAULT_OMEGA2,
            views: 7,
        }
    }
}

impl ConsensusConfig {
    pub fn with_views(views: usize) -> Self {
        Self {
            views,
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<(), ConsolidationError> {
        if !(self.tau > 0.0 && self.tau < 1.0) {
            return Err(ConsolidationError::Config(format!(
                "tau must lie in (0, 1), got {}",
                self.tau
            )));
        }
        if self.omega1 < 0.0 || self.omega2 < 0.0 || (self.omega1 + self.omega2 - 1.0).abs() > 1e-9
        {
            return Err(ConsolidationError::Config(format!(
                "omega1 + omega2 must be 1 with both non-negative, got {} + {}",
                self.omega1, self.omega2
            )));
        }
        if self.views == 0 {
            return Err(ConsolidationError::Config(
                "view count must be positive".into(),
            ));
        }
        Ok(())
    }

    /// Reliability of an anchor matched in `n_matched` views with mean IoU
    /// `mean_iou` (0 when unmatched).
    pub fn sigma(&self, n_matched: usize, mean_iou: f64) -> f64 {
        let consensus = (1 + n_matched) as f64 / (self.views + 1) as f64;
        self.omega1 * consensus + self.omega2 * mean_iou
    }

    /// Lowest attainable reliability.
    pub fn sigma_floor(&self) -> f64 {
        self.sigma(0, 0.0)
    }
}

/// One matched pair between an anchor and a view box.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Match {
    pub candidate: usize,
    pub bbox: BoundingBox,
    pub iou: f64,
}

/// Per-view anchor matches: `per_view[m][j]` is anchor `j` in view `m`.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct MatchResult {
    pub per_view: Vec<Vec<Option<Match>>>,
}

impl MatchResult {
    pub fn matches_for(&self, anchor: usize) -> impl Iterator<Item = &Match> + '_ {
        self.per_view.iter().filter_map(move |v| v[anchor].as_ref())
    }

    pub fn unmatched_anchors(&self, view: usize) -> Vec<usize> {
        self.per_view[view]
            .iter()
            .enumerate()
            .filter(|(_, m)| m.is_none())
            .map(|(j, _)| j)
            .collect()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ConsolidatedDetection {
    pub bbox: BoundingBox,
    #[serde(default)]
    pub label: String,
    pub sigma: f64,
    pub n_matched: usize,
    pub mean_match_iou: f64,
}

/// Solve one assignment per view and keep pairs with IoU at least `tau`.
pub fn match_views(anchors: &[BoundingBox], views: &[DetectionSet], tau: f64) -> MatchResult {
    let per_view = views
        .iter()
        .map(|view| {
            let candidates = view.boxes();
            let mut row = vec![None; anchors.len()];
            let costs = CostMatrix::from_boxes(anchors, &candidates);
            for (j, c) in hungarian(&costs) {
                let overlap = iou(&anchors[j], &candidates[c]);
                if overlap >= tau {
                    row[j] = Some(Match {
                        candidate: c,
                        bbox: candidates[c],
                        iou: overlap,
                    });
                }
            }
            row
        })
        .collect();
    MatchResult { per_view }
}

fn check_view_count(
    views: &[DetectionSet],
    cfg: &ConsensusConfig,
) -> Result<(), ConsolidationError> {
    cfg.validate()?;
    if views.len() != cfg.views {
        return Err(ConsolidationError::Config(format!(
            "expected {} views, got {}",
            cfg.views,
            views.len()
        )));
    }
    Ok(())
}

/// Mean after sorting, so the result does not depend on view order.
fn order_free_mean(values: &mut [f64]) -> f64 {
    if values.is_empty() {
        return 0.0;
    }
    values.sort_by(f64::total_cmp);
    values.iter().sum::<f64>() / values.len() as f64
}

/// Reference-anchored Hungarian consolidation.
///
/// Returns exactly the anchors, in order, each with its reliability
/// `omega1 (1 + n) / (M + 1) + omega2 * mean IoU`.
pub fn rhc(
    anchors: &DetectionSet,
    views: &[DetectionSet],
    cfg: &ConsensusConfig,
) -> Result<Vec<ConsolidatedDetection>, ConsolidationError> {
    check_view_count(views, cfg)?;
    let anchor_boxes = anchors.boxes();
    let matches = match_views(&anchor_boxes, views, cfg.tau);
    Ok(anchors
        .detections
        .iter()
        .enumerate()
        .map(|(j, det)| {
            let mut ious: Vec<f64> = matches.matches_for(j).map(|m| m.iou).collect();
            let n_matched = ious.len();
            let mean_match_iou = order_free_mean(&mut ious);
            ConsolidatedDetection {
                bbox: det.bbox,
                label: det.label.clone(),
                sigma: cfg.sigma(n_matched, mean_match_iou),
                n_matched,
                mean_match_iou,
            }
        })
        .collect())
}

/// IoU-weighted averaging around the anchors. The anchor has weight 1 and
/// each matched box its IoU with the anchor; reliability as in [`rhc`].
pub fn consolidate_wa(
    anchors: &DetectionSet,
    views: &[DetectionSet],
    cfg: &ConsensusConfig,
) -> Result<Vec<ConsolidatedDetection>, ConsolidationError> {
    check_view_count(views, cfg)?;
    let anchor_boxes = anchors.boxes();
    let matches = match_views(&anchor_boxes, views, cfg.tau);
    anchors
        .detections
        .iter()
        .enumerate()
        .map(|(j, det)| {
            let mut matched: Vec<(f64, BoundingBox)> =
                matches.matches_for(j).map(|m| (m.iou, m.bbox)).collect();
            matched.sort_by(|a, b| a.0.total_cmp(&b.0).then(a.1.canonical_cmp(&b.1)));
            let mut ious: Vec<f64> = matched.iter().map(|(w, _)| *w).collect();
            let n_matched = ious.len();
            let mean_match_iou = order_free_mean(&mut ious);

            let mut acc = det.bbox.to_array();
            let mut weight = 1.0;
            for (w, b) in &matched {
                for (slot, c) in acc.iter_mut().zip(b.to_array()) {
                    *slot += w * c;
                }
                weight += w;
            }
            let bbox = BoundingBox::from_array(acc.map(|c| c / weight))
                .map_err(|e| ConsolidationError::Config(e.to_string()))?;
            Ok(ConsolidatedDetection {
                bbox,
                label: det.label.clone(),
                sigma: cfg.sigma(n_matched, mean_match_iou),
                n_matched,
                mean_match_iou,
            })
        })
        .collect()
}

/// Reference-free averaging. `views[0]` is the reference.
///
/// Boxes are grouped greedily: each joins the group whose running centroid
/// overlaps it most (IoU at least `tau`, earliest group on ties) or starts a
/// new one. Reference boxes are visited first in their own order, then all
/// other boxes in canonical coordinate order. Each group emits its
/// coordinate-wise mean.
pub fn consolidate_sa(views: &[DetectionSet], tau: f64) -> Vec<BoundingBox> {
    let Some((reference, rest)) = views.split_first() else {
        return Vec::new();
    };
    let mut pool: Vec<BoundingBox> = rest.iter().flat_map(DetectionSet::boxes).collect();
    pool.sort_by(BoundingBox::canonical_cmp);
    let order = reference.boxes().into_iter().chain(pool);

    struct Group {
        sum: [f64; 4],
        count: usize,
        centroid: BoundingBox,
    }
    let mut groups: Vec<Group> = Vec::new();
    for b in order {
        let best = groups
            .iter()
            .enumerate()
            .map(|(g, group)| (g, iou(&group.centroid, &b)))
            .filter(|&(_, o)| o >= tau)
            .fold(None::<(usize, f64)>, |acc, (g, o)| match acc {
                Some((_, best)) if best >= o => acc,
                _ => Some((g, o)),
            });
        match best {
            Some((g, _)) => {
                let group = &mut groups[g];
                for (s, c) in group.sum.iter_mut().zip(b.to_array()) {
                    *s += c;
                }
                group.count += 1;
                let n = group.count as f64;
                group.centroid = BoundingBox::from_array(group.sum.map(|s| s / n))
                    .expect("mean of valid boxes is valid");
            }
            None => groups.push(Group {
                sum: b.to_array(),
                count: 1,
                centroid: b,
            }),
        }
    }
    groups.into_iter().map(|g| g.centroid).collect()
}

/// DBSCAN over the pooled boxes of all views with distance `1 - IoU`.
///
/// Each cluster emits its coordinate-wise median and a confidence of
/// `0.5 * min(1, size / views) + 0.5 * (1 - mean pairwise distance)`;
/// noise is dropped. `views` includes the reference.
pub fn consolidate_dbscan(
    views: &[DetectionSet],
    eps: f64,
    min_pts: usize,
) -> Vec<(BoundingBox, f64)> {
    let mut pool: Vec<BoundingBox> = views.iter().flat_map(DetectionSet::boxes).collect();
    pool.sort_by(BoundingBox::canonical_cmp);
    let labels = dbscan(
        pool.len(),
        |i, j| 1.0 - iou(&pool[i], &pool[j]),
        eps,
        min_pts,
    );
    let n_clusters = labels.iter().flatten().max().map_or(0, |m| m + 1);
    let total_views = views.len().max(1) as f64;

    (0..n_clusters)
        .map(|cluster| {
            let members: Vec<BoundingBox> = pool
                .iter()
                .zip(&labels)
                .filter(|(_, l)| **l == Some(cluster))
                .map(|(b, _)| *b)
                .collect();
            let coords: [f64; 4] = std::array::from_fn(|k| {
                let mut column: Vec<f64> = members.iter().map(|b| b.to_array()[k]).collect();
                median(&mut column)
            });
            let median_box = BoundingBox::from_array(coords)
                .ok()
                .or_else(|| members.first().copied())
                .expect("clusters are non-empty");
            let mut distances = Vec::new();
            for a in 0..members.len() {
                for b in a + 1..members.len() {
                    distances.push(1.0 - iou(&members[a], &members[b]));
                }
            }
            let tightness = 1.0 - order_free_mean(&mut distances);
            let density = (members.len() as f64 / total_views).min(1.0);
            (median_box, 0.5 * density + 0.5 * tightness)
        })
        .collect()
}

fn median(values: &mut [f64]) -> f64 {
    values.sort_by(f64::total_cmp);
    let n = values.len();
    if n % 2 == 1 {
        values[n / 2]
    } else {
        (values[n / 2 - 1] + values[n / 2]) / 2.0
    }
}

/// Consolidation strategy selector.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "UPPERCASE")]
pub enum Strategy {
    #[default]
    Rhc,
    Sa,
    Wa,
    Dbscan,
}

impl std::str::FromStr for Strategy {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s.to_ascii_uppercase().as_str() {
            "RHC" => Ok(Strategy::Rhc),
            "SA" => Ok(Strategy::Sa),
            "WA" => Ok(Strategy::Wa),
            "DBSCAN" => Ok(Strategy::Dbscan),
            other => Err(format!(
                "unknown strategy {other:?} (expected RHC, SA, WA or DBSCAN)"
            )),
        }
    }
}

impl std::fmt::Display for Strategy {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        let s = match self {
            Strategy::Rhc => "RHC",
            Strategy::Sa => "SA",
            Strategy::Wa => "WA",
            Strategy::Dbscan => "DBSCAN",
        };
        f.write_str(s)
    }
}

/// Strategy-agnostic output. `sigma` is `None` for unscored strategies.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScoredDetection {
    pub bbox: BoundingBox,
    #[serde(default)]
    pub label: String,
    pub sigma: Option<f64>,
}

/// Run `strategy` on a reference set and its back-projected views.
pub fn consolidate(
    strategy: Strategy,
    reference: &DetectionSet,
    views: &[DetectionSet],
    cfg: &ConsensusConfig,
) -> Result<Vec<ScoredDetection>, ConsolidationError> {
    let scored = |d: ConsolidatedDetection| ScoredDetection {
        bbox: d.bbox,
        label: d.label,
        sigma: Some(d.sigma),
    };
    let with_reference = || {
        let mut all = Vec::with_capacity(views.len() + 1);
        all.push(reference.clone());
        all.extend(views.iter().cloned());
        all
    };
    Ok(match strategy {
        Strategy::Rhc => rhc(reference, views, cfg)?
            .into_iter()
            .map(scored)
            .collect(),
        Strategy::Wa => consolidate_wa(reference, views, cfg)?
            .into_iter()
            .map(scored)
            .collect(),
        Strategy::Sa => {
            cfg.validate()?;
            consolidate_sa(&with_reference(), cfg.tau)
                .into_iter()
                .map(|bbox| ScoredDetection {
                    bbox,
                    label: String::new(),
                    sigma: None,
                })
                .collect()
        }
        Strategy::Dbscan => consolidate_dbscan(
            &with_reference(),
            DEFAULT_DBSCAN_EPS,
            DEFAULT_DBSCAN_MIN_PTS,
        )
        .into_iter()
        .map(|(bbox, confidence)| ScoredDetection {
            bbox,
            label: String::new(),
            sigma: Some(confidence),
        })
        .collect(),
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn bx(x1: f64, y1: f64, x2: f64, y2: f64) -> BoundingBox {
        BoundingBox::new(x1, y1, x2, y2).unwrap()
    }

    fn set(boxes: &[BoundingBox], view: usize) -> DetectionSet {
        DetectionSet::from_boxes(boxes.iter().copied(), view)
    }

    fn anchor() -> BoundingBox {
        bx(0.0, 0.0, 10.0, 10.0)
    }

    /// Box sharing the anchor's rows whose IoU with `[0,0,10,10]` is `t`.
    fn shifted_with_iou(t: f64) -> BoundingBox {
        // overlap (10 - s) * 10 over union (10 + s) * 10
        let s = 10.0 * (1.0 - t) / (1.0 + t);
        bx(s, 0.0, 10.0 + s, 10.0)
    }

    #[test]
    fn perfect_consensus_is_one() {
        let views: Vec<_> = (1..=7).map(|m| set(&[anchor()], m)).collect();
        let out = rhc(&set(&[anchor()], 0), &views, &ConsensusConfig::default()).unwrap();
        assert_eq!(out[0].sigma, 1.0);
        assert_eq!(out[0].n_matched, 7);
    }

    #[test]
    fn unmatched_anchor_sits_at_floor() {
        let views: Vec<_> = (1..=7)
            .map(|m| set(&[bx(50.0, 50.0, 60.0, 60.0)], m))
            .collect();
        let out = rhc(&set(&[anchor()], 0), &views, &ConsensusConfig::default()).unwrap();
        assert_eq!(out[0].sigma, 0.075);
        assert_eq!(out[0].n_matched, 0);
        assert_eq!(out[0].mean_match_iou, 0.0);
    }

    #[test]
    fn three_partial_matches() {
        let mut views: Vec<_> = [0.5, 0.6, 0.7]
            .iter()
            .enumerate()
            .map(|(m, &t)| set(&[shifted_with_iou(t)], m + 1))
            .collect();
        views.extend((4..=7).map(DetectionSet::empty));
        let out = rhc(&set(&[anchor()], 0), &views, &ConsensusConfig::default()).unwrap();
        assert_eq!(out[0].n_matched, 3);
        assert!((out[0].mean_match_iou - 0.6).abs() < 1e-12);
        assert!((out[0].sigma - 0.54).abs() < 1e-12);
    }

    #[test]
    fn below_tau_is_discarded() {
        let views: Vec<_> = (1..=7).map(|m| set(&[shifted_with_iou(0.05)], m)).collect();
        let out = rhc(&set(&[anchor()], 0), &views, &ConsensusConfig::default()).unwrap();
        assert_eq!(out[0].n_matched, 0);
    }

    #[test]
    fn wrong_view_count_is_config_error() {
        let views = vec![DetectionSet::empty(1)];
        assert!(matches!(
            rhc(&set(&[anchor()], 0), &views, &ConsensusConfig::default()),
            Err(ConsolidationError::Config(_))
        ));
        let bad = ConsensusConfig {
            omega1: 0.7,
            ..ConsensusConfig::with_views(1)
        };
        assert!(rhc(&set(&[anchor()], 0), &views, &bad).is_err());
    }

    #[test]
    fn one_to_one_per_view() {
        // two candidates near one anchor: only the better one counts
        let views = vec![set(&[shifted_with_iou(0.5), shifted_with_iou(0.9)], 1)];
        let matches = match_views(&[anchor()], &views, 0.1);
        let m = matches.per_view[0][0].unwrap();
        assert_eq!(m.candidate, 1);
        assert!((m.iou - 0.9).abs() < 1e-12);
    }

    #[test]
    fn wa_examples() {
        let cfg = ConsensusConfig::with_views(1);
        let out = consolidate_wa(&set(&[anchor()], 0), &[set(&[anchor()], 1)], &cfg).unwrap();
        assert_eq!(out[0].bbox, anchor());

        // IoU([0,0,10,10], [4,0,14,10]) = 60 / 140 = 3/7
        let other = bx(4.0, 0.0, 14.0, 10.0);
        let w = 3.0 / 7.0;
        let out = consolidate_wa(&set(&[anchor()], 0), &[set(&[other], 1)], &cfg).unwrap();
        let expect = [
            w * 4.0 / (1.0 + w),
            0.0,
            (10.0 + w * 14.0) / (1.0 + w),
            10.0,
        ];
        for (g, e) in out[0].bbox.to_array().iter().zip(expect) {
            assert!((g - e).abs() < 1e-12);
        }
        assert!((out[0].bbox.x1() - 1.2).abs() < 1e-12);

        let views: Vec<_> = (1..=7).map(DetectionSet::empty).collect();
        let out =
            consolidate_wa(&set(&[anchor()], 0), &views, &ConsensusConfig::default()).unwrap();
        assert_eq!(out[0].bbox, anchor());
        assert_eq!(out[0].sigma, 0.075);
    }

    #[test]
    fn sa_examples() {
        let same: Vec<_> = (0..8).map(|m| set(&[anchor()], m)).collect();
        assert_eq!(consolidate_sa(&same, 0.1), vec![anchor()]);

        let two = vec![set(&[anchor()], 0), set(&[bx(2.0, 0.0, 12.0, 10.0)], 1)];
        assert_eq!(consolidate_sa(&two, 0.1), vec![bx(1.0, 0.0, 11.0, 10.0)]);

        assert!(consolidate_sa(&[], 0.1).is_empty());
        let empties: Vec<_> = (0..8).map(DetectionSet::empty).collect();
        assert!(consolidate_sa(&empties, 0.1).is_empty());
    }

    #[test]
    fn sa_keeps_disjoint_groups() {
        let views = vec![
            set(&[anchor()], 0),
            set(&[bx(50.0, 50.0, 60.0, 60.0), bx(1.0, 0.0, 11.0, 10.0)], 1),
        ];
        let out = consolidate_sa(&views, 0.1);
        assert_eq!(out.len(), 2);
        assert_eq!(out[0], bx(0.5, 0.0, 10.5, 10.0));
    }

    #[test]
    fn dbscan_identical_boxes() {
        let views: Vec<_> = (0..8).map(|m| set(&[anchor()], m)).collect();
        let out = consolidate_dbscan(&views, 0.9, 2);
        assert_eq!(out, vec![(anchor(), 1.0)]);
    }

    #[test]
    fn dbscan_drops_isolated_box() {
        let mut views: Vec<_> = (0..7).map(|m| set(&[anchor()], m)).collect();
        views.push(set(&[bx(80.0, 80.0, 90.0, 90.0)], 7));
        let out = consolidate_dbscan(&views, 0.9, 2);
        assert_eq!(out.len(), 1);
        assert_eq!(out[0].0, anchor());
        // 7 of 8 views, zero spread
        assert!((out[0].1 - (0.5 * 7.0 / 8.0 + 0.5)).abs() < 1e-12);
    }

    #[test]
    fn strategies_parse_and_display() {
        for s in [Strategy::Rhc, Strategy::Sa, Strategy::Wa, Strategy::Dbscan] {
            assert_eq!(s.to_string().parse::<Strategy>().unwrap(), s);
        }
        assert_eq!("rhc".parse::<Strategy>().unwrap(), Strategy::Rhc);
        assert!("nms".parse::<Strategy>().is_err());
    }
}

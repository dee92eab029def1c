//! Gaussian kernel density estimates of prompt-score distributions.

use serde::{Deserialize, Serialize};

use super::calibration::sample_std;
use super::EvalError;

pub const GRID_POINTS: usize = 512;
const GRID_PAD_BANDWIDTHS: f64 = 4.0;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum KdeSplit {
    /// Good (upper half) and Bad (lower half) curves.
    Median,
    /// One curve over everything.
    None,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum CurveLabel {
    Good,
    Bad,
    All,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct KdeCurve {
    pub label: CurveLabel,
    pub n: usize,
    pub bandwidth: f64,
    pub grid: Vec<f64>,
    pub density: Vec<f64>,
}

impl KdeCurve {
    /// Trapezoidal integral over the grid.
    pub fn integral(&self) -> f64 {
        self.grid
            .windows(2)
            .zip(self.density.windows(2))
            .map(|(x, y)| (x[1] - x[0]) * (y[0] + y[1]) / 2.0)
            .sum()
    }
}

/// Scott's rule for one dimension: `s * n^(-1/5)` with the sample std.
pub fn scott_bandwidth(scores: &[f64]) -> f64 {
    sample_std(scores) * (scores.len() as f64).powf(-0.2)
}

fn std_normal_pdf(u: f64) -> f64 {
    (-0.5 * u * u).exp() / (2.0 * std::f64::consts::PI).sqrt()
}

/// Density of the estimate at `y`.
pub fn density_at(scores: &[f64], h: f64, y: f64) -> f64 {
    scores
        .iter()
        .map(|s| std_normal_pdf((y - s) / h))
        .sum::<f64>()
        / (scores.len() as f64 * h)
}

fn curve(scores: &[f64], h: f64, label: CurveLabel) -> KdeCurve {
    let lo = scores.iter().copied().fold(f64::INFINITY, f64::min) - GRID_PAD_BANDWIDTHS * h;
    let hi = scores.iter().copied().fold(f64::NEG_INFINITY, f64::max) + GRID_PAD_BANDWIDTHS * h;
    let step = (hi - lo) / (GRID_POINTS - 1) as f64;
    let grid: Vec<f64> = (0..GRID_POINTS).map(|i| lo + step * i as f64).collect();
    let density = grid.iter().map(|&y| density_at(scores, h, y)).collect();
    KdeCurve {
        label,
        n: scores.len(),
        bandwidth: h,
        grid,
        density,
    }
}

/// Estimate score densities.
///
/// With a median split, Good holds the upper `ceil(n/2)` scores and Bad the
/// rest. A half whose own bandwidth degenerates (one point, or all equal)
/// borrows the bandwidth of the full pool.
pub fn kde(scores: &[f64], split: KdeSplit) -> Result<Vec<KdeCurve>, EvalError> {
    if scores.len() < 2 {
        return Err(EvalError::InsufficientData {
            needed: 2,
            found: scores.len(),
        });
    }
    let pooled = scott_bandwidth(scores);
    if pooled.is_nan() || pooled <= 0.0 {
        return Err(EvalError::DegenerateInput);
    }
    match split {
        KdeSplit::None => Ok(vec![curve(scores, pooled, CurveLabel::All)]),
        KdeSplit::Median => {
            let mut sorted = scores.to_vec();
            sorted.sort_by(|a, b| b.total_cmp(a));
            let (good, bad) = sorted.split_at(sorted.len().div_ceil(2));
            let own = |xs: &[f64]| {
                Some(scott_bandwidth(xs))
                    .filter(|h| *h > 0.0)
                    .unwrap_or(pooled)
            };
            Ok(vec![
                curve(good, own(good), CurveLabel::Good),
                curve(bad, own(bad), CurveLabel::Bad),
            ])
        }
    }
}

//! Agreement between reliability scores and achieved IoU.

use serde::{Deserialize, Serialize};
use statrs::function::beta::beta_reg;
use statrs::function::erf::erfc;

use super::{EvalError, EvalSample};
use crate::geometry::iou;

pub const N_BINS: usize = 10;
const Z95: f64 = 1.96;

/// `(sigma, gt_iou)` for every scored prediction, where `gt_iou` is the best
/// IoU against any ground truth in the same image (0 if it has none).
/// Unscored predictions are skipped.
pub fn calibration_pairs(samples: &[EvalSample]) -> Vec<(f64, f64)> {
    samples
        .iter()
        .flat_map(|s| {
            s.predictions.iter().filter_map(move |p| {
                let sigma = p.sigma?;
                let best = s
                    .ground_truth
                    .iter()
                    .map(|gt| iou(&p.bbox, gt))
                    .fold(0.0, f64::max);
                Some((sigma, best))
            })
        })
        .collect()
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Significance {
    #[serde(rename = "***")]
    P001,
    #[serde(rename = "**")]
    P01,
    #[serde(rename = "*")]
    P05,
    #[serde(rename = "ns")]
    NotSignificant,
}

impl Significance {
    pub fn from_p(p: f64) -> Self {
        if p < 0.001 {
            Significance::P001
        } else if p < 0.01 {
            Significance::P01
        } else if p < 0.05 {
            Significance::P05
        } else {
            Significance::NotSignificant
        }
    }

    pub fn marker(&self) -> &'static str {
        match self {
            Significance::P001 => "***",
            Significance::P01 => "**",
            Significance::P05 => "*",
            Significance::NotSignificant => "ns",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Correlation {
    pub value: f64,
    pub p_value: f64,
    pub significance: Significance,
    /// One variable was constant; `value` is reported as 0.
    pub undefined: bool,
}

impl Correlation {
    fn undefined() -> Self {
        Self {
            value: 0.0,
            p_value: 1.0,
            significance: Significance::NotSignificant,
            undefined: true,
        }
    }

    fn with_p(value: f64, p_value: f64) -> Self {
        Self {
            value,
            p_value,
            significance: Significance::from_p(p_value),
            undefined: false,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CalibrationBin {
    pub lower: f64,
    pub upper: f64,
    pub count: usize,
    pub mean_confidence: Option<f64>,
    pub mean_iou: Option<f64>,
    /// `1.96 s / sqrt(n)` with the sample std of IoU; 0 for a single point.
    pub ci_halfwidth: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CalibrationReport {
    pub n: usize,
    pub mean_iou: f64,
    pub mean_sigma: f64,
    pub std_sigma: f64,
    pub mae: f64,
    /// Absent with fewer than three pairs.
    pub pearson: Option<Correlation>,
    pub spearman: Option<Correlation>,
    pub kendall: Option<Correlation>,
    pub bins: Vec<CalibrationBin>,
}

fn mean(xs: &[f64]) -> f64 {
    xs.iter().sum::<f64>() / xs.len() as f64
}

/// Sample standard deviation (n - 1); 0 for fewer than two values.
pub(crate) fn sample_std(xs: &[f64]) -> f64 {
    if xs.len() < 2 {
        return 0.0;
    }
    let m = mean(xs);
    (xs.iter().map(|x| (x - m).powi(2)).sum::<f64>() / (xs.len() - 1) as f64).sqrt()
}

fn is_constant(xs: &[f64]) -> bool {
    xs.windows(2).all(|w| w[0] == w[1])
}

/// Pearson's r, or `None` when either variable has zero variance.
pub fn pearson(x: &[f64], y: &[f64]) -> Option<f64> {
    assert_eq!(x.len(), y.len(), "paired samples");
    if x.len() < 2 || is_constant(x) || is_constant(y) {
        return None;
    }
    let (mx, my) = (mean(x), mean(y));
    let mut sxy = 0.0;
    let mut sxx = 0.0;
    let mut syy = 0.0;
    for (a, b) in x.iter().zip(y) {
        let (dx, dy) = (a - mx, b - my);
        sxy += dx * dy;
        sxx += dx * dx;
        syy += dy * dy;
    }
    Some((sxy / (sxx.sqrt() * syy.sqrt())).clamp(-1.0, 1.0))
}

/// Average ranks (1-based), ties sharing the mean of their positions.
pub fn ranks(xs: &[f64]) -> Vec<f64> {
    let mut idx: Vec<usize> = (0..xs.len()).collect();
    idx.sort_by(|&a, &b| xs[a].total_cmp(&xs[b]));
    let mut out = vec![0.0; xs.len()];
    let mut i = 0;
    while i < idx.len() {
        let mut j = i;
        while j + 1 < idx.len() && xs[idx[j + 1]] == xs[idx[i]] {
            j += 1;
        }
        let avg = (i + j) as f64 / 2.0 + 1.0;
        for &k in &idx[i..=j] {
            out[k] = avg;
        }
        i = j + 1;
    }
    out
}

pub fn spearman(x: &[f64], y: &[f64]) -> Option<f64> {
    pearson(&ranks(x), &ranks(y))
}

/// Kendall's tau-b.
pub fn kendall(x: &[f64], y: &[f64]) -> Option<f64> {
    assert_eq!(x.len(), y.len(), "paired samples");
    let n = x.len();
    let (mut concordant, mut discordant, mut tie_x, mut tie_y) = (0i64, 0i64, 0i64, 0i64);
    for i in 0..n {
        for j in i + 1..n {
            let dx = x[i] - x[j];
            let dy = y[i] - y[j];
            if dx == 0.0 && dy == 0.0 {
                continue;
            } else if dx == 0.0 {
                tie_x += 1;
            } else if dy == 0.0 {
                tie_y += 1;
            } else if (dx > 0.0) == (dy > 0.0) {
                concordant += 1;
            } else {
                discordant += 1;
            }
        }
    }
    let denom =
        (((concordant + discordant + tie_x) * (concordant + discordant + tie_y)) as f64).sqrt();
    if denom == 0.0 {
        return None;
    }
    Some((concordant - discordant) as f64 / denom)
}

/// Two-sided p-value of a correlation through Student's t with `n - 2`
/// degrees of freedom.
pub fn t_test_p(r: f64, n: usize) -> f64 {
    let df = (n - 2) as f64;
    if r.abs() >= 1.0 {
        return 0.0;
    }
    let t2 = r * r * df / (1.0 - r * r);
    beta_reg(df / 2.0, 0.5, df / (df + t2))
}

/// Two-sided p-value for tau under the normal approximation.
pub fn kendall_p(tau: f64, n: usize) -> f64 {
    let n = n as f64;
    let z = 3.0 * tau * (n * (n - 1.0)).sqrt() / (2.0 * (2.0 * n + 5.0)).sqrt();
    erfc(z.abs() / std::f64::consts::SQRT_2)
}

fn bin_index(sigma: f64) -> usize {
    ((sigma * N_BINS as f64).floor().max(0.0) as usize).min(N_BINS - 1)
}

pub fn reliability_bins(pairs: &[(f64, f64)]) -> Vec<CalibrationBin> {
    let mut members: Vec<Vec<(f64, f64)>> = vec![Vec::new(); N_BINS];
    for &(s, i) in pairs {
        members[bin_index(s)].push((s, i));
    }
    members
        .into_iter()
        .enumerate()
        .map(|(b, m)| {
            let count = m.len();
            let (conf, ious): (Vec<f64>, Vec<f64>) = m.into_iter().unzip();
            let nonempty = count > 0;
            CalibrationBin {
                lower: b as f64 / N_BINS as f64,
                upper: (b + 1) as f64 / N_BINS as f64,
                count,
                mean_confidence: nonempty.then(|| mean(&conf)),
                mean_iou: nonempty.then(|| mean(&ious)),
                ci_halfwidth: nonempty.then(|| Z95 * sample_std(&ious) / (count as f64).sqrt()),
            }
        })
        .collect()
}

/// Summary statistics, correlations and the reliability diagram.
pub fn calibration(pairs: &[(f64, f64)]) -> Result<CalibrationReport, EvalError> {
    if pairs.is_empty() {
        return Err(EvalError::InsufficientData {
            needed: 1,
            found: 0,
        });
    }
    let (sigma, ious): (Vec<f64>, Vec<f64>) = pairs.iter().copied().unzip();
    if pairs.len() >= 2 && is_constant(&sigma) && is_constant(&ious) {
        return Err(EvalError::DegenerateInput);
    }
    let n = pairs.len();
    let corr = |r: Option<f64>, p: fn(f64, usize) -> f64| {
        (n >= 3).then(|| r.map_or_else(Correlation::undefined, |r| Correlation::with_p(r, p(r, n))))
    };
    Ok(CalibrationReport {
        n,
        mean_iou: mean(&ious),
        mean_sigma: mean(&sigma),
        std_sigma: sample_std(&sigma),
        mae: pairs.iter().map(|(s, i)| (s - i).abs()).sum::<f64>() / n as f64,
        pearson: corr(pearson(&sigma, &ious), t_test_p),
        spearman: corr(spearman(&sigma, &ious), t_test_p),
        kendall: corr(kendall(&sigma, &ious), kendall_p),
        bins: reliability_bins(pairs),
    })
}

impl CalibrationReport {
    /// Plain-text table.
    pub fn render_text(&self) -> String {
        use std::fmt::Write;
        let mut out = String::new();
        let fmt_corr = |c: &Option<Correlation>| match c {
            Some(c) if c.undefined => "undefined (ns)".to_string(),
            Some(c) => format!(
                "{:+.3} ({}, p={:.2e})",
                c.value,
                c.significance.marker(),
                c.p_value
            ),
            None => "n/a".to_string(),
        };
        let _ = writeln!(out, "n          {}", self.n);
        let _ = writeln!(out, "mean IoU   {:.3}", self.mean_iou);
        let _ = writeln!(out, "mean sigma {:.3}", self.mean_sigma);
        let _ = writeln!(out, "std(sigma) {:.3}", self.std_sigma);
        let _ = writeln!(out, "MAE        {:.3}", self.mae);
        let _ = writeln!(out, "pearson    {}", fmt_corr(&self.pearson));
        let _ = writeln!(out, "spearman   {}", fmt_corr(&self.spearman));
        let _ = writeln!(out, "kendall    {}", fmt_corr(&self.kendall));
        let _ = writeln!(out, "bin         count  conf   IoU    ±CI");
        for b in &self.bins {
            match (b.mean_confidence, b.mean_iou, b.ci_halfwidth) {
                (Some(c), Some(i), Some(ci)) => {
                    let _ = writeln!(
                        out,
                        "[{:.1}, {:.1})  {:>5}  {c:.3}  {i:.3}  {ci:.3}",
                        b.lower, b.upper, b.count
                    );
                }
                _ => {
                    let _ = writeln!(out, "[{:.1}, {:.1})  {:>5}", b.lower, b.upper, b.count);
                }
            }
        }
        out
    }
}

//! Discrimination and calibration metrics.
//!
//! Scores are `(probability, is_case)` pairs. A score at or above a
//! threshold counts as a positive call.

use serde::{Deserialize, Serialize};
use statrs::distribution::{ContinuousCDF, StudentsT};
use std::fmt;
use thiserror::Error;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum MetricsError {
    #[error("SingleClass: both cases and controls are required")]
    SingleClass,
    #[error("no scores")]
    Empty,
    #[error("invalid input: {0}")]
    InvalidInput(String),
}

fn class_counts(scored: &[(f64, bool)]) -> Result<(usize, usize), MetricsError> {
    if scored.is_empty() {
        return Err(MetricsError::Empty);
    }
    if scored.iter().any(|(s, _)| s.is_nan()) {
        return Err(MetricsError::InvalidInput("NaN score".into()));
    }
    let pos = scored.iter().filter(|(_, y)| *y).count();
    let neg = scored.len() - pos;
    if pos == 0 || neg == 0 {
        return Err(MetricsError::SingleClass);
    }
    Ok((pos, neg))
}

/// Mann-Whitney estimate: the share of case/control pairs in which the case
/// scores higher, ties counting one half.
pub fn auroc(scored: &[(f64, bool)]) -> Result<f64, MetricsError> {
    let (pos, neg) = class_counts(scored)?;
    let mut sorted: Vec<(f64, bool)> = scored.to_vec();
    sorted.sort_by(|a, b| a.0.total_cmp(&b.0));
    let mut rank_sum = 0.0;
    let mut i = 0;
    while i < sorted.len() {
        let mut j = i;
        while j < sorted.len() && sorted[j].0 == sorted[i].0 {
            j += 1;
        }
        // ranks i+1..=j share their mean
        let mean_rank = (i + 1 + j) as f64 / 2.0;
        let cases = sorted[i..j].iter().filter(|(_, y)| *y).count();
        rank_sum += mean_rank * cases as f64;
        i = j;
    }
    let u = rank_sum - (pos * (pos + 1)) as f64 / 2.0;
    Ok(u / (pos as f64 * neg as f64))
}

/// Confusion counts; real-valued so that expected counts are admissible.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ConfusionCounts {
    pub tp: f64,
    pub fp: f64,
    pub tn: f64,
    pub fn_: f64,
}

impl ConfusionCounts {
    pub fn new(tp: f64, fp: f64, tn: f64, fn_: f64) -> Result<Self, MetricsError> {
        if [tp, fp, tn, fn_].iter().any(|v| !(*v >= 0.0)) {
            return Err(MetricsError::InvalidInput(
                "counts must be non-negative".into(),
            ));
        }
        Ok(ConfusionCounts { tp, fp, tn, fn_ })
    }

    /// Expected counts for `positives` cases and `negatives` controls at the
    /// given operating point.
    pub fn expected(sensitivity: f64, specificity: f64, positives: f64, negatives: f64) -> Self {
        ConfusionCounts {
            tp: sensitivity * positives,
            fn_: (1.0 - sensitivity) * positives,
            tn: specificity * negatives,
            fp: (1.0 - specificity) * negatives,
        }
    }

    pub fn at_threshold(scored: &[(f64, bool)], threshold: f64) -> Self {
        let mut c = ConfusionCounts {
            tp: 0.0,
            fp: 0.0,
            tn: 0.0,
            fn_: 0.0,
        };
        for &(s, y) in scored {
            match (s >= threshold, y) {
                (true, true) => c.tp += 1.0,
                (true, false) => c.fp += 1.0,
                (false, false) => c.tn += 1.0,
                (false, true) => c.fn_ += 1.0,
            }
        }
        c
    }

    pub fn sensitivity(&self) -> f64 {
        self.tp / (self.tp + self.fn_)
    }

    pub fn specificity(&self) -> f64 {
        self.tn / (self.tn + self.fp)
    }

    pub fn ppv(&self) -> f64 {
        self.tp / (self.tp + self.fp)
    }

    pub fn npv(&self) -> f64 {
        self.tn / (self.tn + self.fn_)
    }

    pub fn youden_j(&self) -> f64 {
        self.sensitivity() + self.specificity() - 1.0
    }

    pub fn scaled(&self, k: f64) -> Self {
        ConfusionCounts {
            tp: self.tp * k,
            fp: self.fp * k,
            tn: self.tn * k,
            fn_: self.fn_ * k,
        }
    }
}

/// Diagnostic odds ratio `(tp * tn) / (fp * fn)`. Returns `+inf` when the
/// denominator vanishes and NaN when numerator and denominator both do;
/// [`dor_is_sentinel`] flags either case.
pub fn dor(c: &ConfusionCounts) -> f64 {
    let num = c.tp * c.tn;
    let den = c.fp * c.fn_;
    if den == 0.0 {
        if num == 0.0 {
            f64::NAN
        } else {
            f64::INFINITY
        }
    } else {
        num / den
    }
}

pub fn dor_is_sentinel(v: f64) -> bool {
    !v.is_finite()
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub enum ThresholdCriterion {
    /// First operating point, scanning down from the highest score, whose
    /// sensitivity reaches the target.
    SensTarget(f64),
    /// Last operating point whose specificity still reaches the target.
    SpecTarget(f64),
    /// Operating point minimising `|sensitivity - specificity|`.
    SensEqSpec,
    MaxYouden,
    /// Threshold equal to a prior prevalence.
    PriorPrevalence(f64),
    Fixed(f64),
}

impl fmt::Display for ThresholdCriterion {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            ThresholdCriterion::SensTarget(t) => write!(f, "Sensitivity = {t}"),
            ThresholdCriterion::SpecTarget(t) => write!(f, "Specificity = {t}"),
            ThresholdCriterion::SensEqSpec => write!(f, "Sensitivity = Specificity"),
            ThresholdCriterion::MaxYouden => write!(f, "Max Youden's J"),
            ThresholdCriterion::PriorPrevalence(p) => {
                write!(f, "Threshold = {p} (prior prevalence)")
            }
            ThresholdCriterion::Fixed(t) => write!(f, "Threshold = {t}"),
        }
    }
}

impl ThresholdCriterion {
    /// The criteria reported for a model, with `prior` as the prevalence threshold.
    pub fn standard(prior: f64) -> Vec<ThresholdCriterion> {
        vec![
            ThresholdCriterion::SensTarget(0.8),
            ThresholdCriterion::SpecTarget(0.8),
            ThresholdCriterion::SensEqSpec,
            ThresholdCriterion::MaxYouden,
            ThresholdCriterion::PriorPrevalence(prior),
            ThresholdCriterion::Fixed(0.5),
        ]
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ThresholdReport {
    pub criterion: ThresholdCriterion,
    pub threshold: f64,
    pub counts: ConfusionCounts,
    pub sensitivity: f64,
    pub specificity: f64,
    pub ppv: f64,
    pub npv: f64,
    pub youden_j: f64,
    pub dor: f64,
}

impl ThresholdReport {
    fn from_counts(criterion: ThresholdCriterion, threshold: f64, c: ConfusionCounts) -> Self {
        ThresholdReport {
            criterion,
            threshold,
            counts: c,
            sensitivity: c.sensitivity(),
            specificity: c.specificity(),
            ppv: c.ppv(),
            npv: c.npv(),
            youden_j: c.youden_j(),
            dor: dor(&c),
        }
    }
}

/// One row of the empirical ROC table: calling everything at or above
/// `score` positive.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct RocPoint {
    pub score: f64,
    pub counts: ConfusionCounts,
}

/// Operating points from the strictest (nothing positive, score `+inf`)
/// to the loosest (everything positive), one per distinct score.
pub fn roc_points(scored: &[(f64, bool)]) -> Result<Vec<RocPoint>, MetricsError> {
    let (pos, neg) = class_counts(scored)?;
    let mut sorted = scored.to_vec();
    sorted.sort_by(|a, b| b.0.total_cmp(&a.0));
    let mut out = vec![RocPoint {
        score: f64::INFINITY,
        counts: ConfusionCounts {
            tp: 0.0,
            fp: 0.0,
            tn: neg as f64,
            fn_: pos as f64,
        },
    }];
    let (mut tp, mut fp) = (0usize, 0usize);
    let mut i = 0;
    while i < sorted.len() {
        let s = sorted[i].0;
        while i < sorted.len() && sorted[i].0 == s {
            if sorted[i].1 {
                tp += 1;
            } else {
                fp += 1;
            }
            i += 1;
        }
        out.push(RocPoint {
            score: s,
            counts: ConfusionCounts {
                tp: tp as f64,
                fp: fp as f64,
                tn: (neg - fp) as f64,
                fn_: (pos - tp) as f64,
            },
        });
    }
    Ok(out)
}

/// Threshold reported for ROC point `k`: midway between its score and the
/// next lower one, so `score >= threshold` reproduces exactly that point.
fn placed_threshold(points: &[RocPoint], k: usize) -> f64 {
    match points.get(k + 1) {
        Some(next) if k > 0 => (points[k].score + next.score) / 2.0,
        _ => points[k].score,
    }
}

/// Scores closer than this count as tied; ties go to the stricter threshold.
const TIE_EPS: f64 = 1e-12;

pub fn threshold_table(
    scored: &[(f64, bool)],
    criteria: &[ThresholdCriterion],
) -> Result<Vec<ThresholdReport>, MetricsError> {
    let points = roc_points(scored)?;
    let at_point = |crit, k: usize| {
        ThresholdReport::from_counts(crit, placed_threshold(&points, k), points[k].counts)
    };
    let mut out = Vec::with_capacity(criteria.len());
    for &crit in criteria {
        let report = match crit {
            ThresholdCriterion::SensTarget(t) => {
                let k = points
                    .iter()
                    .position(|p| p.counts.sensitivity() >= t)
                    .unwrap_or(points.len() - 1);
                at_point(crit, k)
            }
            ThresholdCriterion::SpecTarget(t) => {
                let k = points
                    .iter()
                    .rposition(|p| p.counts.specificity() >= t)
                    .unwrap_or(0);
                at_point(crit, k)
            }
            ThresholdCriterion::SensEqSpec => {
                let mut best = 0;
                for (k, p) in points.iter().enumerate() {
                    let gap = (p.counts.sensitivity() - p.counts.specificity()).abs();
                    let best_gap = (points[best].counts.sensitivity()
                        - points[best].counts.specificity())
                    .abs();
                    if gap < best_gap - TIE_EPS {
                        best = k;
                    }
                }
                at_point(crit, best)
            }
            ThresholdCriterion::MaxYouden => {
                let mut best = 0;
                for (k, p) in points.iter().enumerate() {
                    if p.counts.youden_j() > points[best].counts.youden_j() + TIE_EPS {
                        best = k;
                    }
                }
                at_point(crit, best)
            }
            ThresholdCriterion::PriorPrevalence(t) | ThresholdCriterion::Fixed(t) => {
                ThresholdReport::from_counts(crit, t, ConfusionCounts::at_threshold(scored, t))
            }
        };
        out.push(report);
    }
    Ok(out)
}

pub fn brier(scored: &[(f64, bool)]) -> Result<f64, MetricsError> {
    if scored.is_empty() {
        return Err(MetricsError::Empty);
    }
    let s: f64 = scored
        .iter()
        .map(|&(p, y)| (p - if y { 1.0 } else { 0.0 }).powi(2))
        .sum();
    Ok(s / scored.len() as f64)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CalibrationBin {
    pub lo: f64,
    pub hi: f64,
    pub n: usize,
    pub mean_pred: f64,
    pub observed: f64,
}

/// Equal-width bins over `[0, 1]`; a probability of exactly 1 falls in the
/// last bin. Empty bins are omitted.
pub fn calibration_bins(
    scored: &[(f64, bool)],
    n_bins: usize,
) -> Result<Vec<CalibrationBin>, MetricsError> {
    if scored.is_empty() {
        return Err(MetricsError::Empty);
    }
    if n_bins == 0 {
        return Err(MetricsError::InvalidInput("n_bins must be positive".into()));
    }
    let mut acc = vec![(0usize, 0.0f64, 0.0f64); n_bins];
    for &(p, y) in scored {
        if !(0.0..=1.0).contains(&p) {
            return Err(MetricsError::InvalidInput(format!(
                "probability {p} outside [0, 1]"
            )));
        }
        let b = ((p * n_bins as f64) as usize).min(n_bins - 1);
        acc[b].0 += 1;
        acc[b].1 += p;
        acc[b].2 += if y { 1.0 } else { 0.0 };
    }
    Ok(acc
        .into_iter()
        .enumerate()
        .filter(|(_, a)| a.0 > 0)
        .map(|(b, (n, sp, sy))| CalibrationBin {
            lo: b as f64 / n_bins as f64,
            hi: (b + 1) as f64 / n_bins as f64,
            n,
            mean_pred: sp / n as f64,
            observed: sy / n as f64,
        })
        .collect())
}

pub fn ece(scored: &[(f64, bool)], n_bins: usize) -> Result<f64, MetricsError> {
    let bins = calibration_bins(scored, n_bins)?;
    let n = scored.len() as f64;
    Ok(bins
        .iter()
        .map(|b| b.n as f64 / n * (b.mean_pred - b.observed).abs())
        .sum())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CalibrationFit {
    pub slope: f64,
    pub intercept: f64,
    pub curve: Vec<CalibrationBin>,
}

/// Count-weighted least-squares line of observed rate on mean prediction
/// across non-empty bins. Slope and intercept are NaN when fewer than two
/// distinct bin means exist.
pub fn calibration_fit(
    scored: &[(f64, bool)],
    n_bins: usize,
) -> Result<CalibrationFit, MetricsError> {
    let curve = calibration_bins(scored, n_bins)?;
    let w: f64 = curve.iter().map(|b| b.n as f64).sum();
    let mx = curve.iter().map(|b| b.n as f64 * b.mean_pred).sum::<f64>() / w;
    let my = curve.iter().map(|b| b.n as f64 * b.observed).sum::<f64>() / w;
    let sxx: f64 = curve
        .iter()
        .map(|b| b.n as f64 * (b.mean_pred - mx).powi(2))
        .sum();
    let sxy: f64 = curve
        .iter()
        .map(|b| b.n as f64 * (b.mean_pred - mx) * (b.observed - my))
        .sum();
    let (slope, intercept) = if sxx > 0.0 {
        let s = sxy / sxx;
        (s, my - s * mx)
    } else {
        (f64::NAN, f64::NAN)
    };
    Ok(CalibrationFit {
        slope,
        intercept,
        curve,
    })
}

/// Mean with a two-sided 95% Student-t interval.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Interval {
    pub mean: f64,
    pub lo: f64,
    pub hi: f64,
    pub n: usize,
}

/// `mean +/- t(0.975, n-1) * sd / sqrt(n)`; the bounds are NaN for `n < 2`.
pub fn t_interval(values: &[f64]) -> Result<Interval, MetricsError> {
    if values.is_empty() {
        return Err(MetricsError::Empty);
    }
    let n = values.len();
    if values.iter().all(|v| *v == values[0]) && n >= 2 {
        let v = values[0];
        return Ok(Interval {
            mean: v,
            lo: v,
            hi: v,
            n,
        });
    }
    let mean = values.iter().sum::<f64>() / n as f64;
    if n < 2 {
        return Ok(Interval {
            mean,
            lo: f64::NAN,
            hi: f64::NAN,
            n,
        });
    }
    let var = values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1) as f64;
    let t = StudentsT::new(0.0, 1.0, (n - 1) as f64)
        .expect("positive degrees of freedom")
        .inverse_cdf(0.975);
    let half = t * var.sqrt() / (n as f64).sqrt();
    Ok(Interval {
        mean,
        lo: mean - half,
        hi: mean + half,
        n,
    })
}

//! Risk over time: each patient's history is replayed as a series of
//! windows ending at successively later days and every window is scored.

use crate::autodiff::sigmoid;
use crate::ehr::{Label, LabeledPatient};
use crate::encode::{sliding_windows, EncodeError, EncoderConfig};
use crate::model::{ModelError, ModelParams};
use crate::recal::{recalibrate_logit, RecalSpec};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use std::collections::BTreeMap;
use std::io::Write;
use thiserror::Error;

const DAYS_PER_MONTH: f64 = 365.25 / 12.0;

#[derive(Debug, Error)]
pub enum TrajectoryError {
    #[error(transparent)]
    Encode(#[from] EncodeError),
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error("EmptyGroup: no trajectories to aggregate")]
    EmptyGroup,
    #[error("Io: {0}")]
    Io(#[from] std::io::Error),
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TrajectoryPoint {
    pub months_before_index: i64,
    pub prob: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RiskTrajectory {
    pub patient_id: String,
    pub label: Label,
    /// Oldest first.
    pub points: Vec<TrajectoryPoint>,
}

pub fn months_before(index_day: i64, day: i64) -> i64 {
    ((index_day - day) as f64 / DAYS_PER_MONTH).round() as i64
}

/// Scores windows ending every `step_days` up to the index day, optionally
/// shifting each logit to another prior.
pub fn patient_trajectory(
    patient: &LabeledPatient,
    model: &ModelParams,
    cfg: &EncoderConfig,
    step_days: i64,
    recal: Option<&RecalSpec>,
) -> Result<RiskTrajectory, TrajectoryError> {
    let windows = sliding_windows(patient, cfg, step_days)?;
    let points = windows
        .iter()
        .map(|(end, m)| {
            let z = model.forward(&m.values)?.logit;
            let z = recal.map_or(z, |r| recalibrate_logit(z, r));
            Ok(TrajectoryPoint {
                months_before_index: months_before(patient.index_day, *end),
                prob: sigmoid(z),
            })
        })
        .collect::<Result<Vec<_>, TrajectoryError>>()?;
    Ok(RiskTrajectory {
        patient_id: patient.id().as_str().to_string(),
        label: patient.label,
        points,
    })
}

pub fn cohort_trajectories(
    patients: &[LabeledPatient],
    model: &ModelParams,
    cfg: &EncoderConfig,
    step_days: i64,
    recal: Option<&RecalSpec>,
) -> Result<Vec<RiskTrajectory>, TrajectoryError> {
    patients
        .par_iter()
        .map(|p| patient_trajectory(p, model, cfg, step_days, recal))
        .collect()
}

/// How each time point's band is summarised.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
pub enum Band {
    /// Median with first and third quartiles.
    #[default]
    MedianIqr,
    /// Mean plus and minus one standard deviation.
    MeanSd,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CurvePoint {
    pub months_before_index: i64,
    pub center: f64,
    pub lo: f64,
    pub hi: f64,
    pub n: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GroupCurve {
    pub group: String,
    /// Oldest first.
    pub points: Vec<CurvePoint>,
}

impl GroupCurve {
    pub fn at(&self, months_before_index: i64) -> Option<&CurvePoint> {
        self.points
            .iter()
            .find(|p| p.months_before_index == months_before_index)
    }
}

/// Linear-interpolation quantile of sorted data.
fn quantile(sorted: &[f64], q: f64) -> f64 {
    let h = (sorted.len() - 1) as f64 * q;
    let lo = h.floor() as usize;
    let hi = h.ceil() as usize;
    sorted[lo] + (h - lo as f64) * (sorted[hi] - sorted[lo])
}

/// Aligns trajectories on months before index and summarises each group
/// (`case`, `control`) at every month any of its members reaches.
pub fn cohort_curves(
    trajectories: &[RiskTrajectory],
    band: Band,
) -> Result<Vec<GroupCurve>, TrajectoryError> {
    if trajectories.is_empty() {
        return Err(TrajectoryError::EmptyGroup);
    }
    let mut groups: BTreeMap<&str, BTreeMap<i64, Vec<f64>>> = BTreeMap::new();
    for t in trajectories {
        let g = groups.entry(t.label.as_str()).or_default();
        for p in &t.points {
            g.entry(p.months_before_index).or_default().push(p.prob);
        }
    }
    Ok(groups
        .into_iter()
        .map(|(group, by_month)| GroupCurve {
            group: group.to_string(),
            points: by_month
                .into_iter()
                .rev()
                .map(|(m, mut v)| {
                    v.sort_by(f64::total_cmp);
                    let (center, lo, hi) = match band {
                        Band::MedianIqr => {
                            (quantile(&v, 0.5), quantile(&v, 0.25), quantile(&v, 0.75))
                        }
                        Band::MeanSd => {
                            let n = v.len() as f64;
                            let mean = v.iter().sum::<f64>() / n;
                            let sd = (v.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / n).sqrt();
                            (mean, mean - sd, mean + sd)
                        }
                    };
                    CurvePoint {
                        months_before_index: m,
                        center,
                        lo,
                        hi,
                        n: v.len(),
                    }
                })
                .collect(),
        })
        .collect())
}

/// Writes `group,months_before_index,median,q1,q3`. For [`Band::MeanSd`]
/// curves the three value columns hold the mean and the one-sd bounds.
pub fn write_curves_csv<W: Write>(mut w: W, curves: &[GroupCurve]) -> std::io::Result<()> {
    writeln!(w, "group,months_before_index,median,q1,q3")?;
    for c in curves {
        for p in &c.points {
            writeln!(
                w,
                "{},{},{},{},{}",
                c.group, p.months_before_index, p.center, p.lo, p.hi
            )?;
        }
    }
    Ok(())
}

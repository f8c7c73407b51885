//! Multi-stage screening cascade.
//!
//! Each stage sees a population `N` at prevalence `P`. Of its `P * N`
//! cases only `capture_fraction` are eligible; the stage flags
//! `sens * eligible` of them and `(1 - spec)` of everyone else. The flagged
//! group becomes the next stage's population, at prevalence
//! `true positives / flagged`.

use crate::metrics::{threshold_table, MetricsError, ThresholdCriterion};
use serde::{Deserialize, Serialize};
use std::fmt::Write as _;
use thiserror::Error;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum ScreenError {
    #[error("DegenerateStage: stage {0:?} has zero sensitivity")]
    DegenerateStage(String),
    #[error("InvalidStage: {0}")]
    InvalidStage(String),
    #[error("WeightSum: age-group weights sum to {0}, not 1")]
    WeightSum(f64),
    #[error("InvalidScenario: {0}")]
    InvalidScenario(String),
    #[error(transparent)]
    Metrics(#[from] MetricsError),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScreeningStage {
    pub name: String,
    pub sensitivity: f64,
    pub specificity: f64,
    #[serde(default = "one")]
    pub capture_fraction: f64,
}

fn one() -> f64 {
    1.0
}

impl ScreeningStage {
    pub fn new(name: &str, sensitivity: f64, specificity: f64) -> Self {
        ScreeningStage {
            name: name.into(),
            sensitivity,
            specificity,
            capture_fraction: 1.0,
        }
    }

    pub fn with_capture(mut self, capture_fraction: f64) -> Self {
        self.capture_fraction = capture_fraction;
        self
    }

    pub fn positive_likelihood_ratio(&self) -> f64 {
        self.sensitivity / (1.0 - self.specificity)
    }

    pub fn validate(&self) -> Result<(), ScreenError> {
        if self.sensitivity == 0.0 {
            return Err(ScreenError::DegenerateStage(self.name.clone()));
        }
        let bad = |what: &str, v: f64| {
            Err(ScreenError::InvalidStage(format!(
                "{}: {what} {v} out of range",
                self.name
            )))
        };
        if !(self.sensitivity > 0.0 && self.sensitivity <= 1.0) {
            return bad("sensitivity", self.sensitivity);
        }
        if !(0.0..=1.0).contains(&self.specificity) {
            return bad("specificity", self.specificity);
        }
        if !(self.capture_fraction > 0.0 && self.capture_fraction <= 1.0) {
            return bad("capture fraction", self.capture_fraction);
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AgeGroupRate {
    pub rate: f64,
    pub weight: f64,
}

/// Age-standardised rate `sum(rate_i * weight_i)`.
pub fn asr(groups: &[AgeGroupRate]) -> Result<f64, ScreenError> {
    let total: f64 = groups.iter().map(|g| g.weight).sum();
    if groups.is_empty() || (total - 1.0).abs() > 1e-9 {
        return Err(ScreenError::WeightSum(total));
    }
    Ok(groups.iter().map(|g| g.rate * g.weight).sum())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StageResult {
    pub name: String,
    /// Population entering the stage.
    pub population: f64,
    /// Prevalence in that population.
    pub prevalence: f64,
    pub cases: f64,
    pub eligible_cases: f64,
    pub true_positives: f64,
    pub false_positives: f64,
    /// Flagged by the stage; the next stage's population.
    pub positives: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CascadeResult {
    pub stages: Vec<StageResult>,
    pub detected: f64,
    pub nns: f64,
    pub nns_base: f64,
    pub efficiency: f64,
    pub ppv: f64,
}

pub fn run_cascade(
    prior_prevalence: f64,
    population: f64,
    stages: &[ScreeningStage],
) -> Result<CascadeResult, ScreenError> {
    if stages.is_empty() {
        return Err(ScreenError::InvalidScenario("no stages".into()));
    }
    if !(prior_prevalence > 0.0 && prior_prevalence < 1.0) {
        return Err(ScreenError::InvalidScenario(format!(
            "prior prevalence {prior_prevalence} must lie in (0, 1)"
        )));
    }
    if !(population > 0.0 && population.is_finite()) {
        return Err(ScreenError::InvalidScenario(
            "population must be positive".into(),
        ));
    }
    for s in stages {
        s.validate()?;
    }
    let (mut n, mut p) = (population, prior_prevalence);
    let mut out = Vec::with_capacity(stages.len());
    for s in stages {
        let cases = p * n;
        let eligible = s.capture_fraction * cases;
        let tp = s.sensitivity * eligible;
        let fp = (1.0 - s.specificity) * (n - eligible);
        let positives = tp + fp;
        out.push(StageResult {
            name: s.name.clone(),
            population: n,
            prevalence: p,
            cases,
            eligible_cases: eligible,
            true_positives: tp,
            false_positives: fp,
            positives,
        });
        n = positives;
        p = if positives > 0.0 { tp / positives } else { 0.0 };
    }
    let last = out.last().expect("at least one stage");
    let sens_last = stages.last().expect("at least one stage").sensitivity;
    let nns = 1.0 / (last.prevalence * sens_last);
    let nns_base = 1.0 / (prior_prevalence * sens_last);
    Ok(CascadeResult {
        detected: last.true_positives,
        nns,
        nns_base,
        efficiency: nns_base / nns,
        ppv: last.true_positives / last.positives,
        stages: out,
    })
}

/// Prior given directly or as age-group rates.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum Prior {
    Prevalence { prevalence: f64 },
    AgeGroups { age_groups: Vec<AgeGroupRate> },
}

impl Prior {
    pub fn prevalence(&self) -> Result<f64, ScreenError> {
        match self {
            Prior::Prevalence { prevalence } => Ok(*prevalence),
            Prior::AgeGroups { age_groups } => asr(age_groups),
        }
    }
}

/// A screening scenario as read from TOML:
///
/// ```toml
/// name = "example"
/// population = 100000
/// prevalence = 0.000332
/// [[stages]]
/// name = "risk model"
/// sensitivity = 0.953
/// specificity = 0.552
/// ```
///
/// `prevalence` may be replaced by `[[age_groups]]` tables with `rate` and
/// `weight`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Scenario {
    pub name: String,
    pub population: f64,
    #[serde(flatten)]
    pub prior: Prior,
    pub stages: Vec<ScreeningStage>,
}

/// Deployment prior: 33.2 cases per 100,000.
pub const DEPLOYMENT_PREVALENCE: f64 = 0.000332;

fn eus() -> ScreeningStage {
    ScreeningStage::new("EUS", 0.908, 0.94)
}

impl Scenario {
    pub fn builtin(name: &str) -> Option<Scenario> {
        let stages = match name {
            "premod_redmod" => vec![
                ScreeningStage::new("PREMOD", 0.953, 0.552),
                ScreeningStage::new("REDMOD", 0.73, 0.81),
                eus(),
            ],
            "endpac" => vec![
                ScreeningStage::new("END-PAC", 0.558, 0.82).with_capture(0.40),
                eus(),
            ],
            "eus_only" => vec![eus()],
            _ => return None,
        };
        Some(Scenario {
            name: name.into(),
            population: 100_000.0,
            prior: Prior::Prevalence {
                prevalence: DEPLOYMENT_PREVALENCE,
            },
            stages,
        })
    }

    pub fn builtin_names() -> &'static [&'static str] {
        &["premod_redmod", "endpac", "eus_only"]
    }

    pub fn from_toml(text: &str) -> Result<Scenario, ScreenError> {
        toml::from_str(text).map_err(|e| ScreenError::InvalidScenario(e.to_string()))
    }

    pub fn run(&self) -> Result<CascadeResult, ScreenError> {
        run_cascade(self.prior.prevalence()?, self.population, &self.stages)
    }
}

/// Rounds to `decimals` places, ties to even.
pub fn round_half_even(x: f64, decimals: i32) -> f64 {
    let k = 10f64.powi(decimals);
    (x * k).round_ties_even() / k
}

impl CascadeResult {
    pub fn to_table(&self, title: &str) -> String {
        let mut s = String::new();
        let _ = writeln!(s, "{title}");
        let _ = writeln!(
            s,
            "{:<12} {:>12} {:>11} {:>10} {:>12} {:>12}",
            "stage", "population", "prevalence", "cases", "true_pos", "positives"
        );
        for st in &self.stages {
            let _ = writeln!(
                s,
                "{:<12} {:>12.0} {:>11.6} {:>10.2} {:>12.2} {:>12.0}",
                st.name,
                round_half_even(st.population, 0),
                st.prevalence,
                st.cases,
                st.true_positives,
                round_half_even(st.positives, 0)
            );
        }
        let _ = writeln!(s, "detected cancers   {:.1}", self.detected);
        let _ = writeln!(s, "NNS                {:.0}", round_half_even(self.nns, 0));
        let _ = writeln!(
            s,
            "NNS (final stage only) {:.0}",
            round_half_even(self.nns_base, 0)
        );
        let _ = writeln!(s, "efficiency         {:.1}x", self.efficiency);
        let _ = writeln!(s, "PPV                {:.1}%", 100.0 * self.ppv);
        s
    }

    pub fn to_csv(&self) -> String {
        let mut s = String::from(
            "stage,population,prevalence,cases,eligible_cases,true_positives,false_positives,positives\n",
        );
        for st in &self.stages {
            let _ = writeln!(
                s,
                "{},{},{},{},{},{},{},{}",
                st.name,
                st.population,
                st.prevalence,
                st.cases,
                st.eligible_cases,
                st.true_positives,
                st.false_positives,
                st.positives
            );
        }
        let _ = writeln!(s, "# detected,{}", self.detected);
        let _ = writeln!(s, "# nns,{}", self.nns);
        let _ = writeln!(s, "# nns_base,{}", self.nns_base);
        let _ = writeln!(s, "# efficiency,{}", self.efficiency);
        let _ = writeln!(s, "# ppv,{}", self.ppv);
        s
    }
}

/// Packages a model's operating point under `criterion` as a first stage.
pub fn stage1_from_model(
    name: &str,
    scored: &[(f64, bool)],
    criterion: ThresholdCriterion,
) -> Result<ScreeningStage, ScreenError> {
    let report = threshold_table(scored, &[criterion])?.remove(0);
    Ok(ScreeningStage::new(
        name,
        report.sensitivity,
        report.specificity,
    ))
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn asr_examples() {
        let one = [AgeGroupRate {
            rate: 3e-4,
            weight: 1.0,
        }];
        assert_eq!(asr(&one).unwrap(), 3e-4);
        let two = [
            AgeGroupRate {
                rate: 10e-5,
                weight: 0.5,
            },
            AgeGroupRate {
                rate: 20e-5,
                weight: 0.5,
            },
        ];
        assert!((asr(&two).unwrap() - 15e-5).abs() < 1e-18);
        let bad = [AgeGroupRate {
            rate: 1e-4,
            weight: 0.7,
        }];
        assert!(matches!(asr(&bad), Err(ScreenError::WeightSum(_))));
    }

    #[test]
    fn three_stage_pipeline() {
        let r = Scenario::builtin("premod_redmod").unwrap().run().unwrap();
        assert!((r.stages[0].positives - 44_816.0).abs() <= 2.0);
        assert!((r.stages[1].positives - 8_532.0).abs() <= 2.0);
        assert!((r.detected - 21.0).abs() <= 0.5);
        assert!((r.nns - 406.0).abs() <= 1.0);
        assert!((r.nns_base - 3317.0).abs() <= 1.0);
        assert!((r.efficiency - 8.2).abs() <= 0.1);
        assert!((100.0 * r.ppv - 3.9).abs() <= 0.1);
    }

    #[test]
    fn nod_subset_comparison() {
        let r = Scenario::builtin("endpac").unwrap().run().unwrap();
        let by_hand = 0.558 * 0.4 * 33.2 + 0.18 * (100_000.0 - 0.4 * 33.2);
        assert!((r.stages[0].positives - by_hand).abs() < 1e-9);
        assert!((r.stages[0].positives - 18_005.0).abs() <= 5.0);
        assert!((r.detected - 6.7).abs() <= 0.1);
        assert!((r.nns - 2676.0).abs() <= 2.0);
        assert!((100.0 * r.ppv - 0.6).abs() <= 0.05);
        let base = Scenario::builtin("eus_only").unwrap().run().unwrap();
        assert!((base.nns - 3317.0).abs() <= 1.0);
    }

    #[test]
    fn zero_sensitivity_is_degenerate() {
        let s = [ScreeningStage::new("x", 0.0, 0.9)];
        assert!(matches!(
            run_cascade(0.01, 1000.0, &s),
            Err(ScreenError::DegenerateStage(_))
        ));
    }

    #[test]
    fn scenario_file_round_trip() {
        let text = r#"
            name = "custom"
            population = 100000
            [[age_groups]]
            rate = 0.0002
            weight = 0.5
            [[age_groups]]
            rate = 0.000464
            weight = 0.5
            [[stages]]
            name = "model"
            sensitivity = 0.953
            specificity = 0.552
            [[stages]]
            name = "EUS"
            sensitivity = 0.908
            specificity = 0.94
            capture_fraction = 1.0
        "#;
        let sc = Scenario::from_toml(text).unwrap();
        assert!((sc.prior.prevalence().unwrap() - 0.000332).abs() < 1e-15);
        assert_eq!(sc.stages[0].capture_fraction, 1.0);
        let direct = Scenario::from_toml(
            "name = \"d\"\npopulation = 10\nprevalence = 0.1\n[[stages]]\nname = \"a\"\nsensitivity = 0.5\nspecificity = 0.5\n",
        )
        .unwrap();
        assert_eq!(direct.prior.prevalence().unwrap(), 0.1);
        assert!(Scenario::from_toml("name = 1").is_err());
    }

    #[test]
    fn rounding_is_half_even() {
        assert_eq!(round_half_even(2.5, 0), 2.0);
        assert_eq!(round_half_even(3.5, 0), 4.0);
        assert_eq!(round_half_even(44_816.77, 0), 44_817.0);
    }

    #[test]
    fn perfect_model_stage() {
        let s: Vec<(f64, bool)> = (0..10).map(|i| ((i % 2) as f64, i % 2 == 1)).collect();
        let st = stage1_from_model("m", &s, ThresholdCriterion::Fixed(0.5)).unwrap();
        assert_eq!((st.sensitivity, st.specificity), (1.0, 1.0));
    }

    proptest! {
        #[test]
        fn cascade_laws(
            prior in 1e-5f64..0.2,
            stages in prop::collection::vec((0.05f64..1.0, 0.0f64..0.99, 0.1f64..1.0), 1..5),
        ) {
            let stages: Vec<ScreeningStage> = stages
                .iter()
                .enumerate()
                .map(|(i, &(se, sp, c))| ScreeningStage::new(&format!("s{i}"), se, sp).with_capture(c))
                .collect();
            let r = run_cascade(prior, 1e5, &stages).unwrap();
            for (k, st) in r.stages.iter().enumerate() {
                prop_assert!(st.positives <= st.population * (1.0 + 1e-12));
                if let Some(next) = r.stages.get(k + 1) {
                    let carried = stages[k].capture_fraction * stages[k].sensitivity * st.cases;
                    prop_assert!((next.cases - carried).abs() <= 1e-9 * carried.max(1.0));
                    prop_assert!(next.cases <= st.cases * (1.0 + 1e-12));
                    if stages[k].capture_fraction == 1.0 && stages[k].positive_likelihood_ratio() > 1.0 {
                        prop_assert!(next.prevalence > st.prevalence);
                    }
                }
            }
        }

        #[test]
        fn single_perfect_specificity_stage(prior in 1e-5f64..0.5, sens in 0.01f64..1.0) {
            let r = run_cascade(prior, 1e5, &[ScreeningStage::new("a", sens, 1.0)]).unwrap();
            prop_assert!((r.nns - 1.0 / (prior * sens)).abs() <= 1e-9 * r.nns);
            prop_assert!((r.nns - r.nns_base).abs() <= 1e-9 * r.nns);
        }
    }
}

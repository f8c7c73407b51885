use super::{
    has_prefix, EventKind, Label, LabeledPatient, PatientId, PatientRecord, DAYS_PER_YEAR,
};
use rand::seq::index;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use std::collections::HashMap;
use thiserror::Error;

#[derive(Debug, Error, PartialEq)]
pub enum CohortError {
    #[error("no control patients to match from")]
    NoControls,
    #[error("invalid cohort spec: {0}")]
    InvalidSpec(String),
}

/// How the minimum-lab-measurement exclusion is read.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "kebab-case")]
pub enum LabRule {
    /// Fewer than `min_lab_measurements` results across the whole panel excludes.
    #[default]
    PerPanel,
    /// Every panel test needs at least `min_lab_measurements` results.
    PerTest,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct CohortSpec {
    pub case_code_prefixes: Vec<String>,
    pub control_excluded_prefixes: Vec<String>,
    pub min_age_years: f64,
    pub min_history_years: f64,
    pub history_window_years: f64,
    pub min_lab_measurements: usize,
    /// Labs of interest. Empty means every lab counts toward the panel.
    pub lab_panel: Vec<String>,
    pub lab_rule: LabRule,
    pub control_index_offset_days: i64,
    pub matching_ratio: usize,
    pub age_caliper_years: f64,
}

impl Default for CohortSpec {
    fn default() -> Self {
        let excluded = [
            "C15", "C16", "C17", "C18", "C19", "C20", "C21", "C25", "D00", "D01", "C7A", "150",
            "151", "152", "153", "154", "155", "156", "157", "230",
        ];
        CohortSpec {
            case_code_prefixes: vec!["157".into(), "C25".into()],
            control_excluded_prefixes: excluded.iter().map(|s| s.to_string()).collect(),
            min_age_years: 18.0,
            min_history_years: 3.0,
            history_window_years: 20.0,
            min_lab_measurements: 3,
            lab_panel: Vec::new(),
            lab_rule: LabRule::PerPanel,
            control_index_offset_days: 365,
            matching_ratio: 29,
            age_caliper_years: 2.0,
        }
    }
}

impl CohortSpec {
    pub fn validate(&self) -> Result<(), CohortError> {
        if self.matching_ratio < 1 {
            return Err(CohortError::InvalidSpec(
                "matching_ratio must be >= 1".into(),
            ));
        }
        let positive = [
            self.min_age_years,
            self.min_history_years,
            self.history_window_years,
            self.age_caliper_years,
        ];
        if positive.iter().any(|v| !(*v > 0.0))
            || self.min_lab_measurements == 0
            || self.control_index_offset_days <= 0
        {
            return Err(CohortError::InvalidSpec(
                "thresholds must be positive".into(),
            ));
        }
        Ok(())
    }

    pub fn history_window_days(&self) -> i64 {
        (self.history_window_years * DAYS_PER_YEAR).round() as i64
    }

    fn in_panel(&self, lab: &str) -> bool {
        self.lab_panel.is_empty() || self.lab_panel.iter().any(|l| l == lab)
    }

    /// Truncates `patient` to the history window before `index_day`.
    pub fn label(&self, patient: &PatientRecord, label: Label, index_day: i64) -> LabeledPatient {
        LabeledPatient {
            patient: patient.window(index_day - self.history_window_days(), index_day),
            label,
            index_day,
        }
    }
}

/// Per-rule exclusion tallies, in the order the rules are applied.
#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct ExclusionCounts {
    pub screened: usize,
    pub not_eligible: usize,
    pub under_age: usize,
    pub short_history: usize,
    pub no_panel_labs: usize,
    pub few_lab_measurements: usize,
    pub included: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Selection {
    pub patients: Vec<LabeledPatient>,
    pub counts: ExclusionCounts,
}

enum Verdict {
    Keep(LabeledPatient),
    UnderAge,
    ShortHistory,
    NoPanelLabs,
    FewLabs,
}

fn apply_filters(
    patient: &PatientRecord,
    label: Label,
    index_day: i64,
    spec: &CohortSpec,
) -> Verdict {
    if patient.age_years_at(index_day) < spec.min_age_years {
        return Verdict::UnderAge;
    }
    let lp = spec.label(patient, label, index_day);
    let span_days = lp.patient.first_day().map_or(0, |first| index_day - first);
    if (span_days as f64) < spec.min_history_years * DAYS_PER_YEAR {
        return Verdict::ShortHistory;
    }
    let mut per_lab: HashMap<&str, usize> = HashMap::new();
    for e in lp.patient.events() {
        if e.kind == EventKind::Lab && spec.in_panel(&e.code) {
            *per_lab.entry(e.code.as_str()).or_default() += 1;
        }
    }
    let total: usize = per_lab.values().sum();
    if total == 0 {
        return Verdict::NoPanelLabs;
    }
    let few = match spec.lab_rule {
        LabRule::PerPanel => total < spec.min_lab_measurements,
        LabRule::PerTest => {
            if spec.lab_panel.is_empty() {
                per_lab.values().any(|&n| n < spec.min_lab_measurements)
            } else {
                spec.lab_panel.iter().any(|lab| {
                    per_lab.get(lab.as_str()).copied().unwrap_or(0) < spec.min_lab_measurements
                })
            }
        }
    };
    if few {
        return Verdict::FewLabs;
    }
    Verdict::Keep(lp)
}

fn tally(verdict: Verdict, counts: &mut ExclusionCounts, out: &mut Vec<LabeledPatient>) {
    match verdict {
        Verdict::Keep(lp) => {
            counts.included += 1;
            out.push(lp);
        }
        Verdict::UnderAge => counts.under_age += 1,
        Verdict::ShortHistory => counts.short_history += 1,
        Verdict::NoPanelLabs => counts.no_panel_labs += 1,
        Verdict::FewLabs => counts.few_lab_measurements += 1,
    }
}

/// Patients whose first case-code diagnosis defines the index day and who
/// pass the age, history and lab rules. Others are dropped and tallied.
pub fn select_cases(patients: &[PatientRecord], spec: &CohortSpec) -> Selection {
    let mut counts = ExclusionCounts::default();
    let mut out = Vec::new();
    for p in patients {
        counts.screened += 1;
        let first_case = p.events().iter().find(|e| {
            e.kind == EventKind::Diagnosis && has_prefix(&e.code, &spec.case_code_prefixes)
        });
        let Some(ev) = first_case else {
            counts.not_eligible += 1;
            continue;
        };
        tally(
            apply_filters(p, Label::Case, ev.day, spec),
            &mut counts,
            &mut out,
        );
    }
    Selection {
        patients: out,
        counts,
    }
}

/// Patients with no excluded code anywhere in their record. The index day is
/// the last recorded day minus `control_index_offset_days`.
pub fn select_controls(patients: &[PatientRecord], spec: &CohortSpec) -> Selection {
    let mut counts = ExclusionCounts::default();
    let mut out = Vec::new();
    for p in patients {
        counts.screened += 1;
        let excluded = p.events().iter().any(|e| {
            e.kind == EventKind::Diagnosis && has_prefix(&e.code, &spec.control_excluded_prefixes)
        });
        let Some(last) = p.last_day() else {
            counts.not_eligible += 1;
            continue;
        };
        if excluded {
            counts.not_eligible += 1;
            continue;
        }
        let index_day = last - spec.control_index_offset_days;
        tally(
            apply_filters(p, Label::Control, index_day, spec),
            &mut counts,
            &mut out,
        );
    }
    Selection {
        patients: out,
        counts,
    }
}

/// Every selectable case followed by every selectable control.
pub fn select_cohort(
    patients: &[PatientRecord],
    spec: &CohortSpec,
) -> (Vec<LabeledPatient>, ExclusionCounts, ExclusionCounts) {
    let cases = select_cases(patients, spec);
    let controls = select_controls(patients, spec);
    let mut out = cases.patients;
    out.extend(controls.patients);
    (out, cases.counts, controls.counts)
}

#[derive(Debug, Clone, PartialEq)]
pub struct MatchedSet {
    pub case_id: PatientId,
    pub control_ids: Vec<PatientId>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct MatchOutcome {
    /// Cases followed by their matched controls, in case order.
    pub patients: Vec<LabeledPatient>,
    pub sets: Vec<MatchedSet>,
    /// Cases that found no eligible control; they are kept unmatched.
    pub exhausted: Vec<PatientId>,
    /// Cases that matched fewer than the requested ratio.
    pub short: Vec<(PatientId, usize)>,
}

impl MatchOutcome {
    /// Matched controls per case.
    pub fn achieved_ratio(&self) -> f64 {
        let controls: usize = self.sets.iter().map(|s| s.control_ids.len()).sum();
        if self.sets.is_empty() {
            0.0
        } else {
            controls as f64 / self.sets.len() as f64
        }
    }
}

/// Sex- and age-matched sampling without replacement. Cases are processed in
/// input order; each draws from the controls not yet used.
pub fn match_controls(
    cases: &[LabeledPatient],
    controls: &[LabeledPatient],
    spec: &CohortSpec,
    seed: u64,
) -> Result<MatchOutcome, CohortError> {
    if controls.is_empty() {
        return Err(CohortError::NoControls);
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut used = vec![false; controls.len()];
    let mut outcome = MatchOutcome {
        patients: Vec::new(),
        sets: Vec::new(),
        exhausted: Vec::new(),
        short: Vec::new(),
    };
    for case in cases {
        let age = case.age_at_index();
        let eligible: Vec<usize> = controls
            .iter()
            .enumerate()
            .filter(|(i, c)| {
                !used[*i]
                    && c.patient.sex == case.patient.sex
                    && (c.age_at_index() - age).abs() <= spec.age_caliper_years
            })
            .map(|(i, _)| i)
            .collect();
        let take = eligible.len().min(spec.matching_ratio);
        let mut picked: Vec<usize> = index::sample(&mut rng, eligible.len(), take)
            .into_iter()
            .map(|j| eligible[j])
            .collect();
        picked.sort_unstable();
        if eligible.is_empty() {
            log::warn!("MatchExhausted: case {} has no eligible control", case.id());
            outcome.exhausted.push(case.id().clone());
        } else if take < spec.matching_ratio {
            log::warn!(
                "case {} matched {take} of {} controls",
                case.id(),
                spec.matching_ratio
            );
            outcome.short.push((case.id().clone(), take));
        }
        outcome.patients.push(case.clone());
        for &i in &picked {
            used[i] = true;
            outcome.patients.push(controls[i].clone());
        }
        outcome.sets.push(MatchedSet {
            case_id: case.id().clone(),
            control_ids: picked.iter().map(|&i| controls[i].id().clone()).collect(),
        });
    }
    Ok(outcome)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::ehr::{EventRecord, Sex, Site};

    const Y: i64 = 365;

    fn patient(
        id: &str,
        birth_day: i64,
        sex: Sex,
        events: Vec<(i64, &str, Option<f64>)>,
    ) -> PatientRecord {
        let pid = PatientId::from(id);
        let events = events
            .into_iter()
            .map(|(d, c, v)| match v {
                Some(v) => EventRecord::lab(pid.clone(), d, c, v),
                None => EventRecord::diagnosis(pid.clone(), d, c),
            })
            .collect();
        PatientRecord::new(pid, sex, birth_day, Site::Rochester, events)
    }

    fn labs(day: i64, n: usize) -> Vec<(i64, &'static str, Option<f64>)> {
        (0..n)
            .map(|i| (day + i as i64, "glu", Some(100.0)))
            .collect()
    }

    #[test]
    fn case_included_with_first_case_code_as_index() {
        let birth = 0;
        let dx = 70 * 366;
        let mut ev = vec![
            (dx - 10 * Y, "K10", None),
            (dx, "C25.1", None),
            (dx + 40, "C25.9", None),
        ];
        ev.extend(labs(dx - 5 * Y, 5));
        let sel = select_cases(
            &[patient("a", birth, Sex::Female, ev)],
            &CohortSpec::default(),
        );
        assert_eq!(sel.counts.included, 1);
        let lp = &sel.patients[0];
        assert_eq!(lp.index_day, dx);
        assert!(lp.patient.events().iter().all(|e| e.day < dx));
    }

    #[test]
    fn case_under_eighteen_excluded() {
        let dx = 17 * 365;
        let mut ev = vec![(10, "K10", None), (dx, "C25", None)];
        ev.extend(labs(20, 5));
        let sel = select_cases(&[patient("a", 0, Sex::Male, ev)], &CohortSpec::default());
        assert_eq!(sel.counts.under_age, 1);
        assert!(sel.patients.is_empty());
    }

    #[test]
    fn five_patient_history_fixture() {
        // History spans by hand: 10y, 2.9y, 3.0y, 3.1y, none before index.
        let dx = 60 * 366;
        let spans = [3653, 1059, 1096, 1132];
        let mut ps = Vec::new();
        for (i, span) in spans.iter().enumerate() {
            let mut ev = vec![(dx - span, "K01", None), (dx, "C25", None)];
            ev.extend(labs(dx - 100, 3));
            ps.push(patient(&format!("p{i}"), 0, Sex::Male, ev));
        }
        ps.push(patient("p4", 0, Sex::Male, vec![(dx, "157.2", None)]));
        let sel = select_cases(&ps, &CohortSpec::default());
        let kept: Vec<_> = sel.patients.iter().map(|p| p.id().0.clone()).collect();
        // 3y = 1095.75 days, so 1096 passes and 1059 fails.
        assert_eq!(kept, vec!["p0", "p2", "p3"]);
        assert_eq!(sel.counts.short_history, 2);
    }

    #[test]
    fn history_truncated_to_twenty_years() {
        let dx = 80 * 366;
        let mut ev = vec![
            (dx - 25 * Y, "K01", None),
            (dx - 19 * Y, "K02", None),
            (dx, "C25", None),
        ];
        ev.extend(labs(dx - Y, 3));
        let sel = select_cases(&[patient("a", 0, Sex::Male, ev)], &CohortSpec::default());
        let codes: Vec<_> = sel.patients[0]
            .patient
            .events()
            .iter()
            .map(|e| e.code.as_str())
            .collect();
        assert!(!codes.contains(&"K01"));
        assert!(codes.contains(&"K02"));
    }

    #[test]
    fn control_index_is_last_minus_offset() {
        let mut ev = vec![(2000, "K01", None), (10000, "K02", None)];
        ev.extend(labs(5000, 3));
        let sel = select_controls(
            &[patient("c", -30 * Y, Sex::Male, ev)],
            &CohortSpec::default(),
        );
        assert_eq!(sel.patients[0].index_day, 9635);
    }

    #[test]
    fn control_with_excluded_code_dropped() {
        let mut ev = vec![
            (2000, "K01", None),
            (4000, "C18.2", None),
            (10000, "K02", None),
        ];
        ev.extend(labs(5000, 3));
        let sel = select_controls(
            &[patient("c", -30 * Y, Sex::Male, ev)],
            &CohortSpec::default(),
        );
        assert!(sel.patients.is_empty());
        assert_eq!(sel.counts.not_eligible, 1);
    }

    #[test]
    fn three_control_lab_fixture() {
        let mut good1 = vec![(2000, "K01", None), (10000, "K02", None)];
        good1.extend(labs(5000, 3));
        let mut good2 = vec![(1000, "K01", None), (9000, "K02", None)];
        good2.extend(labs(3000, 4));
        let mut bad = vec![(1000, "K01", None), (9000, "K02", None)];
        bad.extend(labs(3000, 2));
        let ps = vec![
            patient("g1", -30 * Y, Sex::Male, good1),
            patient("b", -30 * Y, Sex::Male, bad),
            patient("g2", -30 * Y, Sex::Female, good2),
        ];
        let sel = select_controls(&ps, &CohortSpec::default());
        assert_eq!(sel.patients.len(), 2);
        assert_eq!(sel.counts.few_lab_measurements, 1);
    }

    #[test]
    fn per_test_rule_is_stricter() {
        let mut ev = vec![(1000, "K01", None), (9000, "K02", None)];
        ev.extend(labs(3000, 3));
        ev.push((3500, "hgb", Some(13.0)));
        let p = patient("c", -30 * Y, Sex::Male, ev);
        let spec = CohortSpec::default();
        assert_eq!(select_controls(std::slice::from_ref(&p), &spec).patients.len(), 1);
        let strict = CohortSpec {
            lab_rule: LabRule::PerTest,
            ..CohortSpec::default()
        };
        assert_eq!(
            select_controls(&[p], &strict).counts.few_lab_measurements,
            1
        );
    }

    fn labeled(id: &str, sex: Sex, age: f64, label: Label) -> LabeledPatient {
        let index_day = 30000;
        let birth = index_day - (age * DAYS_PER_YEAR) as i64;
        LabeledPatient {
            patient: patient(id, birth, sex, vec![]),
            label,
            index_day,
        }
    }

    fn pool(n: usize) -> Vec<LabeledPatient> {
        (0..n)
            .map(|i| {
                labeled(
                    &format!("c{i}"),
                    Sex::Female,
                    69.0 + (i % 3) as f64,
                    Label::Control,
                )
            })
            .collect()
    }

    #[test]
    fn matching_fills_ratio() {
        let case = labeled("x", Sex::Female, 70.0, Label::Case);
        let out = match_controls(&[case], &pool(40), &CohortSpec::default(), 1).unwrap();
        assert_eq!(out.sets[0].control_ids.len(), 29);
        assert!(out.short.is_empty());
    }

    #[test]
    fn matching_saturates_with_warning() {
        let case = labeled("x", Sex::Female, 70.0, Label::Case);
        let out = match_controls(&[case], &pool(10), &CohortSpec::default(), 1).unwrap();
        assert_eq!(out.sets[0].control_ids.len(), 10);
        assert_eq!(out.short.len(), 1);
    }

    #[test]
    fn matching_exhausted_keeps_case() {
        let case = labeled("x", Sex::Male, 70.0, Label::Case);
        let out = match_controls(&[case], &pool(10), &CohortSpec::default(), 1).unwrap();
        assert_eq!(out.exhausted.len(), 1);
        assert_eq!(out.patients.len(), 1);
        assert!(matches!(
            match_controls(&[], &[], &CohortSpec::default(), 1),
            Err(CohortError::NoControls)
        ));
    }

    #[test]
    fn matching_is_seeded_and_without_reuse() {
        let cases: Vec<_> = (0..3)
            .map(|i| labeled(&format!("x{i}"), Sex::Female, 70.0, Label::Case))
            .collect();
        let controls = pool(60);
        let spec = CohortSpec {
            matching_ratio: 15,
            ..CohortSpec::default()
        };
        let a = match_controls(&cases, &controls, &spec, 9).unwrap();
        let b = match_controls(&cases, &controls, &spec, 9).unwrap();
        assert_eq!(a, b);
        let mut all: Vec<_> = a.sets.iter().flat_map(|s| s.control_ids.clone()).collect();
        let n = all.len();
        all.sort();
        all.dedup();
        assert_eq!(all.len(), n);
        assert_eq!(n, 45);
        let c = match_controls(&cases, &controls, &spec, 10).unwrap();
        assert_ne!(a.sets, c.sets);
    }
}

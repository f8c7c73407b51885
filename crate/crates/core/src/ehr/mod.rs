//! Patient, event and cohort records.
//!
//! Days are integer offsets from an arbitrary epoch. Diagnosis codes are
//! opaque strings; they are compared after [`normalize_code`].

mod cohort;
mod io;

pub use cohort::{
    match_controls, select_cases, select_cohort, select_controls, CohortError, CohortSpec,
    ExclusionCounts, LabRule, MatchOutcome, MatchedSet, Selection,
};
pub use io::{
    label_patients, read_demographics, read_events, read_labels, read_patients, write_demographics,
    write_events, write_labels, Demographics, IoError,
};

use serde::{Deserialize, Serialize};
use std::fmt;
use std::str::FromStr;

pub const DAYS_PER_YEAR: f64 = 365.25;

#[derive(Debug, Clone, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(transparent)]
pub struct PatientId(pub String);

impl PatientId {
    pub fn as_str(&self) -> &str {
        &self.0
    }
}

impl fmt::Display for PatientId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.0)
    }
}

impl From<&str> for PatientId {
    fn from(s: &str) -> Self {
        PatientId(s.to_owned())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum EventKind {
    Diagnosis,
    Lab,
}

impl EventKind {
    pub fn as_str(self) -> &'static str {
        match self {
            EventKind::Diagnosis => "dx",
            EventKind::Lab => "lab",
        }
    }
}

impl FromStr for EventKind {
    type Err = String;
    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s.to_ascii_lowercase().as_str() {
            "dx" | "diagnosis" => Ok(EventKind::Diagnosis),
            "lab" => Ok(EventKind::Lab),
            other => Err(format!("unknown event kind {other:?}")),
        }
    }
}

/// One dated clinical event. `value` is present exactly for labs.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EventRecord {
    pub patient_id: PatientId,
    pub day: i64,
    pub kind: EventKind,
    pub code: String,
    pub value: Option<f64>,
}

impl EventRecord {
    pub fn diagnosis(patient_id: PatientId, day: i64, code: impl Into<String>) -> Self {
        EventRecord {
            patient_id,
            day,
            kind: EventKind::Diagnosis,
            code: code.into(),
            value: None,
        }
    }

    pub fn lab(patient_id: PatientId, day: i64, name: impl Into<String>, value: f64) -> Self {
        EventRecord {
            patient_id,
            day,
            kind: EventKind::Lab,
            code: name.into(),
            value: Some(value),
        }
    }

    pub fn is_valid(&self) -> bool {
        match self.kind {
            EventKind::Diagnosis => self.value.is_none(),
            EventKind::Lab => self.value.is_some_and(f64::is_finite),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Sex {
    Female,
    Male,
}

impl Sex {
    pub fn as_str(self) -> &'static str {
        match self {
            Sex::Female => "F",
            Sex::Male => "M",
        }
    }
}

impl FromStr for Sex {
    type Err = String;
    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s.to_ascii_uppercase().as_str() {
            "F" | "FEMALE" => Ok(Sex::Female),
            "M" | "MALE" => Ok(Sex::Male),
            other => Err(format!("unknown sex {other:?}")),
        }
    }
}

/// Care site. The four named sites are the defaults; any other name is kept
/// verbatim so synthetic and external cohorts can use their own labels.
#[derive(Debug, Clone, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(into = "String", try_from = "String")]
pub enum Site {
    Rochester,
    Mchs,
    Arizona,
    Florida,
    Named(String),
}

impl Site {
    pub fn name(&self) -> &str {
        match self {
            Site::Rochester => "Rochester",
            Site::Mchs => "MCHS",
            Site::Arizona => "Arizona",
            Site::Florida => "Florida",
            Site::Named(s) => s,
        }
    }
}

impl fmt::Display for Site {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Site {
    type Err = String;
    fn from_str(s: &str) -> Result<Self, Self::Err> {
        let s = s.trim();
        if s.is_empty() {
            return Err("empty site name".into());
        }
        Ok(match s.to_ascii_lowercase().as_str() {
            "rochester" => Site::Rochester,
            "mchs" => Site::Mchs,
            "arizona" => Site::Arizona,
            "florida" => Site::Florida,
            _ => Site::Named(s.to_owned()),
        })
    }
}

impl From<Site> for String {
    fn from(s: Site) -> String {
        s.name().to_owned()
    }
}

impl TryFrom<String> for Site {
    type Error = String;
    fn try_from(s: String) -> Result<Self, Self::Error> {
        s.parse()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PatientRecord {
    pub patient_id: PatientId,
    pub sex: Sex,
    pub birth_day: i64,
    pub site: Site,
    events: Vec<EventRecord>,
}

impl PatientRecord {
    /// Builds a record, sorting events by day. The sort is stable, so events
    /// sharing a day keep their input order.
    pub fn new(
        patient_id: PatientId,
        sex: Sex,
        birth_day: i64,
        site: Site,
        mut events: Vec<EventRecord>,
    ) -> Self {
        events.sort_by_key(|e| e.day);
        PatientRecord {
            patient_id,
            sex,
            birth_day,
            site,
            events,
        }
    }

    pub fn events(&self) -> &[EventRecord] {
        &self.events
    }

    pub fn first_day(&self) -> Option<i64> {
        self.events.first().map(|e| e.day)
    }

    pub fn last_day(&self) -> Option<i64> {
        self.events.last().map(|e| e.day)
    }

    pub fn age_years_at(&self, day: i64) -> f64 {
        (day - self.birth_day) as f64 / DAYS_PER_YEAR
    }

    /// Copy restricted to events with `from <= day < until`.
    pub fn window(&self, from: i64, until: i64) -> PatientRecord {
        PatientRecord {
            patient_id: self.patient_id.clone(),
            sex: self.sex,
            birth_day: self.birth_day,
            site: self.site.clone(),
            events: self
                .events
                .iter()
                .filter(|e| e.day >= from && e.day < until)
                .cloned()
                .collect(),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Label {
    Case,
    Control,
}

impl Label {
    pub fn is_case(self) -> bool {
        self == Label::Case
    }

    pub fn as_f64(self) -> f64 {
        if self.is_case() {
            1.0
        } else {
            0.0
        }
    }

    pub fn from_bool(case: bool) -> Self {
        if case {
            Label::Case
        } else {
            Label::Control
        }
    }

    pub fn as_str(self) -> &'static str {
        match self {
            Label::Case => "case",
            Label::Control => "control",
        }
    }
}

impl FromStr for Label {
    type Err = String;
    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s.to_ascii_lowercase().as_str() {
            "case" | "1" => Ok(Label::Case),
            "control" | "0" => Ok(Label::Control),
            other => Err(format!("unknown label {other:?}")),
        }
    }
}

/// A patient admitted to the study, with history truncated to the window
/// preceding `index_day`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LabeledPatient {
    pub patient: PatientRecord,
    pub label: Label,
    pub index_day: i64,
}

impl LabeledPatient {
    pub fn id(&self) -> &PatientId {
        &self.patient.patient_id
    }

    pub fn site(&self) -> &Site {
        &self.patient.site
    }

    pub fn age_at_index(&self) -> f64 {
        self.patient.age_years_at(self.index_day)
    }
}

/// Uppercases and strips dots and surrounding whitespace: `"c25.1"` becomes `"C251"`.
pub fn normalize_code(code: &str) -> String {
    code.trim()
        .chars()
        .filter(|c| *c != '.')
        .map(|c| c.to_ascii_uppercase())
        .collect()
}

pub fn has_prefix(code: &str, prefixes: &[String]) -> bool {
    let code = normalize_code(code);
    prefixes
        .iter()
        .any(|p| code.starts_with(normalize_code(p).as_str()))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn codes_normalize() {
        assert_eq!(normalize_code(" c25.1 "), "C251");
        assert!(has_prefix("c25.9", &["C25".into()]));
        assert!(!has_prefix("K25", &["C25".into()]));
        assert!(has_prefix("157.0", &["157".into()]));
    }

    #[test]
    fn record_sorts_events() {
        let id = PatientId::from("p");
        let r = PatientRecord::new(
            id.clone(),
            Sex::Male,
            0,
            Site::Rochester,
            vec![
                EventRecord::diagnosis(id.clone(), 10, "A"),
                EventRecord::diagnosis(id.clone(), 3, "B"),
                EventRecord::lab(id, 10, "glu", 1.0),
            ],
        );
        let days: Vec<_> = r.events().iter().map(|e| e.day).collect();
        assert_eq!(days, vec![3, 10, 10]);
        assert_eq!(r.events()[1].code, "A");
    }

    #[test]
    fn site_names_round_trip() {
        for s in ["Rochester", "MCHS", "Arizona", "Florida", "SiteC"] {
            let site: Site = s.parse().unwrap();
            assert_eq!(site.name(), s);
        }
        assert!("".parse::<Site>().is_err());
    }

    #[test]
    fn lab_value_presence() {
        let id = PatientId::from("p");
        assert!(EventRecord::lab(id.clone(), 0, "x", 2.0).is_valid());
        assert!(!EventRecord::lab(id.clone(), 0, "x", f64::NAN).is_valid());
        let mut d = EventRecord::diagnosis(id, 0, "K1");
        assert!(d.is_valid());
        d.value = Some(1.0);
        assert!(!d.is_valid());
    }
}

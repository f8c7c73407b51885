//! Tab-separated event, demographics and label files.
//!
//! ```text
//! events:        patient_id \t day \t kind \t code \t value   (value empty for dx)
//! demographics:  patient_id \t sex \t birth_day \t site
//! labels:        patient_id \t label \t index_day
//! ```
//!
//! Blank lines and lines starting with `#` are skipped.

use super::cohort::CohortSpec;
use super::{EventKind, EventRecord, Label, LabeledPatient, PatientId, PatientRecord, Sex, Site};
use std::collections::HashMap;
use std::io::{self, BufRead, Write};
use thiserror::Error;

#[derive(Debug, Error)]
pub enum IoError {
    #[error("line {line}: {msg}")]
    Parse { line: usize, msg: String },
    #[error("patient {0} has events but no demographics row")]
    MissingDemographics(String),
    #[error("patient {0} is labeled but unknown")]
    UnknownPatient(String),
    #[error(transparent)]
    Io(#[from] io::Error),
}

fn records<R: BufRead>(
    reader: R,
    n_fields: usize,
) -> impl Iterator<Item = Result<(usize, Vec<String>), IoError>> {
    reader.lines().enumerate().filter_map(move |(i, line)| {
        let line = match line {
            Ok(l) => l,
            Err(e) => return Some(Err(IoError::Io(e))),
        };
        let trimmed = line.trim_end_matches(['\r', '\n']);
        if trimmed.trim().is_empty() || trimmed.starts_with('#') {
            return None;
        }
        let fields: Vec<String> = trimmed.split('\t').map(str::to_owned).collect();
        if fields.len() != n_fields {
            return Some(Err(IoError::Parse {
                line: i + 1,
                msg: format!(
                    "expected {n_fields} tab-separated fields, got {}",
                    fields.len()
                ),
            }));
        }
        Some(Ok((i + 1, fields)))
    })
}

fn parse<T: std::str::FromStr>(line: usize, what: &str, s: &str) -> Result<T, IoError>
where
    T::Err: std::fmt::Display,
{
    s.trim().parse().map_err(|e: T::Err| IoError::Parse {
        line,
        msg: format!("bad {what} {s:?}: {e}"),
    })
}

pub fn read_events<R: BufRead>(reader: R) -> Result<Vec<EventRecord>, IoError> {
    let mut out = Vec::new();
    for rec in records(reader, 5) {
        let (line, f) = rec?;
        let kind: EventKind = parse(line, "kind", &f[2])?;
        let value = match (kind, f[4].trim()) {
            (EventKind::Diagnosis, "") => None,
            (EventKind::Lab, v) if !v.is_empty() => Some(parse::<f64>(line, "value", v)?),
            _ => {
                return Err(IoError::Parse {
                    line,
                    msg: "value must be present exactly for lab events".into(),
                })
            }
        };
        let ev = EventRecord {
            patient_id: PatientId(f[0].clone()),
            day: parse(line, "day", &f[1])?,
            kind,
            code: f[3].clone(),
            value,
        };
        if !ev.is_valid() {
            return Err(IoError::Parse {
                line,
                msg: "non-finite lab value".into(),
            });
        }
        out.push(ev);
    }
    Ok(out)
}

pub fn write_events<W: Write>(mut w: W, events: &[EventRecord]) -> io::Result<()> {
    for e in events {
        let value = e.value.map(|v| format!("{v}")).unwrap_or_default();
        writeln!(
            w,
            "{}\t{}\t{}\t{}\t{}",
            e.patient_id,
            e.day,
            e.kind.as_str(),
            e.code,
            value
        )?;
    }
    Ok(())
}

#[derive(Debug, Clone, PartialEq)]
pub struct Demographics {
    pub patient_id: PatientId,
    pub sex: Sex,
    pub birth_day: i64,
    pub site: Site,
}

pub fn read_demographics<R: BufRead>(reader: R) -> Result<Vec<Demographics>, IoError> {
    records(reader, 4)
        .map(|rec| {
            let (line, f) = rec?;
            Ok(Demographics {
                patient_id: PatientId(f[0].clone()),
                sex: parse(line, "sex", &f[1])?,
                birth_day: parse(line, "birth_day", &f[2])?,
                site: parse(line, "site", &f[3])?,
            })
        })
        .collect()
}

pub fn write_demographics<W: Write>(mut w: W, patients: &[PatientRecord]) -> io::Result<()> {
    for p in patients {
        writeln!(
            w,
            "{}\t{}\t{}\t{}",
            p.patient_id,
            p.sex.as_str(),
            p.birth_day,
            p.site
        )?;
    }
    Ok(())
}

/// Joins events onto demographics. Output follows demographics order;
/// patients without events get an empty history.
pub fn read_patients<E: BufRead, D: BufRead>(
    events: E,
    demographics: D,
) -> Result<Vec<PatientRecord>, IoError> {
    let demo = read_demographics(demographics)?;
    let mut by_id: HashMap<PatientId, Vec<EventRecord>> = HashMap::new();
    for e in read_events(events)? {
        by_id.entry(e.patient_id.clone()).or_default().push(e);
    }
    let mut out = Vec::with_capacity(demo.len());
    for d in demo {
        let events = by_id.remove(&d.patient_id).unwrap_or_default();
        out.push(PatientRecord::new(
            d.patient_id,
            d.sex,
            d.birth_day,
            d.site,
            events,
        ));
    }
    if let Some(orphan) = by_id.keys().min() {
        return Err(IoError::MissingDemographics(orphan.0.clone()));
    }
    Ok(out)
}

pub fn read_labels<R: BufRead>(reader: R) -> Result<Vec<(PatientId, Label, i64)>, IoError> {
    records(reader, 3)
        .map(|rec| {
            let (line, f) = rec?;
            Ok((
                PatientId(f[0].clone()),
                parse(line, "label", &f[1])?,
                parse(line, "index_day", &f[2])?,
            ))
        })
        .collect()
}

pub fn write_labels<W: Write>(mut w: W, patients: &[LabeledPatient]) -> io::Result<()> {
    for p in patients {
        writeln!(w, "{}\t{}\t{}", p.id(), p.label.as_str(), p.index_day)?;
    }
    Ok(())
}

/// Rebuilds labeled patients, in label-file order, windowed as `spec`
/// windows a fresh selection.
pub fn label_patients(
    patients: &[PatientRecord],
    labels: &[(PatientId, Label, i64)],
    spec: &CohortSpec,
) -> Result<Vec<LabeledPatient>, IoError> {
    let by_id: HashMap<&PatientId, &PatientRecord> =
        patients.iter().map(|p| (&p.patient_id, p)).collect();
    labels
        .iter()
        .map(|(id, label, index_day)| {
            let p = by_id
                .get(id)
                .ok_or_else(|| IoError::UnknownPatient(id.0.clone()))?;
            Ok(spec.label(p, *label, *index_day))
        })
        .collect()
}

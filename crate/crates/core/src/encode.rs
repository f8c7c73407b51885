//! Time-bucketed encoding of event histories.
//!
//! Bucket `t` holds events whose offset before the index day lies in
//! `(t * tau, (t + 1) * tau]`, so `t = 0` is the most recent bucket and an
//! event on the index day itself is never encoded. The first `C` columns
//! count diagnosis codes, the remaining `L` columns hold standardized lab
//! averages with 0 for buckets without a result.

use crate::autodiff::Tensor;
use crate::ehr::{normalize_code, EventKind, Label, LabeledPatient, PatientId, DAYS_PER_YEAR};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use std::collections::{BTreeMap, BTreeSet, HashMap};
use std::io::{self, Read, Write};
use std::marker::PhantomData;
use thiserror::Error;

#[derive(Debug, Error)]
pub enum EncodeError {
    #[error("VocabEmpty: code and lab vocabularies are both empty")]
    VocabEmpty,
    #[error("duplicate vocabulary entry {0:?}")]
    DuplicateVocab(String),
    #[error("invalid encoder config: {0}")]
    InvalidConfig(String),
    #[error("Corrupt matrix file: {0}")]
    Corrupt(String),
    #[error(transparent)]
    Io(#[from] io::Error),
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LabStat {
    pub mean: f64,
    pub sd: f64,
}

impl Default for LabStat {
    fn default() -> Self {
        LabStat { mean: 0.0, sd: 1.0 }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EncoderConfig {
    pub tau_days: i64,
    pub n_buckets: usize,
    pub code_vocab: Vec<String>,
    pub lab_vocab: Vec<String>,
    /// One entry per lab, fitted on development data.
    pub lab_stats: Vec<LabStat>,
    /// Raw bucket averages instead of z-scores.
    #[serde(default)]
    pub raw_labs: bool,
}

impl EncoderConfig {
    pub fn new(
        tau_days: i64,
        n_buckets: usize,
        code_vocab: Vec<String>,
        lab_vocab: Vec<String>,
    ) -> Result<Self, EncodeError> {
        let code_vocab: Vec<String> = code_vocab.iter().map(|c| normalize_code(c)).collect();
        let lab_stats = vec![LabStat::default(); lab_vocab.len()];
        let cfg = EncoderConfig {
            tau_days,
            n_buckets,
            code_vocab,
            lab_vocab,
            lab_stats,
            raw_labs: false,
        };
        cfg.validate()?;
        Ok(cfg)
    }

    /// Builds the vocabularies from every code and lab seen in `patients`
    /// (sorted) and fits lab standardization on them.
    pub fn fit(
        patients: &[LabeledPatient],
        tau_days: i64,
        n_buckets: usize,
    ) -> Result<Self, EncodeError> {
        let mut codes = BTreeSet::new();
        let mut labs = BTreeSet::new();
        for p in patients {
            for e in p.patient.events() {
                match e.kind {
                    EventKind::Diagnosis => codes.insert(normalize_code(&e.code)),
                    EventKind::Lab => labs.insert(e.code.clone()),
                };
            }
        }
        let mut cfg = Self::new(
            tau_days,
            n_buckets,
            codes.into_iter().collect(),
            labs.into_iter().collect(),
        )?;
        cfg.fit_lab_stats(patients);
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<(), EncodeError> {
        if self.code_vocab.is_empty() && self.lab_vocab.is_empty() {
            return Err(EncodeError::VocabEmpty);
        }
        if self.tau_days <= 0 || self.n_buckets == 0 {
            return Err(EncodeError::InvalidConfig(
                "tau_days and n_buckets must be positive".into(),
            ));
        }
        if self.lab_stats.len() != self.lab_vocab.len() {
            return Err(EncodeError::InvalidConfig(
                "one lab stat per lab required".into(),
            ));
        }
        for vocab in [&self.code_vocab, &self.lab_vocab] {
            let mut seen = BTreeSet::new();
            for v in vocab {
                if !seen.insert(v) {
                    return Err(EncodeError::DuplicateVocab(v.clone()));
                }
            }
        }
        Ok(())
    }

    /// Per-lab mean and standard deviation over all values in the
    /// patients' windows. A lab with no spread keeps sd 1.
    pub fn fit_lab_stats(&mut self, patients: &[LabeledPatient]) {
        let index: HashMap<&str, usize> = self
            .lab_vocab
            .iter()
            .enumerate()
            .map(|(i, l)| (l.as_str(), i))
            .collect();
        let mut acc = vec![(0usize, 0.0f64, 0.0f64); self.lab_vocab.len()];
        for p in patients {
            for e in p.patient.events() {
                if let (EventKind::Lab, Some(v)) = (e.kind, e.value) {
                    if let Some(&i) = index.get(e.code.as_str()) {
                        let a = &mut acc[i];
                        a.0 += 1;
                        a.1 += v;
                        a.2 += v * v;
                    }
                }
            }
        }
        self.lab_stats = acc
            .into_iter()
            .map(|(n, s, ss)| {
                if n == 0 {
                    return LabStat::default();
                }
                let mean = s / n as f64;
                let var = (ss / n as f64 - mean * mean).max(0.0);
                let sd = var.sqrt();
                LabStat {
                    mean,
                    sd: if sd > 1e-12 { sd } else { 1.0 },
                }
            })
            .collect();
    }

    pub fn n_codes(&self) -> usize {
        self.code_vocab.len()
    }

    pub fn n_features(&self) -> usize {
        self.code_vocab.len() + self.lab_vocab.len()
    }

    pub fn feature_name(&self, j: usize) -> &str {
        if j < self.code_vocab.len() {
            &self.code_vocab[j]
        } else {
            &self.lab_vocab[j - self.code_vocab.len()]
        }
    }

    /// SHA-256 hex digests of the code and lab vocabularies.
    pub fn fingerprints(&self) -> VocabFingerprint {
        VocabFingerprint {
            codes: digest_vocab(&self.code_vocab),
            labs: digest_vocab(&self.lab_vocab),
        }
    }

    /// Bucket holding an event `offset` days before the window end, if any.
    pub fn bucket_of(&self, offset: i64) -> Option<usize> {
        if offset < 1 {
            return None;
        }
        let t = ((offset - 1) / self.tau_days) as usize;
        (t < self.n_buckets).then_some(t)
    }

    /// Number of leading buckets that overlap the last `lead_years`.
    pub fn lead_buckets(&self, lead_years: f64) -> usize {
        lead_bucket_count(self.tau_days, self.n_buckets, lead_years)
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct VocabFingerprint {
    pub codes: String,
    pub labs: String,
}

fn digest_vocab(vocab: &[String]) -> String {
    let mut h = Sha256::new();
    for v in vocab {
        h.update(v.as_bytes());
        h.update([0u8]);
    }
    hex::encode(h.finalize())
}

fn lead_bucket_count(tau_days: i64, n_buckets: usize, lead_years: f64) -> usize {
    if !(lead_years > 0.0) {
        return 0;
    }
    let lead_days = lead_years * DAYS_PER_YEAR;
    // bucket t starts t*tau days back; it overlaps the lead period iff t*tau < lead_days
    let n = (lead_days / tau_days as f64).ceil() as usize;
    n.min(n_buckets)
}

/// Matrix encoded from the complete history; the only kind training accepts.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Full;

/// Matrix with the lead period blanked; the only kind evaluation accepts.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct LeadExcluded;

#[derive(Debug, Clone, PartialEq)]
pub struct BucketMatrix<S = Full> {
    pub values: Tensor,
    pub patient_id: PatientId,
    pub label: Label,
    pub index_day: i64,
    pub tau_days: i64,
    /// Years blanked before the index day; 0 for a full matrix.
    pub lead_years: f64,
    /// Events skipped because their code or lab is outside the vocabulary.
    pub out_of_vocab: usize,
    _stage: PhantomData<S>,
}

impl<S> BucketMatrix<S> {
    pub fn n_buckets(&self) -> usize {
        self.values.rows()
    }

    pub fn n_features(&self) -> usize {
        self.values.cols()
    }

    /// Blanks every bucket overlapping the final `lead_years` before the
    /// index day. Repeated exclusion keeps the larger lead.
    pub fn exclude_lead_time(&self, lead_years: f64) -> BucketMatrix<LeadExcluded> {
        let lead = lead_years.max(self.lead_years).max(0.0);
        let mut values = self.values.clone();
        let n = lead_bucket_count(self.tau_days, self.n_buckets(), lead);
        let d = self.n_features();
        values.data_mut()[..n * d].fill(0.0);
        BucketMatrix {
            values,
            patient_id: self.patient_id.clone(),
            label: self.label,
            index_day: self.index_day,
            tau_days: self.tau_days,
            lead_years: lead,
            out_of_vocab: self.out_of_vocab,
            _stage: PhantomData,
        }
    }

    fn retag<R>(self) -> BucketMatrix<R> {
        BucketMatrix {
            values: self.values,
            patient_id: self.patient_id,
            label: self.label,
            index_day: self.index_day,
            tau_days: self.tau_days,
            lead_years: self.lead_years,
            out_of_vocab: self.out_of_vocab,
            _stage: PhantomData,
        }
    }
}

impl BucketMatrix<Full> {
    /// Wraps already-encoded values; row 0 is the bucket nearest the index.
    pub fn from_parts(
        values: Tensor,
        patient_id: PatientId,
        label: Label,
        index_day: i64,
        tau_days: i64,
    ) -> Self {
        BucketMatrix {
            values,
            patient_id,
            label,
            index_day,
            tau_days,
            lead_years: 0.0,
            out_of_vocab: 0,
            _stage: PhantomData,
        }
    }

    /// Matrix as scored at evaluation with no lead period.
    pub fn as_evaluation(&self) -> BucketMatrix<LeadExcluded> {
        self.exclude_lead_time(0.0)
    }
}

/// Encodes `patient`'s history before `patient.index_day`.
pub fn encode(patient: &LabeledPatient, cfg: &EncoderConfig) -> Result<BucketMatrix, EncodeError> {
    encode_at(patient, cfg, patient.index_day)
}

/// Encodes the history strictly before `end_day`, treating `end_day` as a
/// virtual index date.
pub fn encode_at(
    patient: &LabeledPatient,
    cfg: &EncoderConfig,
    end_day: i64,
) -> Result<BucketMatrix, EncodeError> {
    if cfg.code_vocab.is_empty() && cfg.lab_vocab.is_empty() {
        return Err(EncodeError::VocabEmpty);
    }
    let codes: HashMap<&str, usize> = cfg
        .code_vocab
        .iter()
        .enumerate()
        .map(|(i, c)| (c.as_str(), i))
        .collect();
    let labs: HashMap<&str, usize> = cfg
        .lab_vocab
        .iter()
        .enumerate()
        .map(|(i, l)| (l.as_str(), i))
        .collect();
    let (t_max, c, d) = (cfg.n_buckets, cfg.n_codes(), cfg.n_features());
    let mut values = vec![0.0; t_max * d];
    let mut lab_sum = vec![0.0; t_max * cfg.lab_vocab.len()];
    let mut lab_n = vec![0u32; t_max * cfg.lab_vocab.len()];
    let mut out_of_vocab = 0;
    for e in patient.patient.events() {
        let Some(t) = cfg.bucket_of(end_day - e.day) else {
            continue;
        };
        match e.kind {
            EventKind::Diagnosis => match codes.get(normalize_code(&e.code).as_str()) {
                Some(&j) => values[t * d + j] += 1.0,
                None => out_of_vocab += 1,
            },
            EventKind::Lab => match (labs.get(e.code.as_str()), e.value) {
                (Some(&l), Some(v)) => {
                    let k = t * cfg.lab_vocab.len() + l;
                    lab_sum[k] += v;
                    lab_n[k] += 1;
                }
                _ => out_of_vocab += 1,
            },
        }
    }
    let n_labs = cfg.lab_vocab.len();
    for t in 0..t_max {
        for l in 0..n_labs {
            let k = t * n_labs + l;
            if lab_n[k] == 0 {
                continue;
            }
            let mean = lab_sum[k] / lab_n[k] as f64;
            let s = cfg.lab_stats[l];
            values[t * d + c + l] = if cfg.raw_labs {
                mean
            } else {
                (mean - s.mean) / s.sd
            };
        }
    }
    Ok(BucketMatrix {
        values: Tensor::from_rows(t_max, d, values).expect("sized above"),
        patient_id: patient.id().clone(),
        label: patient.label,
        index_day: end_day,
        tau_days: cfg.tau_days,
        lead_years: 0.0,
        out_of_vocab,
        _stage: PhantomData,
    })
}

/// Windows ending at `index_day - k * step_days` for every `k` whose end
/// still lies after the first recorded event, oldest first. At least one
/// window (ending at the index day) is always produced.
pub fn sliding_windows(
    patient: &LabeledPatient,
    cfg: &EncoderConfig,
    step_days: i64,
) -> Result<Vec<(i64, BucketMatrix)>, EncodeError> {
    if step_days <= 0 {
        return Err(EncodeError::InvalidConfig(
            "step_days must be positive".into(),
        ));
    }
    let first = patient.patient.first_day().unwrap_or(patient.index_day);
    let span = (patient.index_day - first).max(0);
    let count = ((span + step_days - 1) / step_days).max(1);
    (0..count)
        .rev()
        .map(|k| {
            let end = patient.index_day - k * step_days;
            encode_at(patient, cfg, end).map(|m| (end, m))
        })
        .collect()
}

const MATRIX_MAGIC: &[u8; 6] = b"PMBKT1";

/// Binary dump: magic, `T`, `C`, `L` as u32, the two vocabulary digests as
/// 32 raw bytes each, a u64 record count, then per record the patient id
/// (u32 length + UTF-8), label byte, index day (i64), lead years (f64) and
/// `T * D` row-major f64 values. Everything little-endian.
pub fn write_matrices<W: Write, S>(
    mut w: W,
    cfg: &EncoderConfig,
    matrices: &[BucketMatrix<S>],
) -> Result<(), EncodeError> {
    w.write_all(MATRIX_MAGIC)?;
    for n in [cfg.n_buckets, cfg.n_codes(), cfg.lab_vocab.len()] {
        w.write_all(&(n as u32).to_le_bytes())?;
    }
    let fp = cfg.fingerprints();
    for hexed in [&fp.codes, &fp.labs] {
        w.write_all(&hex::decode(hexed).expect("own digest"))?;
    }
    w.write_all(&(matrices.len() as u64).to_le_bytes())?;
    for m in matrices {
        if m.values.shape() != [cfg.n_buckets, cfg.n_features()] {
            return Err(EncodeError::InvalidConfig(format!(
                "matrix for {} has shape {:?}",
                m.patient_id,
                m.values.shape()
            )));
        }
        let id = m.patient_id.as_str().as_bytes();
        w.write_all(&(id.len() as u32).to_le_bytes())?;
        w.write_all(id)?;
        w.write_all(&[m.label.is_case() as u8])?;
        w.write_all(&m.index_day.to_le_bytes())?;
        w.write_all(&m.lead_years.to_le_bytes())?;
        for v in m.values.data() {
            w.write_all(&v.to_le_bytes())?;
        }
    }
    Ok(())
}

struct Cursor<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Cursor<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8], EncodeError> {
        let end = self
            .pos
            .checked_add(n)
            .filter(|&e| e <= self.buf.len())
            .ok_or_else(|| EncodeError::Corrupt("truncated".into()))?;
        let s = &self.buf[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn array<const N: usize>(&mut self) -> Result<[u8; N], EncodeError> {
        Ok(self.take(N)?.try_into().expect("length checked"))
    }
}

/// Reads a dump written by [`write_matrices`], checking it against `cfg`.
/// Matrices come back tagged by their stored lead.
pub fn read_matrices<R: Read>(
    mut r: R,
    cfg: &EncoderConfig,
) -> Result<Vec<BucketMatrix<LeadExcluded>>, EncodeError> {
    let mut buf = Vec::new();
    r.read_to_end(&mut buf)?;
    let mut c = Cursor { buf: &buf, pos: 0 };
    if c.take(MATRIX_MAGIC.len())? != MATRIX_MAGIC {
        return Err(EncodeError::Corrupt("bad magic".into()));
    }
    let mut dims = [0usize; 3];
    for d in &mut dims {
        *d = u32::from_le_bytes(c.array()?) as usize;
    }
    if dims != [cfg.n_buckets, cfg.n_codes(), cfg.lab_vocab.len()] {
        return Err(EncodeError::Corrupt(format!(
            "dimensions {dims:?} do not match encoder"
        )));
    }
    let fp = cfg.fingerprints();
    for expected in [&fp.codes, &fp.labs] {
        if hex::encode(c.take(32)?) != *expected {
            return Err(EncodeError::Corrupt("vocabulary digest differs".into()));
        }
    }
    let count = u64::from_le_bytes(c.array()?) as usize;
    let cells = cfg.n_buckets * cfg.n_features();
    let mut out = Vec::new();
    for _ in 0..count {
        let n = u32::from_le_bytes(c.array()?) as usize;
        let id = std::str::from_utf8(c.take(n)?)
            .map_err(|_| EncodeError::Corrupt("patient id is not UTF-8".into()))?
            .to_owned();
        let label = Label::from_bool(c.take(1)?[0] != 0);
        let index_day = i64::from_le_bytes(c.array()?);
        let lead_years = f64::from_le_bytes(c.array()?);
        let mut values = Vec::with_capacity(cells);
        for _ in 0..cells {
            values.push(f64::from_le_bytes(c.array()?));
        }
        let m: BucketMatrix<Full> = BucketMatrix {
            values: Tensor::from_rows(cfg.n_buckets, cfg.n_features(), values)
                .expect("sized above"),
            patient_id: PatientId(id),
            label,
            index_day,
            tau_days: cfg.tau_days,
            lead_years,
            out_of_vocab: 0,
            _stage: PhantomData,
        };
        out.push(m.retag());
    }
    if c.pos != buf.len() {
        return Err(EncodeError::Corrupt("trailing bytes".into()));
    }
    Ok(out)
}

/// Sparse CSV debug form: `patient_id,bucket,feature,value` for nonzero cells.
pub fn write_matrices_csv<W: Write, S>(
    w: W,
    cfg: &EncoderConfig,
    matrices: &[BucketMatrix<S>],
) -> Result<(), EncodeError> {
    let mut wr = csv::Writer::from_writer(w);
    wr.write_record(["patient_id", "bucket", "feature", "value"])
        .map_err(csv_err)?;
    for m in matrices {
        let d = m.n_features();
        for (k, v) in m.values.data().iter().enumerate() {
            if *v != 0.0 {
                wr.write_record([
                    m.patient_id.as_str(),
                    &(k / d).to_string(),
                    cfg.feature_name(k % d),
                    &v.to_string(),
                ])
                .map_err(csv_err)?;
            }
        }
    }
    wr.flush()?;
    Ok(())
}

fn csv_err(e: csv::Error) -> EncodeError {
    EncodeError::Io(io::Error::other(e))
}

/// Counts diagnosis events by bucket and code; used to audit encodings.
pub fn diagnosis_totals<S>(m: &BucketMatrix<S>, n_codes: usize) -> BTreeMap<usize, f64> {
    let d = m.n_features();
    let mut out = BTreeMap::new();
    for t in 0..m.n_buckets() {
        let s: f64 = m.values.data()[t * d..t * d + n_codes].iter().sum();
        if s != 0.0 {
            out.insert(t, s);
        }
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::ehr::{EventRecord, PatientRecord, Sex, Site};
    use proptest::prelude::*;

    fn patient(events: Vec<EventRecord>, index_day: i64) -> LabeledPatient {
        LabeledPatient {
            patient: PatientRecord::new("p".into(), Sex::Female, -20000, Site::Mchs, events),
            label: Label::Case,
            index_day,
        }
    }

    fn cfg(t: usize) -> EncoderConfig {
        let mut c = EncoderConfig::new(
            30,
            t,
            vec!["K1".into(), "K2".into()],
            vec!["glu".into(), "hgb".into()],
        )
        .unwrap();
        c.lab_stats[0] = LabStat {
            mean: 100.0,
            sd: 10.0,
        };
        c
    }

    #[test]
    fn empty_history_is_all_zero() {
        let m = encode(&patient(vec![], 1000), &cfg(12)).unwrap();
        assert!(m.values.data().iter().all(|v| *v == 0.0));
        assert_eq!(m.values.shape(), &[12, 4]);
    }

    #[test]
    fn two_recent_codes_land_in_bucket_zero() {
        let id = PatientId::from("p");
        let p = patient(
            vec![
                EventRecord::diagnosis(id.clone(), 995, "K1"),
                EventRecord::diagnosis(id, 980, "K1"),
            ],
            1000,
        );
        let m = encode(&p, &cfg(12)).unwrap();
        assert_eq!(m.values.at(0, 0), 2.0);
        assert_eq!(m.values.data().iter().sum::<f64>(), 2.0);
    }

    #[test]
    fn bucket_edges() {
        let c = cfg(12);
        assert_eq!(c.bucket_of(0), None);
        assert_eq!(c.bucket_of(1), Some(0));
        assert_eq!(c.bucket_of(30), Some(0));
        assert_eq!(c.bucket_of(31), Some(1));
        assert_eq!(c.bucket_of(360), Some(11));
        assert_eq!(c.bucket_of(361), None);
    }

    #[test]
    fn lab_mean_then_standardize() {
        let id = PatientId::from("p");
        let p = patient(
            vec![
                EventRecord::lab(id.clone(), 990, "glu", 90.0),
                EventRecord::lab(id.clone(), 985, "glu", 110.0),
                EventRecord::lab(id, 900, "glu", 120.0),
            ],
            1000,
        );
        let m = encode(&p, &cfg(12)).unwrap();
        assert_eq!(m.values.at(0, 2), 0.0);
        assert_eq!(m.values.at(3, 2), 2.0);
        assert_eq!(m.values.at(3, 3), 0.0);
    }

    #[test]
    fn out_of_vocab_events_are_counted() {
        let id = PatientId::from("p");
        let p = patient(
            vec![
                EventRecord::diagnosis(id.clone(), 990, "Z9"),
                EventRecord::lab(id, 990, "alb", 4.0),
            ],
            1000,
        );
        let m = encode(&p, &cfg(12)).unwrap();
        assert_eq!(m.out_of_vocab, 2);
        assert!(m.values.data().iter().all(|v| *v == 0.0));
    }

    #[test]
    fn empty_vocab_is_an_error() {
        assert!(matches!(
            EncoderConfig::new(30, 10, vec![], vec![]),
            Err(EncodeError::VocabEmpty)
        ));
        assert!(matches!(
            EncoderConfig::new(30, 10, vec!["A".into(), "a".into()], vec![]),
            Err(EncodeError::DuplicateVocab(_))
        ));
    }

    #[test]
    fn one_year_lead_blanks_thirteen_buckets() {
        let c = cfg(240);
        assert_eq!(c.lead_buckets(1.0), 13);
        assert_eq!(c.lead_buckets(0.0), 0);
        let m = BucketMatrix::<Full> {
            values: Tensor::filled(240, 4, 1.0),
            patient_id: "p".into(),
            label: Label::Case,
            index_day: 0,
            tau_days: 30,
            lead_years: 0.0,
            out_of_vocab: 0,
            _stage: PhantomData,
        };
        let ex = m.exclude_lead_time(1.0);
        for t in 0..240 {
            let zero = ex.values.row(t).iter().all(|v| *v == 0.0);
            assert_eq!(zero, t <= 12, "bucket {t}");
        }
        assert_eq!(m.exclude_lead_time(0.0).values, m.values);
    }

    #[test]
    fn recent_history_vanishes_under_long_lead() {
        let id = PatientId::from("p");
        let evs = (0..30)
            .map(|k| EventRecord::diagnosis(id.clone(), 1000 - 1 - k * 30, "K2"))
            .collect();
        let m = encode(&patient(evs, 1000), &cfg(240)).unwrap();
        let ex = m.exclude_lead_time(3.0);
        assert!(ex.values.data().iter().all(|v| *v == 0.0));
    }

    #[test]
    fn window_counts() {
        let id = PatientId::from("p");
        let short = patient(vec![EventRecord::diagnosis(id.clone(), 990, "K1")], 1000);
        assert_eq!(sliding_windows(&short, &cfg(12), 30).unwrap().len(), 1);
        let long = patient(vec![EventRecord::diagnosis(id, 1000 - 720, "K1")], 1000);
        let ws = sliding_windows(&long, &cfg(12), 30).unwrap();
        assert_eq!(ws.len(), 24);
        assert!(ws.windows(2).all(|w| w[0].0 < w[1].0));
        assert_eq!(ws.last().unwrap().0, 1000);
        assert!(sliding_windows(&long, &cfg(12), 0).is_err());
    }

    #[test]
    fn consecutive_windows_shift_by_one_bucket() {
        let id = PatientId::from("p");
        let evs = vec![
            EventRecord::diagnosis(id.clone(), 700, "K1"),
            EventRecord::diagnosis(id.clone(), 760, "K2"),
            EventRecord::lab(id.clone(), 820, "glu", 130.0),
            EventRecord::diagnosis(id, 985, "K1"),
        ];
        let c = cfg(12);
        let ws = sliding_windows(&patient(evs, 1000), &c, 30).unwrap();
        for pair in ws.windows(2) {
            let (older, newer) = (&pair[0].1, &pair[1].1);
            for t in 1..c.n_buckets {
                assert_eq!(newer.values.row(t), older.values.row(t - 1));
            }
        }
    }

    #[test]
    fn dump_round_trips() {
        let id = PatientId::from("p");
        let p = patient(
            vec![
                EventRecord::diagnosis(id.clone(), 700, "K1"),
                EventRecord::lab(id, 820, "glu", 130.0),
            ],
            1000,
        );
        let c = cfg(24);
        let m = encode(&p, &c).unwrap().exclude_lead_time(0.5);
        let mut buf = Vec::new();
        write_matrices(&mut buf, &c, std::slice::from_ref(&m)).unwrap();
        let back = read_matrices(buf.as_slice(), &c).unwrap();
        assert_eq!(back, vec![m]);
        assert!(matches!(
            read_matrices(&buf[..buf.len() - 3], &c),
            Err(EncodeError::Corrupt(_))
        ));
        let mut csv = Vec::new();
        write_matrices_csv(&mut csv, &c, &back).unwrap();
        let text = String::from_utf8(csv).unwrap();
        assert!(text.starts_with("patient_id,bucket,feature,value\n"));
        assert!(text.contains("p,9,K1,1"));
    }

    fn arb_events() -> impl Strategy<Value = Vec<(i64, u8, f64)>> {
        prop::collection::vec((0i64..800, 0u8..5, 50.0f64..150.0), 0..60)
    }

    fn build(raw: &[(i64, u8, f64)]) -> Vec<EventRecord> {
        let id = PatientId::from("p");
        raw.iter()
            .map(|&(day, kind, v)| match kind {
                0 => EventRecord::diagnosis(id.clone(), day, "K1"),
                1 => EventRecord::diagnosis(id.clone(), day, "K2"),
                2 => EventRecord::diagnosis(id.clone(), day, "X9"),
                3 => EventRecord::lab(id.clone(), day, "glu", v),
                _ => EventRecord::lab(id.clone(), day, "hgb", v),
            })
            .collect()
    }

    proptest! {
        #[test]
        fn diagnosis_block_conserves_counts(raw in arb_events()) {
            let c = cfg(12);
            let evs = build(&raw);
            let expected = evs
                .iter()
                .filter(|e| e.kind == EventKind::Diagnosis && e.code != "X9")
                .filter(|e| c.bucket_of(800 - e.day).is_some())
                .count();
            let m = encode(&patient(evs, 800), &c).unwrap();
            let total: f64 = diagnosis_totals(&m, 2).values().sum();
            prop_assert_eq!(total, expected as f64);
        }

        #[test]
        fn same_day_order_does_not_matter(raw in arb_events(), seed in 0u64..1000) {
            use rand::seq::SliceRandom;
            use rand::SeedableRng;
            let c = cfg(12);
            let evs = build(&raw);
            let mut shuffled = evs.clone();
            shuffled.shuffle(&mut rand_chacha::ChaCha8Rng::seed_from_u64(seed));
            let a = encode(&patient(evs, 800), &c).unwrap();
            let b = encode(&patient(shuffled, 800), &c).unwrap();
            for (x, y) in a.values.data().iter().zip(b.values.data()) {
                prop_assert!((x - y).abs() <= 1e-12 * x.abs().max(1.0));
            }
        }

        #[test]
        fn lead_exclusion_composes_as_max(a in 0.0f64..4.0, b in 0.0f64..4.0, raw in arb_events()) {
            let m = encode(&patient(build(&raw), 800), &cfg(48)).unwrap();
            let two = m.exclude_lead_time(a).exclude_lead_time(b);
            let one = m.exclude_lead_time(a.max(b));
            prop_assert_eq!(two.values, one.values);
        }
    }
}

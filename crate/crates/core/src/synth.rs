//! Multi-site synthetic cohorts with a planted pre-diagnostic signal.
//!
//! Every patient gets Poisson-timed visits carrying background diagnosis
//! codes and lab draws around a personal setpoint. For cases, a logistic
//! ramp over the `signal_onset_years` before the index date raises visit
//! frequency, emits codes from the risk group and drifts the flagged labs
//! toward abnormal values. Controls are followed for a year past their index
//! date so that cohort selection recovers the same index.
//!
//! Config keys (TOML):
//!
//! ```toml
//! seed = 7
//! code_vocab_size = 64
//! risk_codes = 4
//! signal_onset_years = 5.0
//! visit_rate_per_year = 4.0
//! min_history_years = 4.0
//! max_history_years = 10.0
//! [[sites]]
//! name = "SiteA"
//! n_cases = 50
//! n_controls = 950
//! visit_rate_scale = 1.0
//! code_shift = 0
//! lab_shift_sd = 0.0
//! [[lab_panel]]
//! name = "glu"
//! mean = 100.0
//! sd = 15.0
//! drift = "up"
//! ```

use crate::ehr::{EventRecord, PatientId, PatientRecord, Sex, Site, DAYS_PER_YEAR};
use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal, Poisson, WeightedIndex};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Error, PartialEq)]
pub enum SynthError {
    #[error("ConfigError: {0}")]
    ConfigError(String),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Drift {
    None,
    Up,
    Down,
}

impl Drift {
    fn sign(self) -> f64 {
        match self {
            Drift::None => 0.0,
            Drift::Up => 1.0,
            Drift::Down => -1.0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LabSpec {
    pub name: String,
    pub mean: f64,
    pub sd: f64,
    pub drift: Drift,
}

impl LabSpec {
    fn new(name: &str, mean: f64, sd: f64, drift: Drift) -> Self {
        LabSpec {
            name: name.into(),
            mean,
            sd,
            drift,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SiteSpec {
    pub name: String,
    pub n_cases: usize,
    pub n_controls: usize,
    /// Multiplier on the background visit rate.
    pub visit_rate_scale: f64,
    /// Rotation of the background code frequencies.
    pub code_shift: usize,
    /// Offset of every lab setpoint, in lab standard deviations.
    pub lab_shift_sd: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SynthConfig {
    pub seed: u64,
    pub sites: Vec<SiteSpec>,
    pub code_vocab_size: usize,
    /// The first `risk_codes` codes form the planted risk group.
    pub risk_codes: usize,
    pub lab_panel: Vec<LabSpec>,
    pub signal_onset_years: f64,
    pub visit_rate_per_year: f64,
    pub min_history_years: f64,
    pub max_history_years: f64,
    /// Peak lab drift for cases, in standard deviations.
    pub drift_sd: f64,
    /// Peak expected risk codes per visit for cases.
    pub risk_code_rate: f64,
    /// Peak relative increase of the visit rate for cases.
    pub visit_boost: f64,
}

impl Default for SynthConfig {
    fn default() -> Self {
        let site = |name: &str, scale: f64, shift: usize, lab: f64| SiteSpec {
            name: name.into(),
            n_cases: 50,
            n_controls: 950,
            visit_rate_scale: scale,
            code_shift: shift,
            lab_shift_sd: lab,
        };
        SynthConfig {
            seed: 7,
            sites: vec![
                site("SiteA", 1.0, 0, 0.0),
                site("SiteB", 1.2, 3, 0.2),
                site("SiteC", 0.85, 7, -0.2),
            ],
            code_vocab_size: 64,
            risk_codes: 4,
            lab_panel: vec![
                LabSpec::new("hgb", 13.5, 1.5, Drift::Down),
                LabSpec::new("glu", 100.0, 15.0, Drift::Up),
                LabSpec::new("plt", 250.0, 50.0, Drift::None),
                LabSpec::new("alb", 4.2, 0.4, Drift::None),
                LabSpec::new("creat", 1.0, 0.25, Drift::None),
                LabSpec::new("alt", 25.0, 10.0, Drift::None),
            ],
            signal_onset_years: 5.0,
            visit_rate_per_year: 4.0,
            min_history_years: 4.0,
            max_history_years: 10.0,
            drift_sd: 1.5,
            risk_code_rate: 1.0,
            visit_boost: 1.0,
        }
    }
}

/// Diagnosis code emitted on each case's index day.
pub const CASE_CODE: &str = "C25";
const FIRST_INDEX_DAY: i64 = 20_000;

pub fn code_name(j: usize) -> String {
    format!("K{j:02}")
}

impl SynthConfig {
    pub fn validate(&self) -> Result<(), SynthError> {
        let err = |m: &str| Err(SynthError::ConfigError(m.into()));
        if self.code_vocab_size == 0 {
            return err("code vocabulary is empty");
        }
        if self.lab_panel.is_empty() {
            return err("lab panel is empty");
        }
        if self.lab_panel.len() < 3 {
            return err("lab panel needs at least 3 labs");
        }
        if self.risk_codes == 0 || self.risk_codes >= self.code_vocab_size {
            return err("risk_codes must lie in 1..code_vocab_size");
        }
        if self.sites.is_empty() {
            return err("no sites");
        }
        for s in &self.sites {
            if s.n_cases == 0 || s.n_controls == 0 {
                return err("case and control counts must be positive");
            }
            if !(s.visit_rate_scale > 0.0) {
                return err("visit_rate_scale must be positive");
            }
        }
        if self.lab_panel.iter().any(|l| !(l.sd > 0.0)) {
            return err("lab sd must be positive");
        }
        if !(self.min_history_years >= 3.0 && self.max_history_years >= self.min_history_years) {
            return err("history bounds must satisfy 3 <= min <= max");
        }
        if !(self.signal_onset_years > 0.0 && self.signal_onset_years <= self.max_history_years) {
            return err("signal_onset_years must be positive and within the history length");
        }
        if !(self.visit_rate_per_year > 0.0) {
            return err("visit_rate_per_year must be positive");
        }
        Ok(())
    }

    pub fn code_vocab(&self) -> Vec<String> {
        (0..self.code_vocab_size).map(code_name).collect()
    }

    pub fn risk_group(&self) -> Vec<String> {
        (0..self.risk_codes).map(code_name).collect()
    }

    pub fn total_patients(&self) -> usize {
        self.sites.iter().map(|s| s.n_cases + s.n_controls).sum()
    }

    /// Planted signal strength `years` before the index date, in `[0, 1]`.
    pub fn ramp(&self, years: f64) -> f64 {
        let centre = self.signal_onset_years / 2.0;
        let width = self.signal_onset_years / 10.0;
        1.0 / (1.0 + ((years - centre) / width).exp())
    }
}

struct Slot<'a> {
    site: &'a SiteSpec,
    is_case: bool,
    ordinal: usize,
    stream: u64,
}

/// Generates every site's patients: cases first, then controls, site by
/// site. Each patient draws from its own random stream, so the output does
/// not depend on the thread count.
pub fn generate(config: &SynthConfig) -> Result<Vec<PatientRecord>, SynthError> {
    config.validate()?;
    let mut slots = Vec::with_capacity(config.total_patients());
    for site in &config.sites {
        for (is_case, n) in [(true, site.n_cases), (false, site.n_controls)] {
            for ordinal in 0..n {
                slots.push(Slot {
                    site,
                    is_case,
                    ordinal,
                    stream: slots.len() as u64,
                });
            }
        }
    }
    Ok(slots
        .par_iter()
        .map(|slot| generate_patient(config, slot))
        .collect())
}

fn background_weights(config: &SynthConfig, shift: usize) -> Vec<f64> {
    let n = config.code_vocab_size;
    let risk = config.risk_codes;
    let mut w = vec![0.0; n];
    for (j, wj) in w.iter_mut().enumerate() {
        if j < risk {
            *wj = 0.05;
        } else {
            let rank = (j - risk + shift) % (n - risk);
            *wj = 1.0 / (rank as f64 + 1.0).powf(0.8);
        }
    }
    w
}

fn generate_patient(config: &SynthConfig, slot: &Slot<'_>) -> PatientRecord {
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    rng.set_stream(slot.stream);
    let tag = if slot.is_case { "case" } else { "ctrl" };
    let id = PatientId(format!("{}-{tag}-{:05}", slot.site.name, slot.ordinal));
    let sex = if rng.gen_bool(0.5) {
        Sex::Female
    } else {
        Sex::Male
    };
    let index_day = FIRST_INDEX_DAY + rng.gen_range(0..3650);
    let age_years = rng.gen_range(45.0..85.0);
    let birth_day = index_day - (age_years * DAYS_PER_YEAR).round() as i64;
    let history_years = rng.gen_range(config.min_history_years..=config.max_history_years);
    let first_day = index_day - (history_years * DAYS_PER_YEAR).round() as i64;
    let last_day = if slot.is_case {
        index_day
    } else {
        index_day + 365
    };

    let std_normal = Normal::new(0.0, 1.0).expect("unit normal");
    let setpoints: Vec<f64> = config
        .lab_panel
        .iter()
        .map(|l| l.mean + l.sd * (slot.site.lab_shift_sd + 0.5 * std_normal.sample(&mut rng)))
        .collect();
    let codes = WeightedIndex::new(background_weights(config, slot.site.code_shift))
        .expect("positive weights");

    let mut events = Vec::new();
    let draw_labs = |rng: &mut ChaCha8Rng, day: i64, all: bool, events: &mut Vec<EventRecord>| {
        let years_before = (index_day - day) as f64 / DAYS_PER_YEAR;
        let signal = if slot.is_case {
            config.ramp(years_before)
        } else {
            0.0
        };
        for (lab, setpoint) in config.lab_panel.iter().zip(&setpoints) {
            if !all && !rng.gen_bool(0.5) {
                continue;
            }
            let noise = 0.5 * lab.sd * std_normal.sample(rng);
            let drift = lab.drift.sign() * config.drift_sd * lab.sd * signal;
            let value = (setpoint + noise + drift).max(0.01 * lab.mean);
            events.push(EventRecord::lab(id.clone(), day, &lab.name, round4(value)));
        }
    };

    // intake visit with the whole panel
    draw_labs(&mut rng, first_day, true, &mut events);
    events.push(EventRecord::diagnosis(
        id.clone(),
        first_day,
        code_name(codes.sample(&mut rng)),
    ));

    let base_rate = config.visit_rate_per_year * slot.site.visit_rate_scale / DAYS_PER_YEAR;
    let peak_rate = base_rate * (1.0 + config.visit_boost);
    let mut day = first_day as f64;
    loop {
        let u: f64 = rng.gen_range(f64::EPSILON..1.0);
        day += -u.ln() / peak_rate;
        let d = day.floor() as i64;
        if d >= last_day {
            break;
        }
        let years_before = (index_day - d) as f64 / DAYS_PER_YEAR;
        let signal = if slot.is_case && d < index_day {
            config.ramp(years_before)
        } else {
            0.0
        };
        let rate = base_rate * (1.0 + config.visit_boost * signal);
        if rng.gen::<f64>() * peak_rate > rate {
            continue;
        }
        let n_background = Poisson::new(1.5).expect("rate").sample(&mut rng) as usize;
        for _ in 0..n_background {
            events.push(EventRecord::diagnosis(
                id.clone(),
                d,
                code_name(codes.sample(&mut rng)),
            ));
        }
        if signal > 1e-9 {
            let n_risk = Poisson::new(config.risk_code_rate * signal)
                .expect("rate")
                .sample(&mut rng) as usize;
            for _ in 0..n_risk {
                let j = rng.gen_range(0..config.risk_codes);
                events.push(EventRecord::diagnosis(id.clone(), d, code_name(j)));
            }
        }
        draw_labs(&mut rng, d, false, &mut events);
    }
    if slot.is_case {
        events.push(EventRecord::diagnosis(id.clone(), index_day, CASE_CODE));
    } else {
        events.push(EventRecord::diagnosis(
            id.clone(),
            last_day,
            code_name(codes.sample(&mut rng)),
        ));
    }
    PatientRecord::new(
        id,
        sex,
        birth_day,
        Site::Named(slot.site.name.clone()),
        events,
    )
}

fn round4(v: f64) -> f64 {
    (v * 1e4).round() / 1e4
}

//! Training, leave-one-site-out evaluation and the one-factor grid sweep.
//!
//! Models only ever see full matrices (`BucketMatrix<Full>`) while training
//! and are only ever scored on lead-excluded ones
//! (`BucketMatrix<LeadExcluded>`). Downsampling touches the training
//! partition alone; validation folds and held-out sites keep their original
//! case mix.

use crate::autodiff::{loss_value, Adam, PlateauScheduler, Tensor, TrainHyper};
use crate::ehr::{Label, LabeledPatient, PatientId};
use crate::encode::{encode, BucketMatrix, EncodeError, EncoderConfig, LeadExcluded};
use crate::metrics::{auroc, t_interval, Interval, MetricsError};
use crate::model::{Aggregation, Dropout, ModelConfig, ModelError, ModelParams};
use crate::seed::{child_seed, indexed_seed};
use rand::seq::{index, SliceRandom};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use std::collections::{BTreeSet, HashMap};
use std::fmt;
use std::io::{Read, Write};
use std::str::FromStr;
use thiserror::Error;

#[derive(Debug, Error)]
pub enum TrainError {
    #[error("InvalidInput: {0}")]
    InvalidInput(String),
    #[error("Diverged: non-finite loss {loss} at epoch {epoch}, batch {batch}")]
    Diverged {
        epoch: usize,
        batch: usize,
        loss: f64,
    },
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Metrics(#[from] MetricsError),
    #[error(transparent)]
    Encode(#[from] EncodeError),
    #[error("Io: {0}")]
    Io(String),
}

/// Case-to-control ratio for the training partition.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Ratio {
    /// At most `n` controls per case.
    OneTo(usize),
    Keep,
}

impl fmt::Display for Ratio {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Ratio::OneTo(n) => write!(f, "1:{n}"),
            Ratio::Keep => f.write_str("none"),
        }
    }
}

impl FromStr for Ratio {
    type Err = String;
    fn from_str(s: &str) -> Result<Self, Self::Err> {
        let s = s.trim();
        if s.eq_ignore_ascii_case("none") {
            return Ok(Ratio::Keep);
        }
        let n = s
            .strip_prefix("1:")
            .and_then(|n| n.parse::<usize>().ok())
            .filter(|n| *n > 0)
            .ok_or_else(|| format!("ratio {s:?} is not 1:N or none"))?;
        Ok(Ratio::OneTo(n))
    }
}

/// Indices kept by downsampling: every case plus a seeded sample of
/// controls, returned in ascending order.
pub fn downsample_indices(is_case: &[bool], ratio: Ratio, seed: u64) -> Vec<usize> {
    let Ratio::OneTo(k) = ratio else {
        return (0..is_case.len()).collect();
    };
    let cases: Vec<usize> = (0..is_case.len()).filter(|&i| is_case[i]).collect();
    let controls: Vec<usize> = (0..is_case.len()).filter(|&i| !is_case[i]).collect();
    let target = cases.len() * k;
    let mut keep = cases;
    if controls.len() <= target {
        keep.extend(controls);
    } else {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        keep.extend(
            index::sample(&mut rng, controls.len(), target)
                .into_iter()
                .map(|j| controls[j]),
        );
    }
    keep.sort_unstable();
    keep
}

pub fn downsample<T: Clone>(
    items: &[T],
    is_case: impl Fn(&T) -> bool,
    ratio: Ratio,
    seed: u64,
) -> Vec<T> {
    let flags: Vec<bool> = items.iter().map(is_case).collect();
    downsample_indices(&flags, ratio, seed)
        .into_iter()
        .map(|i| items[i].clone())
        .collect()
}

/// Stratified fold assignment: cases and controls are shuffled separately
/// and dealt round-robin, continuing the deal across the two groups.
pub fn stratified_folds(is_case: &[bool], n_folds: usize, seed: u64) -> Vec<usize> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut fold = vec![0; is_case.len()];
    let mut next = 0;
    for want in [true, false] {
        let mut group: Vec<usize> = (0..is_case.len()).filter(|&i| is_case[i] == want).collect();
        group.shuffle(&mut rng);
        for i in group {
            fold[i] = next % n_folds;
            next += 1;
        }
    }
    fold
}

/// A patient's full-history matrix and the site it came from.
#[derive(Debug, Clone, PartialEq)]
pub struct EncodedPatient {
    pub site: String,
    pub matrix: BucketMatrix,
}

impl EncodedPatient {
    pub fn is_case(&self) -> bool {
        self.matrix.label.is_case()
    }
}

/// Copy of the cohort with labels permuted across every patient and site,
/// matrices untouched. Running the whole evaluation on it is a null
/// control: any AUROC away from 0.5 points at leakage.
pub fn permute_labels(patients: &[EncodedPatient], seed: u64) -> Vec<EncodedPatient> {
    let mut labels: Vec<Label> = patients.iter().map(|p| p.matrix.label).collect();
    labels.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    patients
        .iter()
        .zip(labels)
        .map(|(p, label)| {
            let mut q = p.clone();
            q.matrix.label = label;
            q
        })
        .collect()
}

pub fn encode_cohort(
    patients: &[LabeledPatient],
    cfg: &EncoderConfig,
) -> Result<Vec<EncodedPatient>, EncodeError> {
    patients
        .par_iter()
        .map(|p| {
            Ok(EncodedPatient {
                site: p.site().name().to_string(),
                matrix: encode(p, cfg)?,
            })
        })
        .collect()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SplitPlan {
    pub held_out_site: String,
    pub dev_sites: Vec<String>,
    /// Patient ids of each development fold.
    pub folds: Vec<Vec<PatientId>>,
    pub seed: u64,
}

impl SplitPlan {
    /// Holds out `held_out_site` and splits the remaining patients into
    /// `n_folds` stratified folds. `anchor_site`, when given, must stay in
    /// development.
    pub fn new(
        patients: &[EncodedPatient],
        held_out_site: &str,
        anchor_site: Option<&str>,
        n_folds: usize,
        seed: u64,
    ) -> Result<Self, TrainError> {
        if n_folds < 2 {
            return Err(TrainError::InvalidInput("need at least 2 folds".into()));
        }
        if anchor_site == Some(held_out_site) {
            return Err(TrainError::InvalidInput(format!(
                "{held_out_site} is the development anchor and cannot be held out"
            )));
        }
        let sites: BTreeSet<&str> = patients.iter().map(|p| p.site.as_str()).collect();
        if !sites.contains(held_out_site) {
            return Err(TrainError::InvalidInput(format!(
                "unknown site {held_out_site:?}"
            )));
        }
        if let Some(a) = anchor_site {
            if !sites.contains(a) {
                return Err(TrainError::InvalidInput(format!(
                    "unknown anchor site {a:?}"
                )));
            }
        }
        let dev: Vec<&EncodedPatient> = patients
            .iter()
            .filter(|p| p.site != held_out_site)
            .collect();
        if dev.len() < n_folds {
            return Err(TrainError::InvalidInput(
                "fewer development patients than folds".into(),
            ));
        }
        let flags: Vec<bool> = dev.iter().map(|p| p.is_case()).collect();
        let assign = stratified_folds(&flags, n_folds, seed);
        let mut folds = vec![Vec::new(); n_folds];
        for (p, f) in dev.iter().zip(assign) {
            folds[f].push(p.matrix.patient_id.clone());
        }
        Ok(SplitPlan {
            held_out_site: held_out_site.to_string(),
            dev_sites: sites
                .into_iter()
                .filter(|s| *s != held_out_site)
                .map(str::to_string)
                .collect(),
            folds,
            seed,
        })
    }

    /// SHA-256 over the held-out site and the fold membership.
    pub fn hash(&self) -> String {
        let mut h = Sha256::new();
        h.update(self.held_out_site.as_bytes());
        for (k, fold) in self.folds.iter().enumerate() {
            h.update(format!("\n#{k}").as_bytes());
            for id in fold {
                h.update(b"\n");
                h.update(id.as_str().as_bytes());
            }
        }
        hex::encode(h.finalize())
    }

    /// Positions in `patients` of each fold's members.
    pub fn fold_indices(&self, patients: &[EncodedPatient]) -> Vec<Vec<usize>> {
        let fold_of: HashMap<&str, usize> = self
            .folds
            .iter()
            .enumerate()
            .flat_map(|(k, f)| f.iter().map(move |id| (id.as_str(), k)))
            .collect();
        let mut out = vec![Vec::new(); self.folds.len()];
        for (i, p) in patients.iter().enumerate() {
            if let Some(&k) = fold_of.get(p.matrix.patient_id.as_str()) {
                out[k].push(i);
            }
        }
        out
    }
}

/// Training and validation examples with their target labels.
pub struct FoldData<'a> {
    pub train: Vec<(&'a BucketMatrix, f64)>,
    pub val: Vec<(&'a BucketMatrix, f64)>,
}

impl<'a> FoldData<'a> {
    pub fn new(train: &[&'a BucketMatrix], val: &[&'a BucketMatrix]) -> Self {
        let with_label = |m: &&'a BucketMatrix| (*m, m.label.as_f64());
        FoldData {
            train: train.iter().map(with_label).collect(),
            val: val.iter().map(with_label).collect(),
        }
    }

    /// Permutes the labels within each partition.
    pub fn shuffle_labels(&mut self, seed: u64) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        for part in [&mut self.train, &mut self.val] {
            let mut ys: Vec<f64> = part.iter().map(|e| e.1).collect();
            ys.shuffle(&mut rng);
            for (e, y) in part.iter_mut().zip(ys) {
                e.1 = y;
            }
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochLog {
    pub epoch: usize,
    pub train_loss: f64,
    pub val_loss: f64,
    pub val_auroc: Option<f64>,
    pub lr: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainLog {
    pub epochs: Vec<EpochLog>,
    pub best_epoch: usize,
    pub best_val_loss: f64,
    pub stopped_early: bool,
}

#[derive(Debug, Clone)]
pub struct TrainedModel {
    pub params: ModelParams,
    pub log: TrainLog,
}

fn mean_loss(
    params: &ModelParams,
    data: &[(&BucketMatrix, f64)],
    kind: crate::autodiff::LossKind,
) -> Result<(f64, Vec<f64>), ModelError> {
    let probs = data
        .par_iter()
        .map(|(m, _)| params.forward(&m.values).map(|o| o.prob))
        .collect::<Result<Vec<f64>, _>>()?;
    let total: f64 = probs
        .iter()
        .zip(data)
        .map(|(p, (_, y))| loss_value(*p, *y, kind))
        .sum();
    Ok((total / data.len().max(1) as f64, probs))
}

fn all_finite(ts: &[Tensor]) -> bool {
    ts.iter().all(|t| t.data().iter().all(|v| v.is_finite()))
}

/// Mini-batch training with Adam, the plateau schedule and early stopping
/// on validation loss. Returns the parameters of the best validation epoch.
/// With an empty validation set the training loss is monitored instead.
///
/// Per-example gradients are computed in parallel and reduced in batch
/// order, so results do not depend on the thread count.
pub fn train_fold(
    data: &FoldData<'_>,
    hyper: &TrainHyper,
    cfg: &ModelConfig,
    seed: u64,
) -> Result<TrainedModel, TrainError> {
    hyper.validate().map_err(TrainError::InvalidInput)?;
    if data.train.is_empty() {
        return Err(TrainError::InvalidInput("empty training set".into()));
    }
    let kind = hyper.loss_kind();
    let mut params = ModelParams::init(cfg.clone(), child_seed(seed, "init"))?;
    let mut adam = Adam::from_hyper(hyper);
    let mut sched = PlateauScheduler::new(hyper.plateau_patience, hyper.plateau_factor);
    let mut rng = ChaCha8Rng::seed_from_u64(child_seed(seed, "order"));
    let mut order: Vec<usize> = (0..data.train.len()).collect();
    let mut best = params.clone();
    let mut log = TrainLog {
        epochs: Vec::new(),
        best_epoch: 0,
        best_val_loss: f64::INFINITY,
        stopped_early: false,
    };
    let mut stale = 0;
    for epoch in 0..hyper.max_epochs {
        order.shuffle(&mut rng);
        let mut epoch_total = 0.0;
        for (b, chunk) in order.chunks(hyper.batch_size).enumerate() {
            let parts = chunk
                .par_iter()
                .map(|&i| {
                    let (m, y) = data.train[i];
                    if hyper.dropout > 0.0 {
                        let mut r = ChaCha8Rng::seed_from_u64(indexed_seed(
                            seed,
                            "dropout",
                            &[epoch as u64, i as u64],
                        ));
                        let mut d = Dropout {
                            rate: hyper.dropout,
                            rng: &mut r,
                        };
                        params.example_grad(&m.values, y, kind, Some(&mut d))
                    } else {
                        params.example_grad(&m.values, y, kind, None)
                    }
                })
                .collect::<Result<Vec<_>, _>>()?;
            let (loss, grads) = params.reduce_grads(&parts);
            if !loss.is_finite() || !all_finite(&grads) {
                return Err(TrainError::Diverged {
                    epoch,
                    batch: b,
                    loss,
                });
            }
            adam.step(&mut params.tensors, &grads);
            epoch_total += loss * chunk.len() as f64;
        }
        let train_loss = epoch_total / data.train.len() as f64;
        let (val_loss, val_auroc) = if data.val.is_empty() {
            (train_loss, None)
        } else {
            let (l, probs) = mean_loss(&params, &data.val, kind)?;
            let scored: Vec<(f64, bool)> = probs
                .iter()
                .zip(&data.val)
                .map(|(p, (_, y))| (*p, *y > 0.5))
                .collect();
            (l, auroc(&scored).ok())
        };
        if !val_loss.is_finite() {
            return Err(TrainError::Diverged {
                epoch,
                batch: usize::MAX,
                loss: val_loss,
            });
        }
        log::debug!("epoch {epoch}: train {train_loss:.5} val {val_loss:.5}");
        log.epochs.push(EpochLog {
            epoch,
            train_loss,
            val_loss,
            val_auroc,
            lr: adam.lr,
        });
        sched.observe(val_loss, &mut adam.lr);
        if val_loss < log.best_val_loss {
            log.best_val_loss = val_loss;
            log.best_epoch = epoch;
            best = params.clone();
            stale = 0;
        } else {
            stale += 1;
            if stale >= hyper.early_stop_patience {
                log.stopped_early = true;
                break;
            }
        }
    }
    Ok(TrainedModel { params: best, log })
}

/// Trains one model on `pool`: one of `n_folds` stratified folds drives
/// early stopping and the rest, downsampled, are the training set.
pub fn train_holdout(
    pool: &[EncodedPatient],
    model: &ModelConfig,
    hyper: &TrainHyper,
    ratio: Ratio,
    n_folds: usize,
    seed: u64,
) -> Result<TrainedModel, TrainError> {
    if n_folds < 2 {
        return Err(TrainError::InvalidInput("need at least 2 folds".into()));
    }
    let flags: Vec<bool> = pool.iter().map(EncodedPatient::is_case).collect();
    let assign = stratified_folds(&flags, n_folds, child_seed(seed, "holdout"));
    let rest: Vec<usize> = (0..pool.len()).filter(|&i| assign[i] != 0).collect();
    let rest_flags: Vec<bool> = rest.iter().map(|&i| flags[i]).collect();
    let kept = downsample_indices(&rest_flags, ratio, child_seed(seed, "downsample"));
    let train: Vec<&BucketMatrix> = kept.iter().map(|&j| &pool[rest[j]].matrix).collect();
    let val: Vec<&BucketMatrix> = (0..pool.len())
        .filter(|&i| assign[i] == 0)
        .map(|i| &pool[i].matrix)
        .collect();
    train_fold(
        &FoldData::new(&train, &val),
        hyper,
        model,
        child_seed(seed, "train"),
    )
}

/// `(logit, probability)` of a lead-excluded matrix.
pub fn score(
    params: &ModelParams,
    m: &BucketMatrix<LeadExcluded>,
) -> Result<(f64, f64), ModelError> {
    let out = params.forward(&m.values)?;
    Ok((out.logit, out.prob))
}

pub fn score_all(
    params: &ModelParams,
    ms: &[BucketMatrix<LeadExcluded>],
) -> Result<Vec<(f64, f64)>, ModelError> {
    ms.par_iter().map(|m| score(params, m)).collect()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScoredPatient {
    pub patient_id: String,
    pub site: String,
    pub fold: usize,
    pub label: bool,
    pub logit: f64,
    pub prob: f64,
}

pub fn scored_pairs(scores: &[ScoredPatient]) -> Vec<(f64, bool)> {
    scores.iter().map(|s| (s.prob, s.label)).collect()
}

/// Writes `patient_id,site,fold,label,logit,prob` with labels as 0/1.
pub fn write_scores_csv<W: Write>(w: W, scores: &[ScoredPatient]) -> Result<(), TrainError> {
    let io = |e: csv::Error| TrainError::Io(e.to_string());
    let mut out = csv::Writer::from_writer(w);
    out.write_record(["patient_id", "site", "fold", "label", "logit", "prob"])
        .map_err(io)?;
    for s in scores {
        out.write_record([
            s.patient_id.clone(),
            s.site.clone(),
            s.fold.to_string(),
            u8::from(s.label).to_string(),
            s.logit.to_string(),
            s.prob.to_string(),
        ])
        .map_err(io)?;
    }
    out.flush().map_err(|e| TrainError::Io(e.to_string()))
}

pub fn read_scores_csv<R: Read>(r: R) -> Result<Vec<ScoredPatient>, TrainError> {
    let mut rd = csv::Reader::from_reader(r);
    let mut out = Vec::new();
    for (line, rec) in rd.records().enumerate() {
        let rec = rec.map_err(|e| TrainError::Io(e.to_string()))?;
        let bad = |what: &str| TrainError::InvalidInput(format!("row {}: bad {what}", line + 2));
        if rec.len() != 6 {
            return Err(bad("column count"));
        }
        let label: Label = rec[3].parse().map_err(|_| bad("label"))?;
        out.push(ScoredPatient {
            patient_id: rec[0].to_string(),
            site: rec[1].to_string(),
            fold: rec[2].parse().map_err(|_| bad("fold"))?,
            label: label.is_case(),
            logit: rec[4].parse().map_err(|_| bad("logit"))?,
            prob: rec[5].parse().map_err(|_| bad("prob"))?,
        });
    }
    Ok(out)
}

/// Scores of one held-out site at one lead time.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalRun {
    pub held_out_site: String,
    pub lead_years: f64,
    /// One list per fold model, each covering every test patient.
    pub models: Vec<Vec<ScoredPatient>>,
    pub model_aurocs: Vec<f64>,
    pub auroc: Interval,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct OverallRow {
    pub lead_years: f64,
    /// Interval over every site-by-fold model AUROC.
    pub pooled: Interval,
    /// Interval over the per-site means.
    pub site_mean: Option<Interval>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FoldLog {
    pub held_out_site: String,
    pub fold: usize,
    pub n_train: usize,
    pub log: TrainLog,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LosoConfig {
    pub model: ModelConfig,
    pub hyper: TrainHyper,
    pub ratio: Ratio,
    pub n_folds: usize,
    /// Site kept in development in every iteration.
    pub anchor_site: Option<String>,
    /// Sites to hold out; empty means every site except the anchor.
    pub held_out: Vec<String>,
    pub lead_years: Vec<f64>,
    pub seed: u64,
    /// Permute training and validation labels (null-signal control).
    pub shuffle_labels: bool,
}

impl LosoConfig {
    pub fn desk(n_buckets: usize, n_features: usize, seed: u64) -> Self {
        LosoConfig {
            model: ModelConfig::desk(n_buckets, n_features),
            hyper: TrainHyper::desk(),
            ratio: Ratio::OneTo(10),
            n_folds: 10,
            anchor_site: None,
            held_out: Vec::new(),
            lead_years: vec![1.0, 2.0, 3.0],
            seed,
            shuffle_labels: false,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LosoReport {
    pub runs: Vec<EvalRun>,
    pub overall: Vec<OverallRow>,
    pub logs: Vec<FoldLog>,
    /// `(held-out site, split hash)`.
    pub splits: Vec<(String, String)>,
}

impl LosoReport {
    pub fn run(&self, site: &str, lead_years: f64) -> Option<&EvalRun> {
        self.runs
            .iter()
            .find(|r| r.held_out_site == site && r.lead_years == lead_years)
    }

    pub fn overall(&self, lead_years: f64) -> Option<&OverallRow> {
        self.overall.iter().find(|r| r.lead_years == lead_years)
    }

    /// AUROC table: one row per lead time, one column per held-out site and
    /// a pooled column, each `mean (lo-hi)`.
    pub fn to_table(&self) -> String {
        let sites: Vec<&str> = {
            let mut seen = Vec::new();
            for r in &self.runs {
                if !seen.contains(&r.held_out_site.as_str()) {
                    seen.push(r.held_out_site.as_str());
                }
            }
            seen
        };
        let cell = |i: &Interval| format!("{:.3} ({:.3}-{:.3})", i.mean, i.lo, i.hi);
        let mut s = format!("{:<6}", "lead");
        for site in &sites {
            s.push_str(&format!(" {site:<22}"));
        }
        s.push_str(" overall\n");
        for row in &self.overall {
            s.push_str(&format!("{:<6}", format!("{}y", row.lead_years)));
            for site in &sites {
                let c = self
                    .run(site, row.lead_years)
                    .map(|r| cell(&r.auroc))
                    .unwrap_or_default();
                s.push_str(&format!(" {c:<22}"));
            }
            s.push_str(&format!(" {}\n", cell(&row.pooled)));
        }
        s
    }

    pub fn all_scores(&self, lead_years: f64) -> Vec<ScoredPatient> {
        self.runs
            .iter()
            .filter(|r| r.lead_years == lead_years)
            .flat_map(|r| r.models.iter().flatten().cloned())
            .collect()
    }
}

/// Leave-one-site-out evaluation with `n_folds` development folds per
/// iteration. Each fold model trains on the other folds (downsampled) with
/// early stopping on its own fold, then scores every held-out patient on
/// lead-excluded matrices at each requested lead time.
pub fn evaluate_loso(
    patients: &[EncodedPatient],
    cfg: &LosoConfig,
) -> Result<LosoReport, TrainError> {
    let sites: BTreeSet<&str> = patients.iter().map(|p| p.site.as_str()).collect();
    if sites.len() < 2 {
        return Err(TrainError::InvalidInput(
            "leave-one-site-out needs at least 2 sites".into(),
        ));
    }
    if cfg.lead_years.is_empty() {
        return Err(TrainError::InvalidInput("no lead times requested".into()));
    }
    let held_out: Vec<String> = if cfg.held_out.is_empty() {
        sites
            .iter()
            .filter(|s| Some(**s) != cfg.anchor_site.as_deref())
            .map(|s| s.to_string())
            .collect()
    } else {
        cfg.held_out.clone()
    };
    let mut report = LosoReport {
        runs: Vec::new(),
        overall: Vec::new(),
        logs: Vec::new(),
        splits: Vec::new(),
    };
    for (s_idx, site) in held_out.iter().enumerate() {
        let plan = SplitPlan::new(
            patients,
            site,
            cfg.anchor_site.as_deref(),
            cfg.n_folds,
            indexed_seed(cfg.seed, "split", &[s_idx as u64]),
        )?;
        report.splits.push((site.clone(), plan.hash()));
        let folds = plan.fold_indices(patients);
        let test: Vec<&EncodedPatient> = patients.iter().filter(|p| &p.site == site).collect();
        let test_sets: Vec<Vec<BucketMatrix<LeadExcluded>>> = cfg
            .lead_years
            .iter()
            .map(|&lead| {
                test.iter()
                    .map(|p| p.matrix.exclude_lead_time(lead))
                    .collect()
            })
            .collect();
        let fold_results = (0..cfg.n_folds)
            .into_par_iter()
            .map(|k| {
                let tag = [s_idx as u64, k as u64];
                let pool: Vec<usize> = folds
                    .iter()
                    .enumerate()
                    .filter(|(j, _)| *j != k)
                    .flat_map(|(_, f)| f.iter().copied())
                    .collect();
                let flags: Vec<bool> = pool.iter().map(|&i| patients[i].is_case()).collect();
                let kept = downsample_indices(
                    &flags,
                    cfg.ratio,
                    indexed_seed(cfg.seed, "downsample", &tag),
                );
                let train: Vec<&BucketMatrix> =
                    kept.iter().map(|&j| &patients[pool[j]].matrix).collect();
                let val: Vec<&BucketMatrix> =
                    folds[k].iter().map(|&i| &patients[i].matrix).collect();
                let mut data = FoldData::new(&train, &val);
                if cfg.shuffle_labels {
                    data.shuffle_labels(indexed_seed(cfg.seed, "shuffle", &tag));
                }
                let model = train_fold(
                    &data,
                    &cfg.hyper,
                    &cfg.model,
                    indexed_seed(cfg.seed, "fold", &tag),
                )?;
                let per_lead = test_sets
                    .iter()
                    .map(|ms| {
                        let scores = score_all(&model.params, ms)?;
                        Ok(test
                            .iter()
                            .zip(scores)
                            .map(|(p, (logit, prob))| ScoredPatient {
                                patient_id: p.matrix.patient_id.as_str().to_string(),
                                site: p.site.clone(),
                                fold: k,
                                label: p.is_case(),
                                logit,
                                prob,
                            })
                            .collect::<Vec<_>>())
                    })
                    .collect::<Result<Vec<_>, TrainError>>()?;
                Ok((train.len(), model.log, per_lead))
            })
            .collect::<Result<Vec<_>, TrainError>>()?;
        let mut per_lead_models: Vec<Vec<Vec<ScoredPatient>>> =
            vec![Vec::new(); cfg.lead_years.len()];
        for (k, (n_train, log, per_lead)) in fold_results.into_iter().enumerate() {
            report.logs.push(FoldLog {
                held_out_site: site.clone(),
                fold: k,
                n_train,
                log,
            });
            for (slot, scores) in per_lead_models.iter_mut().zip(per_lead) {
                slot.push(scores);
            }
        }
        for (&lead, models) in cfg.lead_years.iter().zip(per_lead_models) {
            let model_aurocs = models
                .iter()
                .map(|m| auroc(&scored_pairs(m)))
                .collect::<Result<Vec<_>, _>>()?;
            report.runs.push(EvalRun {
                held_out_site: site.clone(),
                lead_years: lead,
                auroc: t_interval(&model_aurocs)?,
                models,
                model_aurocs,
            });
        }
    }
    for &lead in &cfg.lead_years {
        let runs: Vec<&EvalRun> = report
            .runs
            .iter()
            .filter(|r| r.lead_years == lead)
            .collect();
        let pooled: Vec<f64> = runs
            .iter()
            .flat_map(|r| r.model_aurocs.iter().copied())
            .collect();
        let means: Vec<f64> = runs.iter().map(|r| r.auroc.mean).collect();
        report.overall.push(OverallRow {
            lead_years: lead,
            pooled: t_interval(&pooled)?,
            site_mean: (means.len() >= 2).then(|| t_interval(&means)).transpose()?,
        });
    }
    Ok(report)
}

/// Settings shared by every point of a grid sweep.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GridBase {
    pub tau_days: i64,
    /// History covered by the matrix; the bucket count is
    /// `ceil(horizon_days / tau_days)`.
    pub horizon_days: i64,
    pub d_model: usize,
    pub n_layers: usize,
    pub n_heads: usize,
    pub aggregation: Aggregation,
    pub hyper: TrainHyper,
    pub ratio: Ratio,
    /// Lead time at which validation folds are scored.
    pub lead_years: f64,
}

impl GridBase {
    pub fn desk() -> Self {
        GridBase {
            tau_days: 30,
            horizon_days: 1440,
            d_model: 16,
            n_layers: 1,
            n_heads: 2,
            aggregation: Aggregation::Additive(2),
            hyper: TrainHyper::desk(),
            ratio: Ratio::OneTo(10),
            lead_years: 1.0,
        }
    }
}

/// Values tried for each factor. Empty lists leave a factor at its base.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct GridSpace {
    pub tau_days: Vec<i64>,
    pub n_layers: Vec<usize>,
    pub n_heads: Vec<usize>,
    pub d_model: Vec<usize>,
    pub aggregation: Vec<Aggregation>,
    pub ratio: Vec<Ratio>,
    pub lr: Vec<f64>,
    pub batch_size: Vec<usize>,
    pub bce: Vec<bool>,
}

impl Default for GridSpace {
    /// The published search space with model widths shrunk to desk scale.
    fn default() -> Self {
        GridSpace {
            tau_days: vec![7, 30, 90],
            n_layers: vec![1, 2, 4, 8],
            n_heads: vec![1, 2, 4, 8],
            d_model: vec![8, 16, 32],
            aggregation: vec![
                Aggregation::Additive(1),
                Aggregation::Additive(2),
                Aggregation::Additive(3),
                Aggregation::Additive(4),
                Aggregation::Cls,
            ],
            ratio: vec![
                Ratio::OneTo(1),
                Ratio::OneTo(5),
                Ratio::OneTo(10),
                Ratio::OneTo(20),
                Ratio::Keep,
            ],
            lr: vec![2e-4, 2e-3, 2e-2],
            batch_size: vec![32, 64, 128],
            bce: vec![false, true],
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GridPoint {
    pub factor: String,
    pub value: String,
    pub base: GridBase,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GridResult {
    pub factor: String,
    pub value: String,
    pub is_base: bool,
    pub fold_aurocs: Vec<f64>,
    pub auroc: Interval,
}

/// The base point followed by every single-factor deviation from it.
pub fn grid_points(base: &GridBase, space: &GridSpace) -> Vec<GridPoint> {
    let mut pts = vec![GridPoint {
        factor: "base".into(),
        value: "-".into(),
        base: base.clone(),
    }];
    let mut push = |factor: &str, value: String, point: GridBase| {
        if point != *base {
            pts.push(GridPoint {
                factor: factor.into(),
                value,
                base: point,
            });
        }
    };
    for &v in &space.tau_days {
        push(
            "tau_days",
            v.to_string(),
            GridBase {
                tau_days: v,
                ..base.clone()
            },
        );
    }
    for &v in &space.n_layers {
        push(
            "n_layers",
            v.to_string(),
            GridBase {
                n_layers: v,
                ..base.clone()
            },
        );
    }
    for &v in &space.n_heads {
        push(
            "n_heads",
            v.to_string(),
            GridBase {
                n_heads: v,
                ..base.clone()
            },
        );
    }
    for &v in &space.d_model {
        push(
            "d_model",
            v.to_string(),
            GridBase {
                d_model: v,
                ..base.clone()
            },
        );
    }
    for &v in &space.aggregation {
        push(
            "aggregation",
            v.label(),
            GridBase {
                aggregation: v,
                ..base.clone()
            },
        );
    }
    for &v in &space.ratio {
        push(
            "ratio",
            v.to_string(),
            GridBase {
                ratio: v,
                ..base.clone()
            },
        );
    }
    for &v in &space.lr {
        let hyper = TrainHyper {
            lr0: v,
            ..base.hyper.clone()
        };
        push(
            "lr",
            v.to_string(),
            GridBase {
                hyper,
                ..base.clone()
            },
        );
    }
    for &v in &space.batch_size {
        let hyper = TrainHyper {
            batch_size: v,
            ..base.hyper.clone()
        };
        push(
            "batch_size",
            v.to_string(),
            GridBase {
                hyper,
                ..base.clone()
            },
        );
    }
    for &v in &space.bce {
        let hyper = TrainHyper {
            bce: v,
            ..base.hyper.clone()
        };
        let name = if v { "bce" } else { "focal" };
        push(
            "loss",
            name.into(),
            GridBase {
                hyper,
                ..base.clone()
            },
        );
    }
    pts
}

/// One-factor-at-a-time sweep around `base`, each point scored by the mean
/// validation-fold AUROC of `n_folds`-fold cross-validation on `dev`.
/// Points whose head count does not divide the width are skipped. Results
/// are ranked best first.
pub fn grid_search(
    dev: &[LabeledPatient],
    base: &GridBase,
    space: &GridSpace,
    n_folds: usize,
    seed: u64,
) -> Result<Vec<GridResult>, TrainError> {
    let mut results = Vec::new();
    let flags: Vec<bool> = dev.iter().map(|p| p.label.is_case()).collect();
    let assign = stratified_folds(&flags, n_folds, child_seed(seed, "grid-folds"));
    for pt in grid_points(base, space) {
        let b = &pt.base;
        if b.tau_days <= 0 || b.horizon_days <= 0 {
            return Err(TrainError::InvalidInput(
                "bucket width and horizon must be positive".into(),
            ));
        }
        let n_buckets = ((b.horizon_days + b.tau_days - 1) / b.tau_days) as usize;
        let enc = EncoderConfig::fit(dev, b.tau_days, n_buckets)?;
        let model = ModelConfig {
            n_buckets,
            n_features: enc.n_features(),
            d_model: b.d_model,
            n_layers: b.n_layers,
            n_heads: b.n_heads,
            aggregation: b.aggregation,
        };
        if let Err(e) = model.validate() {
            log::warn!("skipping {}={}: {e}", pt.factor, pt.value);
            continue;
        }
        let encoded = encode_cohort(dev, &enc)?;
        let fold_aurocs = (0..n_folds)
            .map(|k| {
                let pool: Vec<usize> = (0..dev.len()).filter(|&i| assign[i] != k).collect();
                let pool_flags: Vec<bool> = pool.iter().map(|&i| flags[i]).collect();
                let kept = downsample_indices(
                    &pool_flags,
                    b.ratio,
                    indexed_seed(seed, "grid-downsample", &[k as u64]),
                );
                let train: Vec<&BucketMatrix> =
                    kept.iter().map(|&j| &encoded[pool[j]].matrix).collect();
                let val_idx: Vec<usize> = (0..dev.len()).filter(|&i| assign[i] == k).collect();
                let val: Vec<&BucketMatrix> = val_idx.iter().map(|&i| &encoded[i].matrix).collect();
                let m = train_fold(
                    &FoldData::new(&train, &val),
                    &b.hyper,
                    &model,
                    indexed_seed(seed, "grid-fold", &[k as u64]),
                )?;
                let test: Vec<BucketMatrix<LeadExcluded>> = val
                    .iter()
                    .map(|m| m.exclude_lead_time(b.lead_years))
                    .collect();
                let scored: Vec<(f64, bool)> = score_all(&m.params, &test)?
                    .into_iter()
                    .zip(&val_idx)
                    .map(|((_, p), &i)| (p, flags[i]))
                    .collect();
                Ok(auroc(&scored)?)
            })
            .collect::<Result<Vec<f64>, TrainError>>()?;
        results.push(GridResult {
            is_base: pt.factor == "base",
            factor: pt.factor,
            value: pt.value,
            auroc: t_interval(&fold_aurocs)?,
            fold_aurocs,
        });
    }
    results.sort_by(|a, b| b.auroc.mean.total_cmp(&a.auroc.mean));
    Ok(results)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::autodiff::Tensor;
    use crate::encode::Full;
    use proptest::prelude::*;

    fn flags(cases: usize, controls: usize) -> Vec<bool> {
        (0..cases + controls).map(|i| i < cases).collect()
    }

    #[test]
    fn downsample_to_ratio() {
        let f = flags(10, 500);
        let kept = downsample_indices(&f, Ratio::OneTo(10), 1);
        assert_eq!(kept.len(), 110);
        assert_eq!(kept.iter().filter(|&&i| f[i]).count(), 10);
        assert_eq!(downsample_indices(&f, Ratio::Keep, 1).len(), 510);
        let other = downsample_indices(&f, Ratio::OneTo(10), 2);
        assert_eq!(&kept[..10], &other[..10]);
        assert_ne!(kept, other);
        assert_eq!(kept, downsample_indices(&f, Ratio::OneTo(10), 1));
        assert_eq!(
            downsample_indices(&flags(10, 50), Ratio::OneTo(10), 1).len(),
            60
        );
    }

    #[test]
    fn permuted_labels_keep_counts_and_matrices() {
        let ps: Vec<EncodedPatient> = (0..40)
            .map(|i| EncodedPatient {
                site: format!("S{}", i % 3),
                matrix: BucketMatrix::from_parts(
                    Tensor::filled(2, 2, i as f64),
                    PatientId::from(i.to_string().as_str()),
                    if i % 4 == 0 {
                        Label::Case
                    } else {
                        Label::Control
                    },
                    100,
                    30,
                ),
            })
            .collect();
        let q = permute_labels(&ps, 5);
        assert_eq!(q, permute_labels(&ps, 5));
        let cases = |v: &[EncodedPatient]| v.iter().filter(|p| p.is_case()).count();
        assert_eq!(cases(&q), cases(&ps));
        assert!(ps.iter().zip(&q).any(|(a, b)| a.is_case() != b.is_case()));
        for (a, b) in ps.iter().zip(&q) {
            assert_eq!((&a.site, &a.matrix.values), (&b.site, &b.matrix.values));
        }
    }

    #[test]
    fn ratio_parsing() {
        assert_eq!("1:10".parse::<Ratio>().unwrap(), Ratio::OneTo(10));
        assert_eq!("None".parse::<Ratio>().unwrap(), Ratio::Keep);
        assert!("2:10".parse::<Ratio>().is_err());
        assert!("1:0".parse::<Ratio>().is_err());
        assert_eq!(Ratio::OneTo(5).to_string(), "1:5");
    }

    fn toy_patient(id: &str, site: &str, case: bool, level: f64) -> EncodedPatient {
        let mut values = Tensor::zeros(4, 3);
        values.data_mut()[0] = level;
        values.data_mut()[4] = if case { 1.0 } else { 0.0 };
        EncodedPatient {
            site: site.into(),
            matrix: BucketMatrix::<Full>::from_parts(
                values,
                PatientId::from(id),
                Label::from_bool(case),
                0,
                30,
            ),
        }
    }

    fn toy_cohort(per_site: usize) -> Vec<EncodedPatient> {
        let mut out = Vec::new();
        for site in ["SiteA", "SiteB", "SiteC"] {
            for i in 0..per_site {
                let case = i % 5 == 0;
                out.push(toy_patient(
                    &format!("{site}-{i}"),
                    site,
                    case,
                    i as f64 / 10.0,
                ));
            }
        }
        out
    }

    #[test]
    fn split_plan_partitions_development_data() {
        let ps = toy_cohort(40);
        let plan = SplitPlan::new(&ps, "SiteC", Some("SiteA"), 10, 3).unwrap();
        assert_eq!(plan.dev_sites, vec!["SiteA".to_string(), "SiteB".into()]);
        let mut all: Vec<&str> = plan.folds.iter().flatten().map(|i| i.as_str()).collect();
        assert_eq!(all.len(), 80);
        all.sort();
        all.dedup();
        assert_eq!(all.len(), 80);
        assert!(all.iter().all(|id| !id.starts_with("SiteC")));
        let case_counts: Vec<usize> = plan
            .fold_indices(&ps)
            .iter()
            .map(|f| f.iter().filter(|&&i| ps[i].is_case()).count())
            .collect();
        assert_eq!(case_counts.iter().sum::<usize>(), 16);
        assert!(case_counts.iter().all(|&c| c == 1 || c == 2));
        assert!(SplitPlan::new(&ps, "SiteA", Some("SiteA"), 10, 3).is_err());
        assert!(SplitPlan::new(&ps, "Nowhere", None, 10, 3).is_err());
        assert_eq!(
            plan.hash(),
            SplitPlan::new(&ps, "SiteC", Some("SiteA"), 10, 3)
                .unwrap()
                .hash()
        );
        assert_ne!(
            plan.hash(),
            SplitPlan::new(&ps, "SiteC", Some("SiteA"), 10, 4)
                .unwrap()
                .hash()
        );
    }

    fn tiny_model() -> ModelConfig {
        ModelConfig {
            n_buckets: 4,
            n_features: 3,
            d_model: 4,
            n_layers: 1,
            n_heads: 1,
            aggregation: Aggregation::Additive(1),
        }
    }

    fn tiny_hyper() -> TrainHyper {
        TrainHyper {
            lr0: 1e-2,
            max_epochs: 6,
            batch_size: 8,
            dropout: 0.0,
            ..TrainHyper::desk()
        }
    }

    #[test]
    fn training_is_deterministic_and_learns() {
        let ps = toy_cohort(40);
        let ms: Vec<&BucketMatrix> = ps.iter().map(|p| &p.matrix).collect();
        let data = FoldData::new(&ms[..80], &ms[80..]);
        let a = train_fold(&data, &tiny_hyper(), &tiny_model(), 5).unwrap();
        let b = train_fold(&data, &tiny_hyper(), &tiny_model(), 5).unwrap();
        assert_eq!(a.log, b.log);
        assert_eq!(a.params, b.params);
        let first = a.log.epochs[0].val_loss;
        assert!(a.log.best_val_loss <= first);
        assert!(a.log.epochs.last().unwrap().val_auroc.unwrap() > 0.9);
    }

    #[test]
    fn divergence_is_reported() {
        let ps = toy_cohort(10);
        let mut bad = ps[0].matrix.clone();
        bad.values.data_mut()[0] = f64::NAN;
        let data = FoldData::new(&[&bad], &[]);
        assert!(matches!(
            train_fold(&data, &tiny_hyper(), &tiny_model(), 1),
            Err(TrainError::Diverged { .. })
        ));
    }

    #[test]
    fn loso_audit_and_layout() {
        let ps = toy_cohort(30);
        let cfg = LosoConfig {
            model: tiny_model(),
            hyper: TrainHyper {
                max_epochs: 2,
                ..tiny_hyper()
            },
            ratio: Ratio::OneTo(2),
            n_folds: 3,
            anchor_site: Some("SiteA".into()),
            held_out: Vec::new(),
            lead_years: vec![0.0],
            seed: 9,
            shuffle_labels: false,
        };
        let r = evaluate_loso(&ps, &cfg).unwrap();
        assert_eq!(r.runs.len(), 2);
        for run in &r.runs {
            assert_eq!(run.models.len(), 3);
            for m in &run.models {
                assert_eq!(m.len(), 30);
                assert!(m.iter().all(|s| s.site == run.held_out_site));
                assert!(m.iter().all(|s| s.prob > 0.0 && s.prob < 1.0));
            }
        }
        assert_eq!(r.overall[0].pooled.n, 6);
        assert!(r.to_table().contains("SiteB"));
        let one = toy_cohort(5)
            .into_iter()
            .filter(|p| p.site == "SiteA")
            .collect::<Vec<_>>();
        assert!(evaluate_loso(&one, &cfg).is_err());
    }

    #[test]
    fn scores_csv_round_trip() {
        let s = vec![ScoredPatient {
            patient_id: "p1".into(),
            site: "SiteB".into(),
            fold: 3,
            label: true,
            logit: -1.25,
            prob: 0.2227001388253309,
        }];
        let mut buf = Vec::new();
        write_scores_csv(&mut buf, &s).unwrap();
        assert!(std::str::from_utf8(&buf)
            .unwrap()
            .starts_with("patient_id,site,fold,label,logit,prob\np1,SiteB,3,1,"));
        assert_eq!(read_scores_csv(&buf[..]).unwrap(), s);
    }

    #[test]
    fn grid_covers_every_factor() {
        let pts = grid_points(&GridBase::desk(), &GridSpace::default());
        assert_eq!(pts[0].factor, "base");
        assert!(pts
            .iter()
            .any(|p| p.factor == "aggregation" && p.value == "[CLS]"));
        assert!(pts.iter().any(|p| p.factor == "loss" && p.value == "bce"));
        assert!(!pts.iter().any(|p| p.factor == "loss" && p.value == "focal"));
        assert!(!pts
            .iter()
            .any(|p| p.factor == "tau_days" && p.value == "30"));
    }

    proptest! {
        #[test]
        fn folds_are_balanced(cases in 0usize..40, controls in 0usize..200, k in 2usize..11, seed: u64) {
            let f = flags(cases, controls);
            let assign = stratified_folds(&f, k, seed);
            let mut sizes = vec![0usize; k];
            let mut case_sizes = vec![0usize; k];
            for (i, &a) in assign.iter().enumerate() {
                sizes[a] += 1;
                case_sizes[a] += usize::from(f[i]);
            }
            prop_assert!(sizes.iter().max().unwrap() - sizes.iter().min().unwrap() <= 1);
            prop_assert!(case_sizes.iter().max().unwrap() - case_sizes.iter().min().unwrap() <= 1);
        }
    }
}

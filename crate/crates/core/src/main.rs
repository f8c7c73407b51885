use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand, ValueEnum};
use premod::autodiff::TrainHyper;
use premod::ehr::{
    label_patients, match_controls, read_labels, read_patients, select_cases, select_controls,
    write_demographics, write_events, write_labels, CohortSpec, LabeledPatient, PatientRecord,
};
use premod::encode::{write_matrices, write_matrices_csv, EncoderConfig};
use premod::manifest::RunManifest;
use premod::metrics::{auroc, threshold_table, ThresholdCriterion};
use premod::model::{load_checkpoint, save_checkpoint, Aggregation, Checkpoint, ModelConfig};
use premod::recal::{prevalence_to_odds, recalibrate_logit, RecalSpec};
use premod::screen::Scenario;
use premod::seed::child_seed;
use premod::shapley::{aggregate_feature, aggregate_time, feature_report, AttributionTensor};
use premod::synth::{generate, SynthConfig};
use premod::train::{
    encode_cohort, evaluate_loso, read_scores_csv, scored_pairs, train_holdout, write_scores_csv,
    EncodedPatient, LosoConfig, Ratio, ScoredPatient,
};
use premod::trajectory::{cohort_curves, cohort_trajectories, write_curves_csv, Band};
use std::fs::{self, File};
use std::io::{BufReader, BufWriter, Write};
use std::path::{Path, PathBuf};
use std::process::ExitCode;

const EVENTS: &str = "events.tsv";
const DEMOGRAPHICS: &str = "demographics.tsv";
const LABELS: &str = "labels.tsv";

/// Pancreatic cancer risk modelling on longitudinal health records.
#[derive(Parser)]
#[command(name = "premod", version, about)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a synthetic multi-site cohort.
    Synth(SynthArgs),
    /// Select cases and controls and write their labels.
    Cohort(CohortArgs),
    /// Encode labeled patients into bucket matrices.
    Encode(EncodeArgs),
    /// Train one model and write a checkpoint.
    Train(TrainArgs),
    /// Leave-one-site-out evaluation at one or more lead times.
    Eval(EvalArgs),
    /// Operating points of a scores file.
    Thresholds(ThresholdArgs),
    /// Shift the scores of a scores file to another prior.
    Recal(RecalArgs),
    /// Risk-over-time curves for cases and controls.
    Trajectory(TrajectoryArgs),
    /// Shapley attributions for selected patients.
    Explain(ExplainArgs),
    /// Run a screening cascade scenario.
    Screen(ScreenArgs),
}

#[derive(Args)]
struct DataArgs {
    /// Directory holding events.tsv, demographics.tsv and labels.tsv.
    #[arg(long)]
    data: PathBuf,
    /// Cohort rules (TOML) used to window each history.
    #[arg(long)]
    cohort_config: Option<PathBuf>,
}

#[derive(Args)]
struct SynthArgs {
    /// Generator settings (TOML).
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long, default_value_t = 42)]
    seed: u64,
    /// Cases per site, overriding the config.
    #[arg(long)]
    cases_per_site: Option<usize>,
    /// Controls per site, overriding the config.
    #[arg(long)]
    controls_per_site: Option<usize>,
    /// Output directory.
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct CohortArgs {
    /// Directory holding events.tsv and demographics.tsv.
    #[arg(long)]
    data: PathBuf,
    /// Cohort rules (TOML).
    #[arg(long)]
    config: Option<PathBuf>,
    /// Keep only sex- and age-matched controls, this many per case.
    #[arg(long)]
    match_ratio: Option<usize>,
    #[arg(long, default_value_t = 42)]
    seed: u64,
    /// Labels file; defaults to labels.tsv inside the data directory.
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args)]
struct EncodingArgs {
    /// Bucket width in days.
    #[arg(long, default_value_t = 30)]
    tau_days: i64,
    /// Buckets per matrix.
    #[arg(long, default_value_t = 48)]
    buckets: usize,
    /// Fit vocabularies and lab statistics on this site only.
    #[arg(long)]
    fit_site: Option<String>,
}

#[derive(Args)]
struct EncodeArgs {
    #[command(flatten)]
    data: DataArgs,
    #[command(flatten)]
    encoding: EncodingArgs,
    /// Existing encoder (JSON) to reuse instead of fitting one.
    #[arg(long)]
    encoder: Option<PathBuf>,
    /// Blank this many years before each index day.
    #[arg(long)]
    lead_years: Option<f64>,
    /// Also write the nonzero cells as CSV.
    #[arg(long)]
    csv: bool,
    /// Output directory.
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct ModelArgs {
    /// Training settings (TOML); flags below override it.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    d_model: Option<usize>,
    #[arg(long)]
    layers: Option<usize>,
    #[arg(long)]
    heads: Option<usize>,
    /// Aggregation head count, or `cls`.
    #[arg(long)]
    aggregation: Option<Aggregation>,
    /// Case-to-control ratio for training, `1:N` or `none`.
    #[arg(long, default_value = "1:10")]
    ratio: Ratio,
    #[arg(long)]
    epochs: Option<usize>,
    #[arg(long)]
    lr: Option<f64>,
    #[arg(long)]
    batch_size: Option<usize>,
    /// Plain cross-entropy instead of focal loss.
    #[arg(long)]
    bce: bool,
}

impl ModelArgs {
    fn hyper(&self) -> Result<TrainHyper> {
        let mut h = match &self.config {
            Some(p) => toml::from_str(&read_text(p)?)
                .with_context(|| format!("InvalidConfig: {}", p.display()))?,
            None => TrainHyper::desk(),
        };
        if let Some(v) = self.epochs {
            h.max_epochs = v;
        }
        if let Some(v) = self.lr {
            h.lr0 = v;
        }
        if let Some(v) = self.batch_size {
            h.batch_size = v;
        }
        if self.bce {
            h.bce = true;
        }
        h.validate()
            .map_err(|e| anyhow::anyhow!("InvalidConfig: {e}"))?;
        Ok(h)
    }

    fn model(&self, n_buckets: usize, n_features: usize) -> ModelConfig {
        let mut m = ModelConfig::desk(n_buckets, n_features);
        if let Some(v) = self.d_model {
            m.d_model = v;
        }
        if let Some(v) = self.layers {
            m.n_layers = v;
        }
        if let Some(v) = self.heads {
            m.n_heads = v;
        }
        if let Some(v) = self.aggregation {
            m.aggregation = v;
        }
        m
    }
}

#[derive(Args)]
struct TrainArgs {
    #[command(flatten)]
    data: DataArgs,
    #[command(flatten)]
    encoding: EncodingArgs,
    #[command(flatten)]
    model: ModelArgs,
    /// Leave this site out of training.
    #[arg(long)]
    site_holdout: Option<String>,
    #[arg(long, default_value_t = 42)]
    seed: u64,
    /// Checkpoint path.
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct EvalArgs {
    #[command(flatten)]
    data: DataArgs,
    #[command(flatten)]
    encoding: EncodingArgs,
    #[command(flatten)]
    model: ModelArgs,
    /// Lead times in years, comma separated.
    #[arg(long, value_delimiter = ',', default_value = "1,2,3")]
    lead_years: Vec<f64>,
    /// Site to hold out; repeat for several. Defaults to every site but the anchor.
    #[arg(long)]
    site_holdout: Vec<String>,
    /// Site kept in development in every iteration.
    #[arg(long)]
    anchor_site: Option<String>,
    #[arg(long, default_value_t = 10)]
    folds: usize,
    /// Permute training labels (null-signal control).
    #[arg(long)]
    shuffle_labels: bool,
    #[arg(long, default_value_t = 42)]
    seed: u64,
    /// Output directory.
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct ThresholdArgs {
    /// Scores CSV.
    #[arg(long)]
    scores: PathBuf,
    /// Prevalence used as the prior-prevalence threshold; defaults to the
    /// case fraction of the scores file.
    #[arg(long)]
    prior: Option<f64>,
    /// Output CSV.
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args)]
#[group(id = "source", required = true, multiple = false)]
struct SourcePrior {
    /// Source prior odds.
    #[arg(long, group = "source")]
    pi_src: Option<f64>,
    /// Source prior from a `1:N` training ratio.
    #[arg(long, group = "source")]
    src_ratio: Option<Ratio>,
}

#[derive(Args)]
#[group(id = "target", required = true, multiple = false)]
struct TargetPrior {
    /// Target prior odds.
    #[arg(long, group = "target")]
    pi_tar: Option<f64>,
    /// Target prevalence, converted to odds.
    #[arg(long, group = "target")]
    target_prevalence: Option<f64>,
}

fn recal_spec(src: &SourcePrior, tar: &TargetPrior) -> Result<RecalSpec> {
    let pi_tar = match (tar.pi_tar, tar.target_prevalence) {
        (Some(o), _) => o,
        (None, Some(p)) => prevalence_to_odds(p)?,
        _ => bail!("a target prior is required"),
    };
    Ok(match (src.pi_src, src.src_ratio) {
        (Some(o), _) => RecalSpec::new(o, pi_tar)?,
        (None, Some(Ratio::OneTo(n))) => RecalSpec::from_ratio(n as f64, pi_tar)?,
        (None, Some(Ratio::Keep)) => bail!("InvalidInput: source ratio must be 1:N"),
        _ => bail!("a source prior is required"),
    })
}

#[derive(Args)]
struct RecalArgs {
    /// Scores CSV.
    #[arg(long)]
    scores: PathBuf,
    #[command(flatten)]
    src: SourcePrior,
    #[command(flatten)]
    tar: TargetPrior,
    /// Recalibrated scores CSV.
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
#[group(id = "shift", requires = "target_shift", multiple = false)]
struct OptionalSource {
    /// Source prior odds.
    #[arg(long)]
    pi_src: Option<f64>,
    /// Source prior from a `1:N` training ratio.
    #[arg(long, conflicts_with = "pi_src")]
    src_ratio: Option<Ratio>,
}

#[derive(Args)]
#[group(id = "target_shift", multiple = false)]
struct OptionalTarget {
    /// Target prior odds.
    #[arg(long)]
    pi_tar: Option<f64>,
    /// Target prevalence, converted to odds.
    #[arg(long)]
    target_prevalence: Option<f64>,
}

#[derive(Clone, Copy, ValueEnum)]
enum BandArg {
    Median,
    Mean,
}

#[derive(Args)]
struct TrajectoryArgs {
    #[command(flatten)]
    data: DataArgs,
    /// Trained checkpoint.
    #[arg(long)]
    checkpoint: PathBuf,
    /// Days between window ends.
    #[arg(long, default_value_t = 30)]
    step_days: i64,
    /// Only patients from this site.
    #[arg(long)]
    site: Option<String>,
    /// At most this many patients per group.
    #[arg(long)]
    limit: Option<usize>,
    #[command(flatten)]
    src: OptionalSource,
    #[command(flatten)]
    tar: OptionalTarget,
    #[arg(long, value_enum, default_value = "median")]
    band: BandArg,
    /// Per-patient trajectories CSV.
    #[arg(long)]
    trajectories: Option<PathBuf>,
    /// Curves CSV.
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct ExplainArgs {
    #[command(flatten)]
    data: DataArgs,
    /// Trained checkpoint.
    #[arg(long)]
    checkpoint: PathBuf,
    /// Patients to explain; defaults to the first `--limit` cases.
    #[arg(long)]
    ids: Vec<String>,
    #[arg(long, default_value_t = 5)]
    limit: usize,
    /// Blank this many years before each index day.
    #[arg(long, default_value_t = 0.0)]
    lead_years: f64,
    /// Permutations per player.
    #[arg(long, default_value_t = 32)]
    permutations: usize,
    /// Features listed in the ranking.
    #[arg(long, default_value_t = 20)]
    top: usize,
    #[arg(long, default_value_t = 42)]
    seed: u64,
    /// Attribution CSV.
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct ScreenArgs {
    /// Built-in scenario name or a scenario TOML file.
    #[arg(long)]
    scenario: String,
    /// Stage table CSV.
    #[arg(long)]
    out: Option<PathBuf>,
}

fn read_text(p: &Path) -> Result<String> {
    fs::read_to_string(p).with_context(|| format!("Io: cannot read {}", p.display()))
}

fn create(p: &Path) -> Result<BufWriter<File>> {
    if let Some(dir) = p.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir)?;
    }
    Ok(BufWriter::new(File::create(p).with_context(|| {
        format!("Io: cannot create {}", p.display())
    })?))
}

fn open(p: &Path) -> Result<BufReader<File>> {
    Ok(BufReader::new(File::open(p).with_context(|| {
        format!("Io: cannot open {}", p.display())
    })?))
}

fn manifest_path(out: &Path) -> PathBuf {
    if out.is_dir() {
        out.join("manifest.json")
    } else {
        let mut s = out.as_os_str().to_owned();
        s.push(".manifest.json");
        PathBuf::from(s)
    }
}

fn write_manifest(m: &mut RunManifest, out: &Path) -> Result<()> {
    fs::write(manifest_path(out), m.finish())?;
    Ok(())
}

fn cohort_spec(p: Option<&PathBuf>) -> Result<CohortSpec> {
    match p {
        Some(p) => toml::from_str(&read_text(p)?)
            .with_context(|| format!("InvalidConfig: {}", p.display())),
        None => Ok(CohortSpec::default()),
    }
}

fn load_records(dir: &Path, m: &mut RunManifest) -> Result<Vec<PatientRecord>> {
    let (e, d) = (dir.join(EVENTS), dir.join(DEMOGRAPHICS));
    m.input(&e)?;
    m.input(&d)?;
    Ok(read_patients(open(&e)?, open(&d)?)?)
}

fn load_labeled(args: &DataArgs, m: &mut RunManifest) -> Result<Vec<LabeledPatient>> {
    let spec = cohort_spec(args.cohort_config.as_ref())?;
    if let Some(p) = &args.cohort_config {
        m.config(p)?;
    }
    let records = load_records(&args.data, m)?;
    let l = args.data.join(LABELS);
    m.input(&l)?;
    let labels = read_labels(open(&l)?)?;
    Ok(label_patients(&records, &labels, &spec)?)
}

fn fit_encoder(patients: &[LabeledPatient], e: &EncodingArgs) -> Result<EncoderConfig> {
    let basis: Vec<LabeledPatient> = match &e.fit_site {
        Some(site) => patients
            .iter()
            .filter(|p| p.site().name() == site)
            .cloned()
            .collect(),
        None => patients.to_vec(),
    };
    if basis.is_empty() {
        bail!("InvalidInput: no patients to fit the encoder on");
    }
    Ok(EncoderConfig::fit(&basis, e.tau_days, e.buckets)?)
}

fn synth(a: SynthArgs, m: &mut RunManifest) -> Result<()> {
    let mut cfg: SynthConfig = match &a.config {
        Some(p) => {
            m.config(p)?;
            toml::from_str(&read_text(p)?)
                .with_context(|| format!("InvalidConfig: {}", p.display()))?
        }
        None => SynthConfig::default(),
    };
    m.seed = Some(a.seed);
    cfg.seed = m.child("synth", child_seed(a.seed, "synth"));
    for s in &mut cfg.sites {
        if let Some(n) = a.cases_per_site {
            s.n_cases = n;
        }
        if let Some(n) = a.controls_per_site {
            s.n_controls = n;
        }
    }
    let records = generate(&cfg)?;
    fs::create_dir_all(&a.out)?;
    let (e, d) = (a.out.join(EVENTS), a.out.join(DEMOGRAPHICS));
    let mut w = create(&e)?;
    for r in &records {
        write_events(&mut w, r.events())?;
    }
    w.flush()?;
    let mut w = create(&d)?;
    write_demographics(&mut w, &records)?;
    w.flush()?;
    m.output(&e)?;
    m.output(&d)?;
    println!("{} patients written to {}", records.len(), a.out.display());
    write_manifest(m, &a.out)
}

fn cohort(a: CohortArgs, m: &mut RunManifest) -> Result<()> {
    let spec = cohort_spec(a.config.as_ref())?;
    if let Some(p) = &a.config {
        m.config(p)?;
    }
    let records = load_records(&a.data, m)?;
    let cases = select_cases(&records, &spec);
    let controls = select_controls(&records, &spec);
    let patients = match a.match_ratio {
        Some(r) => {
            m.seed = Some(a.seed);
            let seed = m.child("match", child_seed(a.seed, "match"));
            let spec = CohortSpec {
                matching_ratio: r,
                ..spec.clone()
            };
            let out = match_controls(&cases.patients, &controls.patients, &spec, seed)?;
            println!("matched ratio {:.2}", out.achieved_ratio());
            out.patients
        }
        None => {
            let mut all = cases.patients;
            all.extend(controls.patients);
            all
        }
    };
    println!("cases: {}", serde_json::to_string(&cases.counts)?);
    println!("controls: {}", serde_json::to_string(&controls.counts)?);
    let out = a.out.unwrap_or_else(|| a.data.join(LABELS));
    let mut w = create(&out)?;
    write_labels(&mut w, &patients)?;
    w.flush()?;
    m.output(&out)?;
    write_manifest(m, &out)
}

fn encode_cmd(a: EncodeArgs, m: &mut RunManifest) -> Result<()> {
    let patients = load_labeled(&a.data, m)?;
    let enc = match &a.encoder {
        Some(p) => {
            m.input(p)?;
            serde_json::from_str(&read_text(p)?).context("InvalidConfig: encoder")?
        }
        None => fit_encoder(&patients, &a.encoding)?,
    };
    let encoded = encode_cohort(&patients, &enc)?;
    fs::create_dir_all(&a.out)?;
    let enc_path = a.out.join("encoder.json");
    fs::write(&enc_path, serde_json::to_string_pretty(&enc)? + "\n")?;
    let bin = a.out.join("matrices.bin");
    let csv = a.out.join("matrices.csv");
    match a.lead_years {
        Some(lead) => {
            let ms: Vec<_> = encoded
                .iter()
                .map(|p| p.matrix.exclude_lead_time(lead))
                .collect();
            write_matrices(create(&bin)?, &enc, &ms)?;
            if a.csv {
                write_matrices_csv(create(&csv)?, &enc, &ms)?;
            }
        }
        None => {
            let ms: Vec<_> = encoded.into_iter().map(|p| p.matrix).collect();
            write_matrices(create(&bin)?, &enc, &ms)?;
            if a.csv {
                write_matrices_csv(create(&csv)?, &enc, &ms)?;
            }
        }
    }
    for p in [&enc_path, &bin] {
        m.output(p)?;
    }
    if a.csv {
        m.output(&csv)?;
    }
    println!(
        "{} matrices of {}x{} written to {}",
        patients.len(),
        enc.n_buckets,
        enc.n_features(),
        a.out.display()
    );
    write_manifest(m, &a.out)
}

fn train_cmd(a: TrainArgs, m: &mut RunManifest) -> Result<()> {
    let patients: Vec<LabeledPatient> = load_labeled(&a.data, m)?
        .into_iter()
        .filter(|p| Some(p.site().name()) != a.site_holdout.as_deref())
        .collect();
    if patients.is_empty() {
        bail!("InvalidInput: no training patients");
    }
    let hyper = a.model.hyper()?;
    if let Some(p) = &a.model.config {
        m.config(p)?;
    }
    let enc = fit_encoder(&patients, &a.encoding)?;
    let encoded = encode_cohort(&patients, &enc)?;
    let cfg = a.model.model(enc.n_buckets, enc.n_features());
    m.seed = Some(a.seed);
    let seed = m.child("train", child_seed(a.seed, "train"));
    let trained = train_holdout(&encoded, &cfg, &hyper, a.model.ratio, 10, seed)?;
    for e in &trained.log.epochs {
        println!(
            "epoch {:>3}  train {:.5}  val {:.5}  auroc {}  lr {:.2e}",
            e.epoch,
            e.train_loss,
            e.val_loss,
            e.val_auroc.map_or("-".into(), |v| format!("{v:.4}")),
            e.lr
        );
    }
    println!(
        "best epoch {} (val loss {:.5})",
        trained.log.best_epoch, trained.log.best_val_loss
    );
    let ck = Checkpoint::new(trained.params, &enc, Some(hyper));
    let mut w = create(&a.out)?;
    w.write_all(&save_checkpoint(&ck))?;
    w.flush()?;
    m.output(&a.out)?;
    write_manifest(m, &a.out)
}

fn eval_cmd(a: EvalArgs, m: &mut RunManifest) -> Result<()> {
    let patients = load_labeled(&a.data, m)?;
    let hyper = a.model.hyper()?;
    if let Some(p) = &a.model.config {
        m.config(p)?;
    }
    let mut encoding = a.encoding;
    if encoding.fit_site.is_none() {
        encoding.fit_site = a.anchor_site.clone();
    }
    let enc = fit_encoder(&patients, &encoding)?;
    let encoded: Vec<EncodedPatient> = encode_cohort(&patients, &enc)?;
    m.seed = Some(a.seed);
    let cfg = LosoConfig {
        model: a.model.model(enc.n_buckets, enc.n_features()),
        hyper,
        ratio: a.model.ratio,
        n_folds: a.folds,
        anchor_site: a.anchor_site,
        held_out: a.site_holdout,
        lead_years: a.lead_years,
        seed: m.child("loso", child_seed(a.seed, "loso")),
        shuffle_labels: a.shuffle_labels,
    };
    let report = evaluate_loso(&encoded, &cfg)?;
    fs::create_dir_all(&a.out)?;
    for &lead in &cfg.lead_years {
        let p = a.out.join(format!("scores_{lead}y.csv"));
        write_scores_csv(create(&p)?, &report.all_scores(lead))?;
        m.output(&p)?;
    }
    let table = report.to_table();
    print!("{table}");
    let mut text = table;
    text.push_str("\nAUROC: mean (95% t-interval over fold models)\n");
    for row in &report.overall {
        if let Some(sm) = &row.site_mean {
            text.push_str(&format!(
                "{}y site-mean pooling: {:.3} ({:.3}-{:.3})\n",
                row.lead_years, sm.mean, sm.lo, sm.hi
            ));
        }
    }
    let rp = a.out.join("report.txt");
    fs::write(&rp, text)?;
    m.output(&rp)?;
    let summary = serde_json::json!({
        "overall": report.overall,
        "sites": report.runs.iter().map(|r| serde_json::json!({
            "held_out_site": r.held_out_site,
            "lead_years": r.lead_years,
            "model_aurocs": r.model_aurocs,
            "auroc": r.auroc,
        })).collect::<Vec<_>>(),
        "logs": report.logs,
        "ci": "mean +/- t(0.975, n-1) * sd / sqrt(n) over fold-model AUROCs",
    });
    let jp = a.out.join("report.json");
    fs::write(&jp, serde_json::to_string_pretty(&summary)? + "\n")?;
    m.output(&jp)?;
    for (site, hash) in &report.splits {
        m.note(&format!("split:{site}"), hash.clone());
    }
    write_manifest(m, &a.out)
}

fn thresholds_cmd(a: ThresholdArgs, m: &mut RunManifest) -> Result<()> {
    m.input(&a.scores)?;
    let scores = read_scores_csv(open(&a.scores)?)?;
    let pairs = scored_pairs(&scores);
    let prior = match a.prior {
        Some(p) => p,
        None => pairs.iter().filter(|p| p.1).count() as f64 / pairs.len().max(1) as f64,
    };
    let rows = threshold_table(&pairs, &ThresholdCriterion::standard(prior))?;
    let mut out = String::from(
        "criterion,threshold,tp,fp,tn,fn,sensitivity,specificity,ppv,npv,youden_j,dor\n",
    );
    for r in &rows {
        out.push_str(&format!(
            "\"{}\",{},{},{},{},{},{},{},{},{},{},{}\n",
            r.criterion,
            r.threshold,
            r.counts.tp,
            r.counts.fp,
            r.counts.tn,
            r.counts.fn_,
            r.sensitivity,
            r.specificity,
            r.ppv,
            r.npv,
            r.youden_j,
            r.dor
        ));
    }
    println!("AUROC {:.4}", auroc(&pairs)?);
    println!(
        "{:<40} {:>9} {:>6} {:>6} {:>6} {:>6} {:>8}",
        "criterion", "threshold", "sens", "spec", "ppv", "npv", "DOR"
    );
    for r in &rows {
        println!(
            "{:<40} {:>9.5} {:>6.3} {:>6.3} {:>6.3} {:>6.3} {:>8.2}",
            r.criterion.to_string(),
            r.threshold,
            r.sensitivity,
            r.specificity,
            r.ppv,
            r.npv,
            r.dor
        );
    }
    match &a.out {
        Some(p) => {
            fs::write(p, out)?;
            m.output(p)?;
            write_manifest(m, p)
        }
        None => {
            log::info!("{}", m.finish());
            Ok(())
        }
    }
}

fn recal_cmd(a: RecalArgs, m: &mut RunManifest) -> Result<()> {
    let spec = recal_spec(&a.src, &a.tar)?;
    m.input(&a.scores)?;
    let scores = read_scores_csv(open(&a.scores)?)?;
    let shifted: Vec<ScoredPatient> = scores
        .iter()
        .map(|s| {
            let logit = recalibrate_logit(s.logit, &spec);
            ScoredPatient {
                logit,
                prob: premod::autodiff::sigmoid(logit),
                ..s.clone()
            }
        })
        .collect();
    let before = auroc(&scored_pairs(&scores))?;
    let after = auroc(&scored_pairs(&shifted))?;
    println!("logit shift {:+.6}", spec.delta());
    println!("AUROC before {before:.12}");
    println!("AUROC after  {after:.12}");
    write_scores_csv(create(&a.out)?, &shifted)?;
    m.output(&a.out)?;
    m.note("pi_src", spec.pi_src.to_string());
    m.note("pi_tar", spec.pi_tar.to_string());
    write_manifest(m, &a.out)
}

fn load_model(p: &Path, m: &mut RunManifest) -> Result<(Checkpoint, EncoderConfig)> {
    m.input(p)?;
    let ck = load_checkpoint(&fs::read(p)?, None)?;
    let enc = ck
        .encoder
        .clone()
        .context("InvalidInput: checkpoint carries no encoder")?;
    Ok((ck, enc))
}

fn trajectory_cmd(a: TrajectoryArgs, m: &mut RunManifest) -> Result<()> {
    let (ck, enc) = load_model(&a.checkpoint, m)?;
    let mut patients = load_labeled(&a.data, m)?;
    if let Some(site) = &a.site {
        patients.retain(|p| p.site().name() == site);
    }
    if let Some(n) = a.limit {
        let (mut cases, mut controls) = (0, 0);
        patients.retain(|p| {
            let c = if p.label.is_case() {
                &mut cases
            } else {
                &mut controls
            };
            *c += 1;
            *c <= n
        });
    }
    let spec = if a.tar.pi_tar.is_some() || a.tar.target_prevalence.is_some() {
        let src = SourcePrior {
            pi_src: a.src.pi_src,
            src_ratio: a.src.src_ratio.or(Some(Ratio::OneTo(10))),
        };
        let tar = TargetPrior {
            pi_tar: a.tar.pi_tar,
            target_prevalence: a.tar.target_prevalence,
        };
        Some(recal_spec(&src, &tar)?)
    } else {
        None
    };
    let ts = cohort_trajectories(&patients, &ck.params, &enc, a.step_days, spec.as_ref())?;
    let band = match a.band {
        BandArg::Median => Band::MedianIqr,
        BandArg::Mean => Band::MeanSd,
    };
    let curves = cohort_curves(&ts, band)?;
    let mut w = create(&a.out)?;
    write_curves_csv(&mut w, &curves)?;
    w.flush()?;
    m.output(&a.out)?;
    if let Some(p) = &a.trajectories {
        let mut w = create(p)?;
        writeln!(w, "patient_id,label,months_before_index,prob")?;
        for t in &ts {
            for pt in &t.points {
                writeln!(
                    w,
                    "{},{},{},{}",
                    t.patient_id,
                    u8::from(t.label.is_case()),
                    pt.months_before_index,
                    pt.prob
                )?;
            }
        }
        w.flush()?;
        m.output(p)?;
    }
    println!("{} trajectories, {} groups", ts.len(), curves.len());
    write_manifest(m, &a.out)
}

fn explain_cmd(a: ExplainArgs, m: &mut RunManifest) -> Result<()> {
    let (ck, enc) = load_model(&a.checkpoint, m)?;
    let patients = load_labeled(&a.data, m)?;
    let chosen: Vec<&LabeledPatient> = if a.ids.is_empty() {
        patients
            .iter()
            .filter(|p| p.label.is_case())
            .take(a.limit)
            .collect()
    } else {
        a.ids
            .iter()
            .map(|id| {
                patients
                    .iter()
                    .find(|p| p.id().as_str() == id)
                    .with_context(|| format!("UnknownPatient: {id}"))
            })
            .collect::<Result<_>>()?
    };
    let matrices = chosen
        .iter()
        .map(|p| Ok(premod::encode::encode(p, &enc)?.exclude_lead_time(a.lead_years)))
        .collect::<Result<Vec<_>>>()?;
    let inputs: Vec<(String, &premod::autodiff::Tensor)> = chosen
        .iter()
        .zip(&matrices)
        .map(|(p, mtx)| (p.id().as_str().to_string(), &mtx.values))
        .collect();
    m.seed = Some(a.seed);
    let seed = m.child("explain", child_seed(a.seed, "explain"));
    let s = AttributionTensor::compute(&ck.params, &inputs, a.permutations, seed)?;
    let names: Vec<String> = (0..enc.n_features())
        .map(|j| enc.feature_name(j).to_string())
        .collect();
    let mut w = create(&a.out)?;
    s.write_csv(&mut w, &names)?;
    w.flush()?;
    m.output(&a.out)?;
    print!("{}", feature_report(&aggregate_feature(&s, &names), a.top));
    println!("bucket mean |phi| (bucket 0 nearest the index):");
    for (t, v) in aggregate_time(&s).iter().enumerate() {
        println!("{t:>3} {v:.6}");
    }
    write_manifest(m, &a.out)
}

fn screen_cmd(a: ScreenArgs, m: &mut RunManifest) -> Result<()> {
    let scenario = match Scenario::builtin(&a.scenario) {
        Some(s) => s,
        None => {
            let p = Path::new(&a.scenario);
            if !p.exists() {
                bail!(
                    "InvalidScenario: {:?} is neither a file nor one of {:?}",
                    a.scenario,
                    Scenario::builtin_names()
                );
            }
            m.config(p)?;
            Scenario::from_toml(&read_text(p)?)?
        }
    };
    let r = scenario.run()?;
    print!("{}", r.to_table(&scenario.name));
    match &a.out {
        Some(p) => {
            fs::write(p, r.to_csv())?;
            m.output(p)?;
            write_manifest(m, p)
        }
        None => {
            log::info!("{}", m.finish());
            Ok(())
        }
    }
}

fn run(cli: Cli) -> Result<()> {
    let mut m = RunManifest::new(std::env::args().collect());
    match cli.command {
        Command::Synth(a) => synth(a, &mut m),
        Command::Cohort(a) => cohort(a, &mut m),
        Command::Encode(a) => encode_cmd(a, &mut m),
        Command::Train(a) => train_cmd(a, &mut m),
        Command::Eval(a) => eval_cmd(a, &mut m),
        Command::Thresholds(a) => thresholds_cmd(a, &mut m),
        Command::Recal(a) => recal_cmd(a, &mut m),
        Command::Trajectory(a) => trajectory_cmd(a, &mut m),
        Command::Explain(a) => explain_cmd(a, &mut m),
        Command::Screen(a) => screen_cmd(a, &mut m),
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = Cli::parse();
    if let Some(n) = std::env::var("PREMOD_THREADS")
        .ok()
        .and_then(|v| v.parse::<usize>().ok())
        .filter(|n| *n > 0)
    {
        if let Err(e) = rayon::ThreadPoolBuilder::new()
            .num_threads(n)
            .build_global()
        {
            log::warn!("thread pool: {e}");
        }
    }
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(1)
        }
    }
}

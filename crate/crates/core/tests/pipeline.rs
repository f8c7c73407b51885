//! End-to-end library pipeline on a small synthetic cohort.

use premod::autodiff::TrainHyper;
use premod::ehr::{select_cohort, CohortSpec, LabeledPatient};
use premod::encode::EncoderConfig;
use premod::metrics::auroc;
use premod::model::ModelConfig;
use premod::recal::{recalibrate_logit, RecalSpec};
use premod::shapley::{aggregate_feature, AttributionTensor};
use premod::synth::{generate, SynthConfig};
use premod::train::{
    encode_cohort, evaluate_loso, read_scores_csv, train_holdout, write_scores_csv, EncodedPatient,
    LosoConfig, Ratio,
};
use premod::trajectory::{cohort_curves, cohort_trajectories, Band};

fn small() -> (Vec<LabeledPatient>, EncoderConfig, Vec<EncodedPatient>) {
    let mut cfg = SynthConfig::default();
    for s in &mut cfg.sites {
        s.n_cases = 10;
        s.n_controls = 60;
    }
    let records = generate(&cfg).unwrap();
    let (patients, cases, controls) = select_cohort(&records, &CohortSpec::default());
    assert_eq!(cases.included, 30);
    assert_eq!(controls.included, 180);
    let anchor: Vec<_> = patients
        .iter()
        .filter(|p| p.site().name() == "SiteA")
        .cloned()
        .collect();
    let enc = EncoderConfig::fit(&anchor, 30, 24).unwrap();
    let encoded = encode_cohort(&patients, &enc).unwrap();
    (patients, enc, encoded)
}

fn loso_cfg(enc: &EncoderConfig) -> LosoConfig {
    let mut cfg = LosoConfig::desk(enc.n_buckets, enc.n_features(), 11);
    cfg.anchor_site = Some("SiteA".into());
    cfg.n_folds = 2;
    cfg.hyper.max_epochs = 3;
    cfg.lead_years = vec![1.0, 2.0];
    cfg
}

#[test]
fn loso_report_is_complete_and_reproducible() {
    let (_, enc, encoded) = small();
    let cfg = loso_cfg(&enc);
    let report = evaluate_loso(&encoded, &cfg).unwrap();
    // Anchor stays in development, the other two sites are held out in turn.
    assert_eq!(report.runs.len(), 2 * 2);
    assert_eq!(report.splits.len(), 2);
    for run in &report.runs {
        assert_ne!(run.held_out_site, "SiteA");
        assert_eq!(run.models.len(), 2);
        for scored in &run.models {
            assert_eq!(scored.len(), 70);
            assert!(scored.iter().all(|s| s.site == run.held_out_site));
        }
        assert!(run.auroc.lo <= run.auroc.mean && run.auroc.mean <= run.auroc.hi);
    }
    assert_eq!(report.all_scores(1.0).len(), 2 * 2 * 70);
    assert!(report.to_table().contains("overall"));

    let again = evaluate_loso(&encoded, &cfg).unwrap();
    assert_eq!(report, again);

    let mut buf = Vec::new();
    write_scores_csv(&mut buf, &report.all_scores(1.0)).unwrap();
    let back = read_scores_csv(buf.as_slice()).unwrap();
    assert_eq!(back, report.all_scores(1.0));
}

#[test]
fn trained_model_feeds_recalibration_trajectories_and_attribution() {
    let (patients, enc, encoded) = small();
    let dev: Vec<EncodedPatient> = encoded
        .iter()
        .filter(|p| p.site != "SiteC")
        .cloned()
        .collect();
    let mut hyper = TrainHyper::desk();
    hyper.max_epochs = 4;
    let model = ModelConfig::desk(enc.n_buckets, enc.n_features());
    let trained = train_holdout(&dev, &model, &hyper, Ratio::OneTo(10), 5, 3).unwrap();
    assert!(!trained.log.epochs.is_empty());

    let test: Vec<_> = encoded.iter().filter(|p| p.site == "SiteC").collect();
    let ms: Vec<_> = test
        .iter()
        .map(|p| p.matrix.exclude_lead_time(1.0))
        .collect();
    let scores = premod::train::score_all(&trained.params, &ms).unwrap();
    let pairs: Vec<(f64, bool)> = scores
        .iter()
        .zip(&test)
        .map(|(s, p)| (s.0, p.is_case()))
        .collect();
    let spec = RecalSpec::from_ratio(10.0, 0.01).unwrap();
    let shifted: Vec<(f64, bool)> = pairs
        .iter()
        .map(|&(z, y)| (recalibrate_logit(z, &spec), y))
        .collect();
    assert!((auroc(&pairs).unwrap() - auroc(&shifted).unwrap()).abs() < 1e-12);

    let site_c: Vec<LabeledPatient> = patients
        .iter()
        .filter(|p| p.site().name() == "SiteC")
        .take(12)
        .cloned()
        .collect();
    let ts = cohort_trajectories(&site_c, &trained.params, &enc, 90, None).unwrap();
    assert_eq!(ts.len(), 12);
    for t in &ts {
        assert_eq!(t.points.last().unwrap().months_before_index, 0);
        assert!(t.points.iter().all(|p| (0.0..=1.0).contains(&p.prob)));
    }
    let curves = cohort_curves(&ts, Band::MedianIqr).unwrap();
    assert!(curves.iter().all(|c| c
        .points
        .iter()
        .all(|p| p.lo <= p.center && p.center <= p.hi)));

    let case = test.iter().find(|p| p.is_case()).unwrap();
    let x = case.matrix.exclude_lead_time(0.0).values;
    let inputs = vec![(case.matrix.patient_id.as_str().to_string(), &x)];
    let s = AttributionTensor::compute(&trained.params, &inputs, 8, 5).unwrap();
    assert_eq!(
        s,
        AttributionTensor::compute(&trained.params, &inputs, 8, 5).unwrap()
    );
    let names: Vec<String> = (0..enc.n_features())
        .map(|j| enc.feature_name(j).to_string())
        .collect();
    let ranking = aggregate_feature(&s, &names);
    assert!(!ranking.is_empty());
    assert!(ranking.windows(2).all(|w| w[0].1 >= w[1].1));
    // Cells that are zero in the input carry no attribution.
    for t in 0..x.rows() {
        for j in 0..x.cols() {
            if x.at(t, j) == 0.0 {
                assert_eq!(s.at(0, t, j), 0.0);
            }
        }
    }
}

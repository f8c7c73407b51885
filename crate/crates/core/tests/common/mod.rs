#![allow(dead_code)]

use premod::ehr::{select_cohort, CohortSpec, LabeledPatient};
use premod::encode::EncoderConfig;
use premod::synth::{generate, SynthConfig};
use premod::train::{encode_cohort, EncodedPatient};
use std::sync::OnceLock;

pub const ANCHOR: &str = "SiteA";
pub const TAU_DAYS: i64 = 30;
pub const N_BUCKETS: usize = 48;

pub struct Cohort {
    pub patients: Vec<LabeledPatient>,
    pub encoder: EncoderConfig,
    pub encoded: Vec<EncodedPatient>,
}

/// The default three-site synthetic cohort, encoded with vocabularies and
/// lab statistics fitted on the anchor site.
pub fn cohort() -> &'static Cohort {
    static COHORT: OnceLock<Cohort> = OnceLock::new();
    COHORT.get_or_init(|| {
        let records = generate(&SynthConfig::default()).expect("default synth config");
        let (patients, _, _) = select_cohort(&records, &CohortSpec::default());
        let anchor: Vec<LabeledPatient> = patients
            .iter()
            .filter(|p| p.site().name() == ANCHOR)
            .cloned()
            .collect();
        let encoder = EncoderConfig::fit(&anchor, TAU_DAYS, N_BUCKETS).expect("encoder");
        let encoded = encode_cohort(&patients, &encoder).expect("encode");
        Cohort {
            patients,
            encoder,
            encoded,
        }
    })
}

/// Brute-force Mann-Whitney count over all case-control pairs.
pub fn pair_auroc(scored: &[(f64, bool)]) -> f64 {
    let (mut wins, mut pairs) = (0.0, 0.0);
    for &(a, ya) in scored {
        if !ya {
            continue;
        }
        for &(b, yb) in scored {
            if yb {
                continue;
            }
            pairs += 1.0;
            if a > b {
                wins += 1.0;
            } else if a == b {
                wins += 0.5;
            }
        }
    }
    wins / pairs
}

/// L2-regularised logistic regression fitted by full-batch gradient
/// descent on standardised features. Returns a scoring closure.
pub fn fit_logistic(x: &[Vec<f64>], y: &[bool], l2: f64, iters: usize) -> impl Fn(&[f64]) -> f64 {
    let d = x[0].len();
    let n = x.len() as f64;
    let mean: Vec<f64> = (0..d)
        .map(|j| x.iter().map(|r| r[j]).sum::<f64>() / n)
        .collect();
    let sd: Vec<f64> = (0..d)
        .map(|j| {
            let v = x.iter().map(|r| (r[j] - mean[j]).powi(2)).sum::<f64>() / n;
            if v > 0.0 {
                v.sqrt()
            } else {
                1.0
            }
        })
        .collect();
    let z: Vec<Vec<f64>> = x
        .iter()
        .map(|r| (0..d).map(|j| (r[j] - mean[j]) / sd[j]).collect())
        .collect();
    let mut w = vec![0.0; d];
    let mut b = 0.0;
    let lr = 0.5;
    for _ in 0..iters {
        let mut gw = vec![0.0; d];
        let mut gb = 0.0;
        for (r, &t) in z.iter().zip(y) {
            let s = b + r.iter().zip(&w).map(|(a, c)| a * c).sum::<f64>();
            let e = 1.0 / (1.0 + (-s).exp()) - if t { 1.0 } else { 0.0 };
            gb += e;
            for j in 0..d {
                gw[j] += e * r[j];
            }
        }
        b -= lr * gb / n;
        for j in 0..d {
            w[j] -= lr * (gw[j] / n + l2 * w[j]);
        }
    }
    move |r: &[f64]| b + (0..d).map(|j| (r[j] - mean[j]) / sd[j] * w[j]).sum::<f64>()
}

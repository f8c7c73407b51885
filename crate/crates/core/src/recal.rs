//! Prior-shift recalibration. A model trained where the prior odds were
//! `pi_src` is moved to a population with prior odds `pi_tar` by adding
//! `ln pi_tar - ln pi_src` to its logit, which leaves the likelihood ratio
//! and therefore the ranking of patients untouched.

use crate::autodiff::{logit, sigmoid, PROB_EPS};
use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum RecalError {
    #[error("OutOfRange: prevalence {0} must lie strictly between 0 and 1")]
    OutOfRange(f64),
    #[error("prior odds must be positive and finite, got {0}")]
    InvalidOdds(f64),
}

/// `p / (1 - p)`.
pub fn prevalence_to_odds(prevalence: f64) -> Result<f64, RecalError> {
    if !(prevalence > 0.0 && prevalence < 1.0) {
        return Err(RecalError::OutOfRange(prevalence));
    }
    Ok(prevalence / (1.0 - prevalence))
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RecalSpec {
    pub pi_src: f64,
    pub pi_tar: f64,
}

impl RecalSpec {
    pub fn new(pi_src: f64, pi_tar: f64) -> Result<Self, RecalError> {
        for v in [pi_src, pi_tar] {
            if !(v > 0.0 && v.is_finite()) {
                return Err(RecalError::InvalidOdds(v));
            }
        }
        Ok(RecalSpec { pi_src, pi_tar })
    }

    /// Source odds from a `1:ratio` case-control design.
    pub fn from_ratio(ratio: f64, pi_tar: f64) -> Result<Self, RecalError> {
        Self::new(1.0 / ratio, pi_tar)
    }

    /// Source odds as realised by a training set.
    pub fn from_counts(cases: usize, controls: usize, pi_tar: f64) -> Result<Self, RecalError> {
        Self::new(cases as f64 / controls as f64, pi_tar)
    }

    pub fn delta(&self) -> f64 {
        self.pi_tar.ln() - self.pi_src.ln()
    }

    /// Applying `self` then `next` (whose source is `self`'s target).
    pub fn then(&self, next: &RecalSpec) -> RecalSpec {
        RecalSpec {
            pi_src: self.pi_src,
            pi_tar: self.pi_tar * next.pi_tar / next.pi_src,
        }
    }
}

pub fn recalibrate_logit(z_u: f64, spec: &RecalSpec) -> f64 {
    z_u + spec.delta()
}

/// `sigmoid(logit(p_u) + delta)`. Probabilities within 1e-12 of 0 or 1 are
/// clamped first, with a warning.
pub fn recalibrate_prob(p_u: f64, spec: &RecalSpec) -> f64 {
    let p = if !(PROB_EPS..=1.0 - PROB_EPS).contains(&p_u) {
        log::warn!("probability {p_u} clamped before recalibration");
        p_u.clamp(PROB_EPS, 1.0 - PROB_EPS)
    } else {
        p_u
    };
    sigmoid(logit(p) + spec.delta())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::metrics::auroc;
    use proptest::prelude::*;

    #[test]
    fn identity_when_priors_match() {
        let s = RecalSpec::new(0.1, 0.1).unwrap();
        assert_eq!(recalibrate_logit(1.7, &s), 1.7);
        assert!((recalibrate_prob(0.3, &s) - 0.3).abs() < 1e-15);
    }

    #[test]
    fn deployment_shift() {
        let s = RecalSpec::new(1.0 / 10.0, 1.0 / 29.0).unwrap();
        let z = recalibrate_logit(0.0, &s);
        assert!((z - (10.0f64 / 29.0).ln()).abs() < 1e-15);
        assert!((z - -1.0647).abs() < 1e-4);
        let oracle = (10.0 / 29.0) / (1.0 + 10.0 / 29.0);
        assert!((recalibrate_prob(0.5, &s) - oracle).abs() < 1e-12);
        assert!((oracle - 0.2564).abs() < 1e-4);
    }

    #[test]
    fn odds_from_prevalence() {
        assert_eq!(prevalence_to_odds(0.5).unwrap(), 1.0);
        assert!((prevalence_to_odds(1.0 / 11.0).unwrap() - 0.1).abs() < 1e-15);
        assert!((prevalence_to_odds(0.000332).unwrap() - 0.00033211).abs() < 1e-8);
        assert_eq!(prevalence_to_odds(1.0), Err(RecalError::OutOfRange(1.0)));
        assert!(RecalSpec::new(0.0, 1.0).is_err());
    }

    #[test]
    fn ranking_is_preserved_exactly() {
        let s = RecalSpec::from_ratio(10.0, prevalence_to_odds(0.000332).unwrap()).unwrap();
        let scored: Vec<(f64, bool)> = (1..100)
            .map(|i| ((i as f64 / 100.0).powf(1.3), i % 7 == 0 || i > 90))
            .collect();
        let shifted: Vec<(f64, bool)> = scored
            .iter()
            .map(|&(p, y)| (recalibrate_prob(p, &s), y))
            .collect();
        assert!((auroc(&scored).unwrap() - auroc(&shifted).unwrap()).abs() <= 1e-12);
    }

    proptest! {
        #[test]
        fn shifts_compose(z in -20.0f64..20.0, a in 1e-4f64..10.0, b in 1e-4f64..10.0, c in 1e-4f64..10.0) {
            let ab = RecalSpec::new(a, b).unwrap();
            let bc = RecalSpec::new(b, c).unwrap();
            let ac = RecalSpec::new(a, c).unwrap();
            let two = recalibrate_logit(recalibrate_logit(z, &ab), &bc);
            prop_assert!((two - recalibrate_logit(z, &ac)).abs() < 1e-9);
            prop_assert!((ab.then(&bc).delta() - ac.delta()).abs() < 1e-9);
        }
    }
}

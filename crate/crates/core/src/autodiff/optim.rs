use super::{LossKind, Tensor};
use serde::{Deserialize, Serialize};

/// Training hyperparameters. `Default` is the published configuration;
/// [`TrainHyper::desk`] is the shrunk preset used for laptop-scale runs.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainHyper {
    pub gamma: f64,
    pub alpha: f64,
    /// Use plain cross-entropy instead of the focal objective.
    pub bce: bool,
    pub lr0: f64,
    pub plateau_patience: usize,
    pub plateau_factor: f64,
    pub batch_size: usize,
    pub max_epochs: usize,
    pub early_stop_patience: usize,
    pub dropout: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub adam_eps: f64,
}

impl Default for TrainHyper {
    fn default() -> Self {
        TrainHyper {
            gamma: 2.0,
            alpha: 0.25,
            bce: false,
            lr0: 2e-4,
            plateau_patience: 2,
            plateau_factor: 5.0,
            batch_size: 64,
            max_epochs: 50,
            early_stop_patience: 5,
            dropout: 0.1,
            beta1: 0.9,
            beta2: 0.999,
            adam_eps: 1e-8,
        }
    }
}

impl TrainHyper {
    /// Small-model preset: same loss and schedule, larger step size and a
    /// short epoch budget.
    pub fn desk() -> Self {
        TrainHyper {
            lr0: 2e-3,
            max_epochs: 12,
            ..Self::default()
        }
    }

    pub fn loss_kind(&self) -> LossKind {
        if self.bce {
            LossKind::Bce
        } else {
            LossKind::Focal {
                gamma: self.gamma,
                alpha: self.alpha,
            }
        }
    }

    pub fn validate(&self) -> Result<(), String> {
        let positive = [
            self.lr0,
            self.plateau_factor,
            self.beta1,
            self.beta2,
            self.adam_eps,
        ];
        if positive.iter().any(|v| !(*v > 0.0)) || self.gamma < 0.0 {
            return Err("hyperparameters must be positive".into());
        }
        if !(self.alpha > 0.0 && self.alpha < 1.0) {
            return Err("alpha must lie in (0, 1)".into());
        }
        if self.batch_size == 0 || self.max_epochs == 0 || self.plateau_patience == 0 {
            return Err("batch size, epochs and patience must be positive".into());
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return Err("dropout must lie in [0, 1)".into());
        }
        Ok(())
    }
}

/// Adaptive-moment optimiser with bias correction.
#[derive(Debug, Clone)]
pub struct Adam {
    pub lr: f64,
    beta1: f64,
    beta2: f64,
    eps: f64,
    step: i32,
    m: Vec<Vec<f64>>,
    v: Vec<Vec<f64>>,
}

impl Adam {
    pub fn new(lr: f64, beta1: f64, beta2: f64, eps: f64) -> Self {
        Adam {
            lr,
            beta1,
            beta2,
            eps,
            step: 0,
            m: Vec::new(),
            v: Vec::new(),
        }
    }

    pub fn from_hyper(h: &TrainHyper) -> Self {
        Self::new(h.lr0, h.beta1, h.beta2, h.adam_eps)
    }

    pub fn step(&mut self, params: &mut [Tensor], grads: &[Tensor]) {
        assert_eq!(params.len(), grads.len(), "one gradient per parameter");
        if self.m.is_empty() {
            self.m = params.iter().map(|p| vec![0.0; p.len()]).collect();
            self.v = self.m.clone();
        }
        self.step += 1;
        let c1 = 1.0 - self.beta1.powi(self.step);
        let c2 = 1.0 - self.beta2.powi(self.step);
        for (k, (p, g)) in params.iter_mut().zip(grads).enumerate() {
            assert_eq!(p.shape(), g.shape(), "gradient shape");
            let (m, v) = (&mut self.m[k], &mut self.v[k]);
            for (i, (w, gv)) in p.data_mut().iter_mut().zip(g.data()).enumerate() {
                m[i] = self.beta1 * m[i] + (1.0 - self.beta1) * gv;
                v[i] = self.beta2 * v[i] + (1.0 - self.beta2) * gv * gv;
                let mhat = m[i] / c1;
                let vhat = v[i] / c2;
                *w -= self.lr * mhat / (vhat.sqrt() + self.eps);
            }
        }
    }
}

/// Divides the learning rate by `factor` once validation loss has failed to
/// improve for `patience` consecutive epochs.
#[derive(Debug, Clone)]
pub struct PlateauScheduler {
    patience: usize,
    factor: f64,
    best: f64,
    stagnant: usize,
}

impl PlateauScheduler {
    pub fn new(patience: usize, factor: f64) -> Self {
        PlateauScheduler {
            patience,
            factor,
            best: f64::INFINITY,
            stagnant: 0,
        }
    }

    /// Records an epoch's validation loss; returns true when `lr` was reduced.
    pub fn observe(&mut self, val_loss: f64, lr: &mut f64) -> bool {
        if val_loss < self.best {
            self.best = val_loss;
            self.stagnant = 0;
            return false;
        }
        self.stagnant += 1;
        if self.stagnant >= self.patience {
            *lr /= self.factor;
            self.stagnant = 0;
            return true;
        }
        false
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn two_stagnant_epochs_divide_lr_by_five() {
        let mut lr = 2e-4;
        let mut s = PlateauScheduler::new(2, 5.0);
        assert!(!s.observe(1.0, &mut lr));
        assert!(!s.observe(1.0, &mut lr));
        assert!(s.observe(1.1, &mut lr));
        assert!((lr - 4e-5).abs() < 1e-18);
    }

    #[test]
    fn improving_loss_keeps_lr() {
        let mut lr = 2e-4;
        let mut s = PlateauScheduler::new(2, 5.0);
        for l in [1.0, 0.9, 0.8, 0.7, 0.6] {
            assert!(!s.observe(l, &mut lr));
        }
        assert_eq!(lr, 2e-4);
    }

    #[test]
    fn quadratic_converges() {
        // f(x) = (x - 3)^2, minimum 0 at x = 3.
        let mut x = vec![Tensor::scalar(-2.0)];
        let mut opt = Adam::new(0.1, 0.9, 0.999, 1e-8);
        let mut steps = 0;
        while steps < 500 {
            let xv = x[0].item();
            if (xv - 3.0).powi(2) <= 1e-6 && (xv - 3.0).abs() <= 1e-3 {
                break;
            }
            let g = Tensor::scalar(2.0 * (xv - 3.0));
            opt.step(&mut x, &[g]);
            steps += 1;
        }
        assert!(
            (x[0].item() - 3.0).powi(2) <= 1e-6,
            "x = {} after {steps}",
            x[0].item()
        );
    }

    #[test]
    fn defaults_are_published_values() {
        let h = TrainHyper::default();
        assert_eq!(
            (h.gamma, h.alpha, h.lr0, h.batch_size),
            (2.0, 0.25, 2e-4, 64)
        );
        assert_eq!((h.plateau_patience, h.plateau_factor), (2, 5.0));
        assert!(h.validate().is_ok());
        assert!(TrainHyper { alpha: 1.0, ..h }.validate().is_err());
    }
}

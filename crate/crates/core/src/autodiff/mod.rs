//! Dense tensors, a reverse-mode tape, classification losses and the
//! adaptive-moment optimiser used to train the risk model.

mod optim;
mod tape;
mod tensor;

pub use optim::{Adam, PlateauScheduler, TrainHyper};
pub use tape::{logit, loss_value, sigmoid, LossKind, Tape, Var, LAYER_NORM_EPS, PROB_EPS};
pub use tensor::Tensor;

use thiserror::Error;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum AutodiffError {
    #[error("ShapeMismatch in {op}: {left:?} vs {right:?}")]
    ShapeMismatch {
        op: &'static str,
        left: Vec<usize>,
        right: Vec<usize>,
    },
    #[error("expected a scalar, got shape {0:?}")]
    NotScalar(Vec<usize>),
    #[error("GraphReused: backward already ran on this tape; reset it first")]
    GraphReused,
}

/// Focal loss of a single prediction; see [`LossKind::Focal`].
pub fn focal_loss(p: f64, label: bool, gamma: f64, alpha: f64) -> f64 {
    loss_value(
        p,
        if label { 1.0 } else { 0.0 },
        LossKind::Focal { gamma, alpha },
    )
}

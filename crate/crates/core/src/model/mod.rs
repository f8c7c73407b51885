//! The risk network: input projection with sinusoidal positions, a stack of
//! post-norm self-attention encoder layers, additive-attention aggregation
//! heads (or a summary token), a context mixer and a two-hidden-layer
//! classifier producing one logit.

mod checkpoint;

pub use checkpoint::{
    load_checkpoint, save_checkpoint, Checkpoint, CheckpointError, FORMAT_VERSION,
};

use crate::autodiff::{AutodiffError, LossKind, Tape, Tensor, Var};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum ModelError {
    #[error("invalid model config: {0}")]
    InvalidConfig(String),
    #[error("ShapeMismatch: input {got:?}, model expects {expected:?}")]
    ShapeMismatch {
        got: Vec<usize>,
        expected: Vec<usize>,
    },
    #[error(transparent)]
    Autodiff(#[from] AutodiffError),
}

const LAYER_TENSORS: usize = 15;

/// How the encoded sequence is pooled into one context vector.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Aggregation {
    /// `n` independent additive-attention heads over time.
    Additive(usize),
    /// A learned summary token prepended to the sequence.
    Cls,
}

impl Aggregation {
    pub fn label(&self) -> String {
        match self {
            Aggregation::Additive(g) => g.to_string(),
            Aggregation::Cls => "[CLS]".into(),
        }
    }
}

impl std::str::FromStr for Aggregation {
    type Err = String;
    fn from_str(s: &str) -> Result<Self, Self::Err> {
        let s = s.trim();
        if s.eq_ignore_ascii_case("cls") || s.eq_ignore_ascii_case("[cls]") {
            return Ok(Aggregation::Cls);
        }
        match s.parse::<usize>() {
            Ok(n) if n > 0 => Ok(Aggregation::Additive(n)),
            _ => Err(format!("aggregation {s:?} is neither a head count nor cls")),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub n_buckets: usize,
    pub n_features: usize,
    pub d_model: usize,
    pub n_layers: usize,
    pub n_heads: usize,
    pub aggregation: Aggregation,
}

impl ModelConfig {
    /// Shrunk laptop-scale defaults for a `n_buckets x n_features` input.
    pub fn desk(n_buckets: usize, n_features: usize) -> Self {
        ModelConfig {
            n_buckets,
            n_features,
            d_model: 16,
            n_layers: 1,
            n_heads: 2,
            aggregation: Aggregation::Additive(2),
        }
    }

    pub fn ff_dim(&self) -> usize {
        4 * self.d_model
    }

    pub fn validate(&self) -> Result<(), ModelError> {
        let bad = |m: &str| Err(ModelError::InvalidConfig(m.into()));
        if self.n_buckets == 0 || self.n_features == 0 {
            return bad("input dimensions must be positive");
        }
        if self.d_model < 2 || !self.d_model.is_multiple_of(2) {
            return bad("d_model must be even and at least 2");
        }
        if self.n_heads == 0 || !self.d_model.is_multiple_of(self.n_heads) {
            return bad("d_model must be divisible by n_heads");
        }
        if self.aggregation == Aggregation::Additive(0) {
            return bad("at least one aggregation head is required");
        }
        Ok(())
    }

    /// Parameter names and shapes in storage order.
    pub fn layout(&self) -> Vec<(String, [usize; 2])> {
        let (d, f, h) = (self.d_model, self.ff_dim(), self.d_model / 2);
        let mut out = vec![
            ("input.w".to_string(), [self.n_features, d]),
            ("input.b".to_string(), [1, d]),
        ];
        for l in 0..self.n_layers {
            let p = |s: &str| format!("layer{l}.{s}");
            for (name, shape) in [
                ("q.w", [d, d]),
                ("q.b", [1, d]),
                ("k.w", [d, d]),
                ("v.w", [d, d]),
                ("v.b", [1, d]),
                ("o.w", [d, d]),
                ("o.b", [1, d]),
                ("norm1.scale", [1, d]),
                ("norm1.shift", [1, d]),
                ("ff1.w", [d, f]),
                ("ff1.b", [1, f]),
                ("ff2.w", [f, d]),
                ("ff2.b", [1, d]),
                ("norm2.scale", [1, d]),
                ("norm2.shift", [1, d]),
            ] {
                out.push((p(name), shape));
            }
        }
        let mixed_in = match self.aggregation {
            Aggregation::Additive(g) => {
                for k in 0..g {
                    let p = |s: &str| format!("agg{k}.{s}");
                    out.push((p("hidden.w"), [d, h]));
                    out.push((p("hidden.b"), [1, h]));
                    out.push((p("score.w"), [h, 1]));
                }
                g * d
            }
            Aggregation::Cls => {
                out.push(("cls.token".into(), [1, d]));
                d
            }
        };
        out.push(("mix.w".into(), [mixed_in, d]));
        out.push(("mix.b".into(), [1, d]));
        out.push(("head1.w".into(), [d, d]));
        out.push(("head1.b".into(), [1, d]));
        out.push(("head2.w".into(), [d, h]));
        out.push(("head2.b".into(), [1, h]));
        out.push(("out.w".into(), [h, 1]));
        out.push(("out.b".into(), [1, 1]));
        out
    }
}

/// `P[pos, 2i] = sin(pos / 10000^(2i/d))`, `P[pos, 2i+1] = cos(...)`.
pub fn positional_encoding(n_positions: usize, d_model: usize) -> Tensor {
    let mut data = vec![0.0; n_positions * d_model];
    for pos in 0..n_positions {
        for i in (0..d_model).step_by(2) {
            let angle = pos as f64 / 10000f64.powf(i as f64 / d_model as f64);
            data[pos * d_model + i] = angle.sin();
            if i + 1 < d_model {
                data[pos * d_model + i + 1] = angle.cos();
            }
        }
    }
    Tensor::from_rows(n_positions, d_model, data).expect("sized above")
}

#[derive(Debug, Clone, PartialEq)]
pub struct ForwardOutput {
    pub prob: f64,
    pub logit: f64,
    /// One distribution over time buckets per aggregation head; empty for
    /// the summary-token variant.
    pub attention: Vec<Vec<f64>>,
}

/// Intermediate activations exposed for inspection.
#[derive(Debug, Clone, PartialEq)]
pub struct ForwardTrace {
    pub output: ForwardOutput,
    /// Encoder output, `T x d_model`.
    pub encoded: Tensor,
    /// Context vector after the mixer, `1 x d_model`.
    pub context: Tensor,
}

struct Graph {
    logit: Var,
    prob: Var,
    attention: Vec<Var>,
    encoded: Var,
    context: Var,
}

/// Dropout masks drawn during a training forward pass.
pub struct Dropout<'a> {
    pub rate: f64,
    pub rng: &'a mut ChaCha8Rng,
}

impl Dropout<'_> {
    fn mask(&mut self, len: usize) -> Vec<f64> {
        let keep = 1.0 / (1.0 - self.rate);
        (0..len)
            .map(|_| {
                if self.rng.gen::<f64>() < self.rate {
                    0.0
                } else {
                    keep
                }
            })
            .collect()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ModelParams {
    pub config: ModelConfig,
    pub tensors: Vec<Tensor>,
    positions: Tensor,
}

impl ModelParams {
    /// Glorot-uniform weights, zero biases, unit norm scales.
    pub fn init(config: ModelConfig, seed: u64) -> Result<Self, ModelError> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let tensors = config
            .layout()
            .into_iter()
            .map(|(name, [r, c])| {
                if name.ends_with(".scale") {
                    Tensor::filled(r, c, 1.0)
                } else if name.ends_with(".w") || name == "cls.token" {
                    Tensor::glorot(r, c, &mut rng)
                } else {
                    Tensor::zeros(r, c)
                }
            })
            .collect();
        Self::from_tensors(config, tensors)
    }

    pub fn from_tensors(config: ModelConfig, tensors: Vec<Tensor>) -> Result<Self, ModelError> {
        config.validate()?;
        let layout = config.layout();
        if layout.len() != tensors.len() {
            return Err(ModelError::InvalidConfig(format!(
                "expected {} tensors, got {}",
                layout.len(),
                tensors.len()
            )));
        }
        for ((name, shape), t) in layout.iter().zip(&tensors) {
            if t.shape() != shape {
                return Err(ModelError::InvalidConfig(format!(
                    "{name} has shape {:?}, expected {shape:?}",
                    t.shape()
                )));
            }
        }
        let rows = config.n_buckets + usize::from(config.aggregation == Aggregation::Cls);
        let positions = positional_encoding(rows, config.d_model);
        Ok(ModelParams {
            config,
            tensors,
            positions,
        })
    }

    pub fn names(&self) -> Vec<String> {
        self.config.layout().into_iter().map(|(n, _)| n).collect()
    }

    pub fn n_scalars(&self) -> usize {
        self.tensors.iter().map(Tensor::len).sum()
    }

    pub fn tensor(&self, name: &str) -> Option<&Tensor> {
        let i = self.names().iter().position(|n| n == name)?;
        Some(&self.tensors[i])
    }

    pub fn tensor_mut(&mut self, name: &str) -> Option<&mut Tensor> {
        let i = self.names().iter().position(|n| n == name)?;
        Some(&mut self.tensors[i])
    }

    fn check_input(&self, x: &Tensor) -> Result<(), ModelError> {
        let expected = [self.config.n_buckets, self.config.n_features];
        if x.shape() != expected {
            return Err(ModelError::ShapeMismatch {
                got: x.shape().to_vec(),
                expected: expected.to_vec(),
            });
        }
        Ok(())
    }

    fn build(
        &self,
        tape: &mut Tape,
        vars: &[Var],
        x: &Tensor,
        mut dropout: Option<&mut Dropout<'_>>,
    ) -> Result<Graph, ModelError> {
        self.check_input(x)?;
        let cfg = &self.config;
        let mut it = vars.iter().copied();
        let mut next = || it.next().expect("layout and vars agree");
        let x = tape.constant(x.clone());
        let (w_in, b_in) = (next(), next());
        let projected = tape.matmul(x, w_in)?;
        let mut h = tape.add(projected, b_in)?;
        if cfg.aggregation == Aggregation::Cls {
            // the token is stored after the encoder layers
            let token = vars[2 + LAYER_TENSORS * cfg.n_layers];
            h = tape.concat_rows(&[token, h])?;
        }
        let pos = tape.constant(self.positions.clone());
        h = tape.add(h, pos)?;

        let dk = cfg.d_model / cfg.n_heads;
        let scale = 1.0 / (dk as f64).sqrt();
        for _ in 0..cfg.n_layers {
            let (qw, qb, kw, vw, vb, ow, ob) =
                (next(), next(), next(), next(), next(), next(), next());
            let (n1g, n1b) = (next(), next());
            let (f1w, f1b, f2w, f2b) = (next(), next(), next(), next());
            let (n2g, n2b) = (next(), next());

            let q = affine(tape, h, qw, qb)?;
            // A key bias would shift every score in a row equally.
            let k = tape.matmul(h, kw)?;
            let v = affine(tape, h, vw, vb)?;
            let mut heads = Vec::with_capacity(cfg.n_heads);
            for head in 0..cfg.n_heads {
                let qh = tape.slice_cols(q, head * dk, dk)?;
                let kh = tape.slice_cols(k, head * dk, dk)?;
                let vh = tape.slice_cols(v, head * dk, dk)?;
                let scores = tape.matmul_nt(qh, kh)?;
                let scores = tape.scale(scores, scale);
                let weights = tape.softmax_rows(scores);
                heads.push(tape.matmul(weights, vh)?);
            }
            let joined = tape.concat_cols(&heads)?;
            let mut attended = affine(tape, joined, ow, ob)?;
            if let Some(d) = dropout.as_deref_mut() {
                let mask = d.mask(tape.value(attended).len());
                attended = tape.dropout(attended, mask)?;
            }
            let res = tape.add(h, attended)?;
            h = tape.layer_norm(res, n1g, n1b)?;

            let inner = affine(tape, h, f1w, f1b)?;
            let inner = tape.relu(inner);
            let mut ff = affine(tape, inner, f2w, f2b)?;
            if let Some(d) = dropout.as_deref_mut() {
                let mask = d.mask(tape.value(ff).len());
                ff = tape.dropout(ff, mask)?;
            }
            let res = tape.add(h, ff)?;
            h = tape.layer_norm(res, n2g, n2b)?;
        }
        let encoded = h;

        let mut attention = Vec::new();
        let pooled = match cfg.aggregation {
            Aggregation::Additive(g) => {
                let mut contexts = Vec::with_capacity(g);
                for _ in 0..g {
                    let (hw, hb, sw) = (next(), next(), next());
                    let hidden = affine(tape, encoded, hw, hb)?;
                    let hidden = tape.relu(hidden);
                    let scores = tape.matmul(hidden, sw)?;
                    let scores = tape.transpose(scores);
                    let a = tape.softmax_rows(scores);
                    attention.push(a);
                    contexts.push(tape.matmul(a, encoded)?);
                }
                tape.concat_cols(&contexts)?
            }
            Aggregation::Cls => {
                let _token = next();
                tape.slice_rows(encoded, 0, 1)?
            }
        };
        let (mw, mb) = (next(), next());
        let context = affine(tape, pooled, mw, mb)?;
        let (h1w, h1b, h2w, h2b, ow, ob) = (next(), next(), next(), next(), next(), next());
        let z = affine(tape, context, h1w, h1b)?;
        let z = tape.relu(z);
        let z = affine(tape, z, h2w, h2b)?;
        let z = tape.relu(z);
        let logit = affine(tape, z, ow, ob)?;
        let prob = tape.sigmoid(logit);
        Ok(Graph {
            logit,
            prob,
            attention,
            encoded,
            context,
        })
    }

    fn run(&self, x: &Tensor) -> Result<(Tape, Graph), ModelError> {
        let mut tape = Tape::new();
        let vars: Vec<Var> = self
            .tensors
            .iter()
            .map(|t| tape.constant(t.clone()))
            .collect();
        let g = self.build(&mut tape, &vars, x, None)?;
        Ok((tape, g))
    }

    /// Inference pass with dropout disabled.
    pub fn forward(&self, x: &Tensor) -> Result<ForwardOutput, ModelError> {
        let (tape, g) = self.run(x)?;
        Ok(output(&tape, &g))
    }

    pub fn trace(&self, x: &Tensor) -> Result<ForwardTrace, ModelError> {
        let (tape, g) = self.run(x)?;
        Ok(ForwardTrace {
            output: output(&tape, &g),
            encoded: tape.value(g.encoded).clone(),
            context: tape.value(g.context).clone(),
        })
    }

    /// Loss of one example and its gradient for every tensor, in layout
    /// order.
    pub fn example_grad(
        &self,
        x: &Tensor,
        y: f64,
        kind: LossKind,
        dropout: Option<&mut Dropout<'_>>,
    ) -> Result<(f64, Vec<Tensor>), ModelError> {
        let mut tape = Tape::new();
        let vars: Vec<Var> = self.tensors.iter().map(|t| tape.param(t.clone())).collect();
        let g = self.build(&mut tape, &vars, x, dropout)?;
        let loss = tape.loss(g.prob, y, kind)?;
        let value = tape.value(loss).item();
        tape.backward(loss)?;
        let grads = self
            .tensors
            .iter()
            .zip(&vars)
            .map(|(t, v)| {
                tape.grad(*v)
                    .cloned()
                    .unwrap_or_else(|| Tensor::zeros(t.rows(), t.cols()))
            })
            .collect();
        Ok((value, grads))
    }

    /// Mean loss over `batch` and its gradient for every tensor, in layout
    /// order. Examples are differentiated one at a time and summed in input
    /// order.
    pub fn loss_and_grad(
        &self,
        batch: &[(&Tensor, f64)],
        kind: LossKind,
        mut dropout: Option<&mut Dropout<'_>>,
    ) -> Result<(f64, Vec<Tensor>), ModelError> {
        let mut parts = Vec::with_capacity(batch.len());
        for (x, y) in batch {
            parts.push(self.example_grad(x, *y, kind, dropout.as_deref_mut())?);
        }
        Ok(self.reduce_grads(&parts))
    }

    /// Mean of per-example `(loss, gradients)` pairs, summed in slice order.
    pub fn reduce_grads(&self, parts: &[(f64, Vec<Tensor>)]) -> (f64, Vec<Tensor>) {
        let mut grads: Vec<Tensor> = self
            .tensors
            .iter()
            .map(|t| Tensor::zeros(t.rows(), t.cols()))
            .collect();
        let share = 1.0 / parts.len().max(1) as f64;
        let mut total = 0.0;
        for (loss, g) in parts {
            total += loss;
            for (acc, gr) in grads.iter_mut().zip(g) {
                for (a, b) in acc.data_mut().iter_mut().zip(gr.data()) {
                    *a += share * b;
                }
            }
        }
        (total * share, grads)
    }

    /// Mean loss without gradients.
    pub fn loss(&self, batch: &[(&Tensor, f64)], kind: LossKind) -> Result<f64, ModelError> {
        let mut total = 0.0;
        for (x, y) in batch {
            let p = self.forward(x)?.prob;
            total += crate::autodiff::loss_value(p, *y, kind);
        }
        Ok(total / batch.len().max(1) as f64)
    }
}

fn affine(tape: &mut Tape, x: Var, w: Var, b: Var) -> Result<Var, AutodiffError> {
    let y = tape.matmul(x, w)?;
    tape.add(y, b)
}

fn output(tape: &Tape, g: &Graph) -> ForwardOutput {
    ForwardOutput {
        prob: tape.value(g.prob).item(),
        logit: tape.value(g.logit).item(),
        attention: g
            .attention
            .iter()
            .map(|a| tape.value(*a).data().to_vec())
            .collect(),
    }
}

use super::tensor::{matmul_acc, matmul_nt_acc, matmul_tn_acc};
use super::{AutodiffError, Tensor};

/// Handle to a node on a [`Tape`].
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Var(usize);

/// Clamp range for probabilities entering a loss.
pub const PROB_EPS: f64 = 1e-12;

/// Variance floor inside layer normalisation.
pub const LAYER_NORM_EPS: f64 = 1e-9;

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum LossKind {
    /// `-alpha_t (1 - p_t)^gamma ln p_t`
    Focal { gamma: f64, alpha: f64 },
    /// `-ln p_t`
    Bce,
}

#[derive(Debug)]
enum Op {
    Leaf,
    MatMul(Var, Var),
    MatMulNt(Var, Var),
    Add(Var, Var),
    Mul(Var, Var),
    Scale(Var, f64),
    Relu(Var),
    Sigmoid(Var),
    SoftmaxRows(Var),
    LayerNorm {
        x: Var,
        gamma: Var,
        beta: Var,
        normed: Vec<f64>,
        inv_std: Vec<f64>,
    },
    ConcatCols(Vec<Var>),
    ConcatRows(Vec<Var>),
    SliceCols(Var, usize),
    SliceRows(Var, usize),
    Transpose(Var),
    MeanRows(Var),
    Dropout(Var, Vec<f64>),
    Loss {
        p: Var,
        target: f64,
        kind: LossKind,
    },
    MeanOf(Vec<Var>),
}

struct Node {
    value: Tensor,
    op: Op,
    needs_grad: bool,
}

/// Reverse-mode tape. Build a graph with the op methods, call
/// [`Tape::backward`] once on a scalar, then read gradients with
/// [`Tape::grad`]. [`Tape::reset`] clears the tape for reuse.
#[derive(Default)]
pub struct Tape {
    nodes: Vec<Node>,
    grads: Vec<Option<Tensor>>,
    consumed: bool,
}

fn mismatch(op: &'static str, a: &Tensor, b: &Tensor) -> AutodiffError {
    AutodiffError::ShapeMismatch {
        op,
        left: a.shape().to_vec(),
        right: b.shape().to_vec(),
    }
}

impl Tape {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn reset(&mut self) {
        self.nodes.clear();
        self.grads.clear();
        self.consumed = false;
    }

    fn push(&mut self, value: Tensor, op: Op, needs_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op,
            needs_grad,
        });
        Var(self.nodes.len() - 1)
    }

    fn needs(&self, v: Var) -> bool {
        self.nodes[v.0].needs_grad
    }

    /// Input that receives no gradient.
    pub fn constant(&mut self, t: Tensor) -> Var {
        self.push(t, Op::Leaf, false)
    }

    /// Trainable leaf.
    pub fn param(&mut self, t: Tensor) -> Var {
        self.push(t, Op::Leaf, true)
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn grad(&self, v: Var) -> Option<&Tensor> {
        self.grads.get(v.0).and_then(Option::as_ref)
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var, AutodiffError> {
        let value = self.value(a).matmul(self.value(b))?;
        let ng = self.needs(a) || self.needs(b);
        Ok(self.push(value, Op::MatMul(a, b), ng))
    }

    /// `a * b^T`
    pub fn matmul_nt(&mut self, a: Var, b: Var) -> Result<Var, AutodiffError> {
        let (ta, tb) = (self.value(a), self.value(b));
        if ta.cols() != tb.cols() {
            return Err(mismatch("matmul_nt", ta, tb));
        }
        let (m, k, n) = (ta.rows(), ta.cols(), tb.rows());
        let mut out = vec![0.0; m * n];
        matmul_nt_acc(ta.data(), tb.data(), &mut out, m, k, n);
        let value = Tensor::from_rows(m, n, out)?;
        let ng = self.needs(a) || self.needs(b);
        Ok(self.push(value, Op::MatMulNt(a, b), ng))
    }

    fn broadcast_check(&self, op: &'static str, a: Var, b: Var) -> Result<(), AutodiffError> {
        let (ta, tb) = (self.value(a), self.value(b));
        let ok = ta.same_shape(tb) || (tb.rows() == 1 && tb.cols() == ta.cols());
        if ok {
            Ok(())
        } else {
            Err(mismatch(op, ta, tb))
        }
    }

    /// Elementwise sum; `b` may be a single row broadcast over `a`'s rows.
    pub fn add(&mut self, a: Var, b: Var) -> Result<Var, AutodiffError> {
        self.broadcast_check("add", a, b)?;
        let (ta, tb) = (self.value(a), self.value(b));
        let c = ta.cols();
        let bd = tb.data();
        let mut value = ta.clone();
        for (i, v) in value.data_mut().iter_mut().enumerate() {
            *v += bd[i % bd.len().max(1)];
        }
        debug_assert!(bd.len() == c || bd.len() == ta.len());
        let ng = self.needs(a) || self.needs(b);
        Ok(self.push(value, Op::Add(a, b), ng))
    }

    /// Elementwise product; `b` may be a single row broadcast over `a`'s rows.
    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var, AutodiffError> {
        self.broadcast_check("mul", a, b)?;
        let (ta, tb) = (self.value(a), self.value(b));
        let bd = tb.data();
        let mut value = ta.clone();
        for (i, v) in value.data_mut().iter_mut().enumerate() {
            *v *= bd[i % bd.len()];
        }
        let ng = self.needs(a) || self.needs(b);
        Ok(self.push(value, Op::Mul(a, b), ng))
    }

    pub fn scale(&mut self, a: Var, s: f64) -> Var {
        let value = self.value(a).map(|v| v * s);
        let ng = self.needs(a);
        self.push(value, Op::Scale(a, s), ng)
    }

    pub fn relu(&mut self, a: Var) -> Var {
        let value = self.value(a).map(|v| v.max(0.0));
        let ng = self.needs(a);
        self.push(value, Op::Relu(a), ng)
    }

    pub fn sigmoid(&mut self, a: Var) -> Var {
        let value = self.value(a).map(sigmoid);
        let ng = self.needs(a);
        self.push(value, Op::Sigmoid(a), ng)
    }

    pub fn softmax_rows(&mut self, a: Var) -> Var {
        let t = self.value(a);
        let c = t.cols();
        let mut out = t.data().to_vec();
        for row in out.chunks_mut(c) {
            softmax_in_place(row);
        }
        let value = Tensor::from_rows(t.rows(), c, out).expect("shape preserved");
        let ng = self.needs(a);
        self.push(value, Op::SoftmaxRows(a), ng)
    }

    /// Row-wise normalisation followed by `gamma * x_hat + beta`, both `1 x cols`.
    pub fn layer_norm(&mut self, x: Var, gamma: Var, beta: Var) -> Result<Var, AutodiffError> {
        let (tx, tg, tb) = (self.value(x), self.value(gamma), self.value(beta));
        let c = tx.cols();
        if tg.len() != c || tb.len() != c {
            return Err(mismatch("layer_norm", tx, tg));
        }
        let mut normed = Vec::with_capacity(tx.len());
        let mut inv_std = Vec::with_capacity(tx.rows());
        let mut out = Vec::with_capacity(tx.len());
        for row in tx.data().chunks(c) {
            let mean = row.iter().sum::<f64>() / c as f64;
            let var = row.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / c as f64;
            let inv = 1.0 / (var + LAYER_NORM_EPS).sqrt();
            inv_std.push(inv);
            for (j, v) in row.iter().enumerate() {
                let n = (v - mean) * inv;
                normed.push(n);
                out.push(n * tg.data()[j] + tb.data()[j]);
            }
        }
        let value = Tensor::from_rows(tx.rows(), c, out)?;
        let ng = self.needs(x) || self.needs(gamma) || self.needs(beta);
        Ok(self.push(
            value,
            Op::LayerNorm {
                x,
                gamma,
                beta,
                normed,
                inv_std,
            },
            ng,
        ))
    }

    pub fn concat_cols(&mut self, parts: &[Var]) -> Result<Var, AutodiffError> {
        let rows = self.value(parts[0]).rows();
        let mut cols = 0;
        for &p in parts {
            let t = self.value(p);
            if t.rows() != rows {
                return Err(mismatch("concat_cols", self.value(parts[0]), t));
            }
            cols += t.cols();
        }
        let mut out = vec![0.0; rows * cols];
        let mut off = 0;
        for &p in parts {
            let t = self.value(p);
            let pc = t.cols();
            for r in 0..rows {
                out[r * cols + off..r * cols + off + pc].copy_from_slice(t.row(r));
            }
            off += pc;
        }
        let value = Tensor::from_rows(rows, cols, out)?;
        let ng = parts.iter().any(|&p| self.needs(p));
        Ok(self.push(value, Op::ConcatCols(parts.to_vec()), ng))
    }

    pub fn concat_rows(&mut self, parts: &[Var]) -> Result<Var, AutodiffError> {
        let cols = self.value(parts[0]).cols();
        let mut out = Vec::new();
        let mut rows = 0;
        for &p in parts {
            let t = self.value(p);
            if t.cols() != cols {
                return Err(mismatch("concat_rows", self.value(parts[0]), t));
            }
            out.extend_from_slice(t.data());
            rows += t.rows();
        }
        let value = Tensor::from_rows(rows, cols, out)?;
        let ng = parts.iter().any(|&p| self.needs(p));
        Ok(self.push(value, Op::ConcatRows(parts.to_vec()), ng))
    }

    pub fn slice_cols(&mut self, a: Var, start: usize, len: usize) -> Result<Var, AutodiffError> {
        let t = self.value(a);
        if start + len > t.cols() {
            return Err(AutodiffError::ShapeMismatch {
                op: "slice_cols",
                left: t.shape().to_vec(),
                right: vec![start, len],
            });
        }
        let mut out = Vec::with_capacity(t.rows() * len);
        for r in 0..t.rows() {
            out.extend_from_slice(&t.row(r)[start..start + len]);
        }
        let value = Tensor::from_rows(t.rows(), len, out)?;
        let ng = self.needs(a);
        Ok(self.push(value, Op::SliceCols(a, start), ng))
    }

    pub fn slice_rows(&mut self, a: Var, start: usize, len: usize) -> Result<Var, AutodiffError> {
        let t = self.value(a);
        if start + len > t.rows() {
            return Err(AutodiffError::ShapeMismatch {
                op: "slice_rows",
                left: t.shape().to_vec(),
                right: vec![start, len],
            });
        }
        let c = t.cols();
        let value = Tensor::from_rows(len, c, t.data()[start * c..(start + len) * c].to_vec())?;
        let ng = self.needs(a);
        Ok(self.push(value, Op::SliceRows(a, start), ng))
    }

    pub fn transpose(&mut self, a: Var) -> Var {
        let value = self.value(a).transpose();
        let ng = self.needs(a);
        self.push(value, Op::Transpose(a), ng)
    }

    /// Column means, `1 x cols`.
    pub fn mean_rows(&mut self, a: Var) -> Var {
        let t = self.value(a);
        let (r, c) = (t.rows(), t.cols());
        let mut out = vec![0.0; c];
        for row in t.data().chunks(c) {
            for (o, v) in out.iter_mut().zip(row) {
                *o += v;
            }
        }
        out.iter_mut().for_each(|v| *v /= r as f64);
        let value = Tensor::from_rows(1, c, out).expect("row vector");
        let ng = self.needs(a);
        self.push(value, Op::MeanRows(a), ng)
    }

    /// Inverted dropout with a precomputed mask (entries `0` or `1/(1-rate)`).
    pub fn dropout(&mut self, a: Var, mask: Vec<f64>) -> Result<Var, AutodiffError> {
        let t = self.value(a);
        if mask.len() != t.len() {
            return Err(AutodiffError::ShapeMismatch {
                op: "dropout",
                left: t.shape().to_vec(),
                right: vec![mask.len()],
            });
        }
        let mut value = t.clone();
        for (v, m) in value.data_mut().iter_mut().zip(&mask) {
            *v *= m;
        }
        let ng = self.needs(a);
        Ok(self.push(value, Op::Dropout(a, mask), ng))
    }

    /// Per-example loss on a `1 x 1` probability. `target` is 0 or 1.
    pub fn loss(&mut self, p: Var, target: f64, kind: LossKind) -> Result<Var, AutodiffError> {
        let t = self.value(p);
        if t.len() != 1 {
            return Err(AutodiffError::NotScalar(t.shape().to_vec()));
        }
        let value = Tensor::scalar(loss_value(t.item(), target, kind));
        let ng = self.needs(p);
        Ok(self.push(value, Op::Loss { p, target, kind }, ng))
    }

    /// Mean of scalar nodes.
    pub fn mean_of(&mut self, items: &[Var]) -> Result<Var, AutodiffError> {
        let mut s = 0.0;
        for &v in items {
            let t = self.value(v);
            if t.len() != 1 {
                return Err(AutodiffError::NotScalar(t.shape().to_vec()));
            }
            s += t.item();
        }
        let value = Tensor::scalar(s / items.len() as f64);
        let ng = items.iter().any(|&v| self.needs(v));
        Ok(self.push(value, Op::MeanOf(items.to_vec()), ng))
    }

    /// Reverse sweep from a scalar. Errors if called twice without [`reset`](Self::reset).
    pub fn backward(&mut self, loss: Var) -> Result<(), AutodiffError> {
        if self.consumed {
            return Err(AutodiffError::GraphReused);
        }
        let lt = self.value(loss);
        if lt.len() != 1 {
            return Err(AutodiffError::NotScalar(lt.shape().to_vec()));
        }
        self.consumed = true;
        let n = self.nodes.len();
        let mut grads: Vec<Option<Tensor>> = (0..n).map(|_| None).collect();
        grads[loss.0] = Some(Tensor::scalar(1.0));
        for i in (0..=loss.0).rev() {
            if !self.nodes[i].needs_grad {
                continue;
            }
            let Some(g) = grads[i].take() else { continue };
            self.propagate(i, &g, &mut grads);
            grads[i] = Some(g);
        }
        self.grads = grads;
        Ok(())
    }

    fn accumulate(&self, grads: &mut [Option<Tensor>], v: Var, g: Tensor) {
        if !self.nodes[v.0].needs_grad {
            return;
        }
        match &mut grads[v.0] {
            Some(existing) => existing.add_assign(&g),
            slot => *slot = Some(g),
        }
    }

    /// Reduce a gradient to a broadcast operand's shape.
    fn reduce_rows(g: &Tensor, target: &Tensor) -> Tensor {
        if g.same_shape(target) {
            return g.clone();
        }
        let c = target.cols();
        let mut out = vec![0.0; c];
        for row in g.data().chunks(c) {
            for (o, v) in out.iter_mut().zip(row) {
                *o += v;
            }
        }
        Tensor::from_rows(1, c, out).expect("row vector")
    }

    fn propagate(&self, i: usize, g: &Tensor, grads: &mut [Option<Tensor>]) {
        let node = &self.nodes[i];
        match &node.op {
            Op::Leaf => {}
            Op::MatMul(a, b) => {
                let (ta, tb) = (self.value(*a), self.value(*b));
                let (m, k, n) = (ta.rows(), ta.cols(), tb.cols());
                if self.needs(*a) {
                    let mut da = vec![0.0; m * k];
                    matmul_nt_acc(g.data(), tb.data(), &mut da, m, n, k);
                    self.accumulate(grads, *a, Tensor::from_rows(m, k, da).unwrap());
                }
                if self.needs(*b) {
                    let mut db = vec![0.0; k * n];
                    matmul_tn_acc(ta.data(), g.data(), &mut db, k, m, n);
                    self.accumulate(grads, *b, Tensor::from_rows(k, n, db).unwrap());
                }
            }
            Op::MatMulNt(a, b) => {
                // c = a b^T, a: m x k, b: n x k
                let (ta, tb) = (self.value(*a), self.value(*b));
                let (m, k, n) = (ta.rows(), ta.cols(), tb.rows());
                if self.needs(*a) {
                    let mut da = vec![0.0; m * k];
                    matmul_acc(g.data(), tb.data(), &mut da, m, n, k);
                    self.accumulate(grads, *a, Tensor::from_rows(m, k, da).unwrap());
                }
                if self.needs(*b) {
                    let mut db = vec![0.0; n * k];
                    matmul_tn_acc(g.data(), ta.data(), &mut db, n, m, k);
                    self.accumulate(grads, *b, Tensor::from_rows(n, k, db).unwrap());
                }
            }
            Op::Add(a, b) => {
                self.accumulate(grads, *a, g.clone());
                if self.needs(*b) {
                    let gb = Self::reduce_rows(g, self.value(*b));
                    self.accumulate(grads, *b, gb);
                }
            }
            Op::Mul(a, b) => {
                let (ta, tb) = (self.value(*a), self.value(*b));
                if self.needs(*a) {
                    let bd = tb.data();
                    let mut ga = g.clone();
                    for (k, v) in ga.data_mut().iter_mut().enumerate() {
                        *v *= bd[k % bd.len()];
                    }
                    self.accumulate(grads, *a, ga);
                }
                if self.needs(*b) {
                    let mut prod = g.clone();
                    for (v, x) in prod.data_mut().iter_mut().zip(ta.data()) {
                        *v *= x;
                    }
                    let gb = Self::reduce_rows(&prod, tb);
                    self.accumulate(grads, *b, gb);
                }
            }
            Op::Scale(a, s) => self.accumulate(grads, *a, g.map(|v| v * s)),
            Op::Relu(a) => {
                let x = self.value(*a);
                let mut ga = g.clone();
                for (v, xv) in ga.data_mut().iter_mut().zip(x.data()) {
                    if *xv <= 0.0 {
                        *v = 0.0;
                    }
                }
                self.accumulate(grads, *a, ga);
            }
            Op::Sigmoid(a) => {
                let mut ga = g.clone();
                for (v, s) in ga.data_mut().iter_mut().zip(node.value.data()) {
                    *v *= s * (1.0 - s);
                }
                self.accumulate(grads, *a, ga);
            }
            Op::SoftmaxRows(a) => {
                let y = &node.value;
                let c = y.cols();
                let mut ga = g.clone();
                for (grow, yrow) in ga.data_mut().chunks_mut(c).zip(y.data().chunks(c)) {
                    let dot: f64 = grow.iter().zip(yrow).map(|(a, b)| a * b).sum();
                    for (gv, yv) in grow.iter_mut().zip(yrow) {
                        *gv = yv * (*gv - dot);
                    }
                }
                self.accumulate(grads, *a, ga);
            }
            Op::LayerNorm {
                x,
                gamma,
                beta,
                normed,
                inv_std,
            } => {
                let c = g.cols();
                let gd = self.value(*gamma).data();
                if self.needs(*gamma) {
                    let mut dg = vec![0.0; c];
                    for (grow, nrow) in g.data().chunks(c).zip(normed.chunks(c)) {
                        for j in 0..c {
                            dg[j] += grow[j] * nrow[j];
                        }
                    }
                    self.accumulate(grads, *gamma, Tensor::from_rows(1, c, dg).unwrap());
                }
                if self.needs(*beta) {
                    let db = Self::reduce_rows(g, self.value(*beta));
                    self.accumulate(grads, *beta, db);
                }
                if self.needs(*x) {
                    let mut dx = Vec::with_capacity(g.len());
                    let nf = c as f64;
                    for ((grow, nrow), inv) in g.data().chunks(c).zip(normed.chunks(c)).zip(inv_std)
                    {
                        let dxhat: Vec<f64> = grow.iter().zip(gd).map(|(a, b)| a * b).collect();
                        let sum: f64 = dxhat.iter().sum();
                        let dot: f64 = dxhat.iter().zip(nrow).map(|(a, b)| a * b).sum();
                        for j in 0..c {
                            dx.push(inv / nf * (nf * dxhat[j] - sum - nrow[j] * dot));
                        }
                    }
                    self.accumulate(grads, *x, Tensor::from_rows(g.rows(), c, dx).unwrap());
                }
            }
            Op::ConcatCols(parts) => {
                let cols = g.cols();
                let mut off = 0;
                for &p in parts {
                    let pc = self.value(p).cols();
                    if self.needs(p) {
                        let mut out = Vec::with_capacity(g.rows() * pc);
                        for r in 0..g.rows() {
                            out.extend_from_slice(&g.data()[r * cols + off..r * cols + off + pc]);
                        }
                        self.accumulate(grads, p, Tensor::from_rows(g.rows(), pc, out).unwrap());
                    }
                    off += pc;
                }
            }
            Op::ConcatRows(parts) => {
                let c = g.cols();
                let mut off = 0;
                for &p in parts {
                    let pr = self.value(p).rows();
                    if self.needs(p) {
                        let d = g.data()[off * c..(off + pr) * c].to_vec();
                        self.accumulate(grads, p, Tensor::from_rows(pr, c, d).unwrap());
                    }
                    off += pr;
                }
            }
            Op::SliceCols(a, start) => {
                let t = self.value(*a);
                let (rows, cols, len) = (t.rows(), t.cols(), g.cols());
                let mut out = vec![0.0; rows * cols];
                for r in 0..rows {
                    out[r * cols + start..r * cols + start + len].copy_from_slice(g.row(r));
                }
                self.accumulate(grads, *a, Tensor::from_rows(rows, cols, out).unwrap());
            }
            Op::SliceRows(a, start) => {
                let t = self.value(*a);
                let c = t.cols();
                let mut out = vec![0.0; t.len()];
                out[start * c..start * c + g.len()].copy_from_slice(g.data());
                self.accumulate(grads, *a, Tensor::from_rows(t.rows(), c, out).unwrap());
            }
            Op::Transpose(a) => self.accumulate(grads, *a, g.transpose()),
            Op::MeanRows(a) => {
                let t = self.value(*a);
                let r = t.rows() as f64;
                let mut out = Vec::with_capacity(t.len());
                for _ in 0..t.rows() {
                    out.extend(g.data().iter().map(|v| v / r));
                }
                self.accumulate(
                    grads,
                    *a,
                    Tensor::from_rows(t.rows(), t.cols(), out).unwrap(),
                );
            }
            Op::Dropout(a, mask) => {
                let mut ga = g.clone();
                for (v, m) in ga.data_mut().iter_mut().zip(mask) {
                    *v *= m;
                }
                self.accumulate(grads, *a, ga);
            }
            Op::Loss { p, target, kind } => {
                let d = loss_grad(self.value(*p).item(), *target, *kind);
                self.accumulate(grads, *p, Tensor::scalar(d * g.item()));
            }
            Op::MeanOf(items) => {
                let share = g.item() / items.len() as f64;
                for &v in items {
                    self.accumulate(grads, v, Tensor::scalar(share));
                }
            }
        }
    }
}

pub fn sigmoid(z: f64) -> f64 {
    if z >= 0.0 {
        1.0 / (1.0 + (-z).exp())
    } else {
        let e = z.exp();
        e / (1.0 + e)
    }
}

pub fn logit(p: f64) -> f64 {
    (p / (1.0 - p)).ln()
}

fn softmax_in_place(row: &mut [f64]) {
    let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let mut sum = 0.0;
    for v in row.iter_mut() {
        *v = (*v - max).exp();
        sum += *v;
    }
    for v in row.iter_mut() {
        *v /= sum;
    }
}

fn clamp_prob(p: f64) -> f64 {
    p.clamp(PROB_EPS, 1.0 - PROB_EPS)
}

/// Focal or cross-entropy loss for a single probability and 0/1 target.
pub fn loss_value(p: f64, target: f64, kind: LossKind) -> f64 {
    let p = clamp_prob(p);
    let pt = if target >= 0.5 { p } else { 1.0 - p };
    match kind {
        LossKind::Bce => -pt.ln(),
        LossKind::Focal { gamma, alpha } => {
            let at = if target >= 0.5 { alpha } else { 1.0 - alpha };
            -at * (1.0 - pt).powf(gamma) * pt.ln()
        }
    }
}

fn loss_grad(p: f64, target: f64, kind: LossKind) -> f64 {
    if !(PROB_EPS..=1.0 - PROB_EPS).contains(&p) {
        return 0.0;
    }
    let positive = target >= 0.5;
    let pt = if positive { p } else { 1.0 - p };
    let d_pt = match kind {
        LossKind::Bce => -1.0 / pt,
        LossKind::Focal { gamma, alpha } => {
            let at = if positive { alpha } else { 1.0 - alpha };
            let q = 1.0 - pt;
            let lead = if gamma == 0.0 {
                0.0
            } else {
                gamma * q.powf(gamma - 1.0) * pt.ln()
            };
            at * (lead - q.powf(gamma) / pt)
        }
    };
    if positive {
        d_pt
    } else {
        -d_pt
    }
}

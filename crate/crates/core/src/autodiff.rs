//! Reverse-mode differentiation over a fixed set of matrix ops.
//!
//! A [`Tape`] records every op as a [`Node`] in topological order. Values are
//! computed eagerly with the same [`Tensor`] routines a tape-free evaluation
//! would use, so forward results are bit-identical to direct evaluation.
//! [`Tape::backward`] walks the nodes once in reverse and accumulates
//! gradients into a [`Grads`] buffer indexed by parameter id.
//!
//! The Kalman fusion and the frequency-capped weights are single composite
//! nodes with hand-written adjoints.

use std::collections::BTreeMap;

use crate::error::{Error, Result};
use crate::numerics::{self, Tensor};

pub type ParamId = usize;

/// Handle to a node on a tape.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

/// Op tags accepted by [`forward`].
pub const SUPPORTED_OPS: &[&str] = &[
    "identity",
    "matmul",
    "matmul_bt",
    "transpose",
    "add",
    "add_row",
    "sub",
    "mul",
    "scale",
    "exp",
    "log",
    "sigmoid",
    "softplus",
    "relu",
    "clamp",
    "softmax_rows",
    "concat_cols",
    "concat_rows",
    "gather",
    "mean",
    "sum",
    "kf_fusion",
    "freq_weights",
    "bce_logits",
];

#[derive(Clone, Debug)]
pub enum Op {
    Leaf { param: Option<ParamId> },
    /// Row lookup straight from a parameter table that is not itself on the tape.
    GatherParam { param: ParamId, table_shape: Vec<usize>, rows: Vec<usize> },
    Gather(Var, Vec<usize>),
    MatMul(Var, Var),
    MatMulBt(Var, Var),
    Transpose(Var),
    Add(Var, Var),
    AddRow(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Scale(Var, f64),
    Exp(Var),
    Log(Var),
    Sigmoid(Var),
    Softplus(Var),
    Relu(Var),
    Clamp(Var, f64, f64),
    SoftmaxRows(Var),
    ConcatCols(Vec<Var>),
    ConcatRows(Vec<Var>),
    Mean(Var),
    Sum(Var),
    /// `(π μ + Σ p_t v_t) / (π + Σ p_t)` with mean `1 x d`, prior precision
    /// `1 x 1`, values `T x d` and precisions `1 x T`.
    KfFusion { mean: Var, prior_prec: Var, values: Var, precs: Var },
    /// `w_m = 1 / (1/s_m + σ'_m² / n_m)` from system precisions `s` and random sigmas `σ'`.
    FreqWeights { sys_prec: Var, rand_sigma: Var, counts: Vec<f64> },
    /// `softplus(z) - y z`, the binary cross-entropy of `sigmoid(z)` against `y`.
    BceLogits { logit: Var, label: f64 },
}

impl Op {
    pub fn tag(&self) -> &'static str {
        match self {
            Op::Leaf { .. } => "leaf",
            Op::GatherParam { .. } | Op::Gather(..) => "gather",
            Op::MatMul(..) => "matmul",
            Op::MatMulBt(..) => "matmul_bt",
            Op::Transpose(_) => "transpose",
            Op::Add(..) => "add",
            Op::AddRow(..) => "add_row",
            Op::Sub(..) => "sub",
            Op::Mul(..) => "mul",
            Op::Scale(..) => "scale",
            Op::Exp(_) => "exp",
            Op::Log(_) => "log",
            Op::Sigmoid(_) => "sigmoid",
            Op::Softplus(_) => "softplus",
            Op::Relu(_) => "relu",
            Op::Clamp(..) => "clamp",
            Op::SoftmaxRows(_) => "softmax_rows",
            Op::ConcatCols(_) => "concat_cols",
            Op::ConcatRows(_) => "concat_rows",
            Op::Mean(_) => "mean",
            Op::Sum(_) => "sum",
            Op::KfFusion { .. } => "kf_fusion",
            Op::FreqWeights { .. } => "freq_weights",
            Op::BceLogits { .. } => "bce_logits",
        }
    }

    pub fn parents(&self) -> Vec<Var> {
        match self {
            Op::Leaf { .. } | Op::GatherParam { .. } => vec![],
            Op::Gather(a, _)
            | Op::Transpose(a)
            | Op::Scale(a, _)
            | Op::Exp(a)
            | Op::Log(a)
            | Op::Sigmoid(a)
            | Op::Softplus(a)
            | Op::Relu(a)
            | Op::Clamp(a, ..)
            | Op::SoftmaxRows(a)
            | Op::Mean(a)
            | Op::Sum(a) => vec![*a],
            Op::MatMul(a, b)
            | Op::MatMulBt(a, b)
            | Op::Add(a, b)
            | Op::AddRow(a, b)
            | Op::Sub(a, b)
            | Op::Mul(a, b) => vec![*a, *b],
            Op::ConcatCols(v) | Op::ConcatRows(v) => v.clone(),
            Op::KfFusion { mean, prior_prec, values, precs } => vec![*mean, *prior_prec, *values, *precs],
            Op::FreqWeights { sys_prec, rand_sigma, .. } => vec![*sys_prec, *rand_sigma],
            Op::BceLogits { logit, .. } => vec![*logit],
        }
    }
}

#[derive(Clone, Debug)]
pub struct Node {
    pub op: Op,
    pub value: Tensor,
    /// Filled in by [`Tape::backward`].
    pub grad: Option<Tensor>,
}

/// Gradient buffer indexed by [`ParamId`].
#[derive(Clone, Debug, Default, PartialEq)]
pub struct Grads {
    slots: Vec<Option<Tensor>>,
}

impl Grads {
    pub fn new(n_params: usize) -> Self {
        Grads { slots: vec![None; n_params] }
    }

    pub fn get(&self, id: ParamId) -> Option<&Tensor> {
        self.slots.get(id).and_then(|s| s.as_ref())
    }

    pub fn len(&self) -> usize {
        self.slots.len()
    }

    pub fn is_empty(&self) -> bool {
        self.slots.is_empty()
    }

    fn slot(&mut self, id: ParamId, shape: &[usize]) -> &mut Tensor {
        if id >= self.slots.len() {
            self.slots.resize(id + 1, None);
        }
        self.slots[id].get_or_insert_with(|| Tensor::zeros(shape))
    }

    pub fn accumulate(&mut self, id: ParamId, g: &Tensor) -> Result<()> {
        self.slot(id, g.shape()).add_assign(g)
    }

    /// Elementwise sum, in place.
    pub fn merge(&mut self, other: &Grads) -> Result<()> {
        for (id, g) in other.slots.iter().enumerate() {
            if let Some(g) = g {
                self.accumulate(id, g)?;
            }
        }
        Ok(())
    }

    pub fn scale(&mut self, c: f64) {
        for g in self.slots.iter_mut().flatten() {
            for x in g.data_mut() {
                *x *= c;
            }
        }
    }
}

/// Records values as ops are applied; one tape per forward pass.
#[derive(Clone, Debug, Default)]
pub struct Tape {
    nodes: Vec<Node>,
    mac_scope: &'static str,
    macs: BTreeMap<&'static str, u64>,
}

fn bad_shape(what: &str, a: &Tensor, b: &Tensor) -> Error {
    Error::Shape(format!("{what}: {:?} vs {:?}", a.shape(), b.shape()))
}

impl Tape {
    pub fn new() -> Self {
        Tape {
            nodes: Vec::new(),
            mac_scope: "other",
            macs: BTreeMap::new(),
        }
    }

    pub fn nodes(&self) -> &[Node] {
        &self.nodes
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn grad(&self, v: Var) -> Option<&Tensor> {
        self.nodes[v.0].grad.as_ref()
    }

    /// Label subsequent multiply-accumulates with `scope`.
    pub fn set_mac_scope(&mut self, scope: &'static str) {
        self.mac_scope = scope;
    }

    /// Multiply-accumulate counts per scope.
    pub fn macs(&self) -> &BTreeMap<&'static str, u64> {
        &self.macs
    }

    pub fn total_macs(&self) -> u64 {
        self.macs.values().sum()
    }

    fn count_macs(&mut self, n: usize) {
        *self.macs.entry(self.mac_scope).or_insert(0) += n as u64;
    }

    fn push(&mut self, op: Op, value: Tensor) -> Var {
        self.nodes.push(Node { op, value, grad: None });
        Var(self.nodes.len() - 1)
    }

    /// Non-trainable input.
    pub fn constant(&mut self, value: Tensor) -> Var {
        self.push(Op::Leaf { param: None }, value)
    }

    /// Trainable leaf holding a copy of parameter `id`.
    pub fn param(&mut self, id: ParamId, value: &Tensor) -> Var {
        self.push(Op::Leaf { param: Some(id) }, value.clone())
    }

    pub fn gather_param(&mut self, id: ParamId, table: &Tensor, rows: &[usize]) -> Result<Var> {
        let value = gather_rows(table, rows)?;
        Ok(self.push(
            Op::GatherParam {
                param: id,
                table_shape: vec![table.rows(), table.cols()],
                rows: rows.to_vec(),
            },
            value,
        ))
    }

    pub fn gather(&mut self, table: Var, rows: &[usize]) -> Result<Var> {
        let value = gather_rows(self.value(table), rows)?;
        Ok(self.push(Op::Gather(table, rows.to_vec()), value))
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (va, vb) = (self.value(a), self.value(b));
        let value = va.matmul(vb)?;
        let n = va.rows() * va.cols() * vb.cols();
        self.count_macs(n);
        Ok(self.push(Op::MatMul(a, b), value))
    }

    pub fn matmul_bt(&mut self, a: Var, b: Var) -> Result<Var> {
        let (va, vb) = (self.value(a), self.value(b));
        let value = va.matmul_bt(vb)?;
        let n = va.rows() * va.cols() * vb.rows();
        self.count_macs(n);
        Ok(self.push(Op::MatMulBt(a, b), value))
    }

    pub fn transpose(&mut self, a: Var) -> Var {
        let value = self.value(a).transpose();
        self.push(Op::Transpose(a), value)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let (va, vb) = (self.value(a), self.value(b));
        if va.shape() != vb.shape() {
            return Err(bad_shape("add", va, vb));
        }
        let value = va.add(vb)?;
        Ok(self.push(Op::Add(a, b), value))
    }

    /// Adds row vector `b` (`1 x n` or `n`) to every row of `a`.
    pub fn add_row(&mut self, a: Var, b: Var) -> Result<Var> {
        let (va, vb) = (self.value(a), self.value(b));
        if vb.len() != va.cols() {
            return Err(bad_shape("add_row", va, vb));
        }
        let c = va.cols();
        let mut value = va.clone();
        for (i, x) in value.data_mut().iter_mut().enumerate() {
            *x += vb.data()[i % c];
        }
        Ok(self.push(Op::AddRow(a, b), value))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        let (va, vb) = (self.value(a), self.value(b));
        if va.shape() != vb.shape() {
            return Err(bad_shape("sub", va, vb));
        }
        let value = va.sub(vb)?;
        Ok(self.push(Op::Sub(a, b), value))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (va, vb) = (self.value(a), self.value(b));
        if va.shape() != vb.shape() {
            return Err(bad_shape("mul", va, vb));
        }
        let value = va.zip_map(vb, |x, y| x * y)?;
        Ok(self.push(Op::Mul(a, b), value))
    }

    pub fn scale(&mut self, a: Var, c: f64) -> Var {
        let value = self.value(a).scale(c);
        self.push(Op::Scale(a, c), value)
    }

    pub fn exp(&mut self, a: Var) -> Var {
        let value = self.value(a).map(f64::exp);
        self.push(Op::Exp(a), value)
    }

    pub fn log(&mut self, a: Var) -> Var {
        let value = self.value(a).map(f64::ln);
        self.push(Op::Log(a), value)
    }

    pub fn sigmoid(&mut self, a: Var) -> Var {
        let value = self.value(a).map(numerics::sigmoid);
        self.push(Op::Sigmoid(a), value)
    }

    pub fn softplus(&mut self, a: Var) -> Var {
        let value = self.value(a).map(numerics::softplus);
        self.push(Op::Softplus(a), value)
    }

    pub fn relu(&mut self, a: Var) -> Var {
        let value = self.value(a).map(|x| x.max(0.0));
        self.push(Op::Relu(a), value)
    }

    pub fn clamp(&mut self, a: Var, lo: f64, hi: f64) -> Var {
        let value = self.value(a).map(|x| x.clamp(lo, hi));
        self.push(Op::Clamp(a, lo, hi), value)
    }

    pub fn softmax_rows(&mut self, a: Var) -> Result<Var> {
        let va = self.value(a);
        let (r, c) = (va.rows(), va.cols());
        let mut out = Vec::with_capacity(r * c);
        for i in 0..r {
            out.extend(numerics::softmax_slice(va.row(i))?);
        }
        let value = Tensor::matrix(r, c, out)?;
        Ok(self.push(Op::SoftmaxRows(a), value))
    }

    pub fn concat_cols(&mut self, parts: &[Var]) -> Result<Var> {
        let rows = self.value(parts[0]).rows();
        let cols: usize = parts.iter().map(|&p| self.value(p).cols()).sum();
        let mut data = Vec::with_capacity(rows * cols);
        for i in 0..rows {
            for &p in parts {
                let v = self.value(p);
                if v.rows() != rows {
                    return Err(Error::Shape(format!("concat_cols: {} rows vs {}", v.rows(), rows)));
                }
                data.extend_from_slice(v.row(i));
            }
        }
        let value = Tensor::matrix(rows, cols, data)?;
        Ok(self.push(Op::ConcatCols(parts.to_vec()), value))
    }

    pub fn concat_rows(&mut self, parts: &[Var]) -> Result<Var> {
        let cols = self.value(parts[0]).cols();
        let mut data = Vec::new();
        let mut rows = 0;
        for &p in parts {
            let v = self.value(p);
            if v.cols() != cols {
                return Err(Error::Shape(format!("concat_rows: {} cols vs {}", v.cols(), cols)));
            }
            rows += v.rows();
            data.extend_from_slice(v.data());
        }
        let value = Tensor::matrix(rows, cols, data)?;
        Ok(self.push(Op::ConcatRows(parts.to_vec()), value))
    }

    pub fn mean(&mut self, a: Var) -> Var {
        let va = self.value(a);
        let value = Tensor::scalar(va.sum() / va.len() as f64);
        self.push(Op::Mean(a), value)
    }

    pub fn sum(&mut self, a: Var) -> Var {
        let value = Tensor::scalar(self.value(a).sum());
        self.push(Op::Sum(a), value)
    }

    pub fn kf_fusion(&mut self, mean: Var, prior_prec: Var, values: Var, precs: Var) -> Result<Var> {
        let value = kf_fusion_value(
            self.value(mean),
            self.value(prior_prec),
            self.value(values),
            self.value(precs),
        )?;
        Ok(self.push(Op::KfFusion { mean, prior_prec, values, precs }, value))
    }

    pub fn freq_weights(&mut self, sys_prec: Var, rand_sigma: Var, counts: &[f64]) -> Result<Var> {
        let value = freq_weights_value(self.value(sys_prec), self.value(rand_sigma), counts)?;
        Ok(self.push(
            Op::FreqWeights {
                sys_prec,
                rand_sigma,
                counts: counts.to_vec(),
            },
            value,
        ))
    }

    pub fn bce_logits(&mut self, logit: Var, label: f64) -> Result<Var> {
        let z = self.value(logit);
        if !z.is_scalar() {
            return Err(Error::Shape(format!("bce_logits needs a scalar logit, got {:?}", z.shape())));
        }
        let z = z.data()[0];
        let value = Tensor::scalar(numerics::softplus(z) - label * z);
        Ok(self.push(Op::BceLogits { logit, label }, value))
    }

    /// Backpropagates from the scalar `loss`, returning parameter gradients.
    pub fn backward(&mut self, loss: Var) -> Result<Grads> {
        let mut grads = Grads::default();
        self.backward_into(loss, &mut grads)?;
        Ok(grads)
    }

    /// Like [`Tape::backward`] but accumulates into an existing buffer.
    pub fn backward_into(&mut self, loss: Var, out: &mut Grads) -> Result<()> {
        if !self.nodes[loss.0].value.is_scalar() {
            return Err(Error::NonScalarLoss);
        }
        let n = self.nodes.len();
        let mut g: Vec<Option<Tensor>> = vec![None; n];
        g[loss.0] = Some(Tensor::full(self.nodes[loss.0].value.shape(), 1.0));

        for i in (0..=loss.0).rev() {
            let Some(gi) = g[i].take() else { continue };
            let kept = gi.clone();
            let node = &self.nodes[i];
            let y = &node.value;
            match &node.op {
                Op::Leaf { param } => {
                    if let Some(id) = param {
                        out.accumulate(*id, &gi)?;
                    }
                }
                Op::GatherParam { param, table_shape, rows } => {
                    let slot = out.slot(*param, table_shape);
                    scatter_rows(slot, rows, &gi);
                }
                Op::Gather(a, rows) => {
                    let mut ga = Tensor::zeros(self.nodes[a.0].value.shape());
                    scatter_rows(&mut ga, rows, &gi);
                    acc(&mut g, *a, ga)?;
                }
                Op::MatMul(a, b) => {
                    let (va, vb) = (&self.nodes[a.0].value, &self.nodes[b.0].value);
                    let ga = gi.matmul_bt(vb)?.reshape(va.shape().to_vec())?;
                    let gb = va.transpose().matmul(&gi)?.reshape(vb.shape().to_vec())?;
                    acc(&mut g, *a, ga)?;
                    acc(&mut g, *b, gb)?;
                }
                Op::MatMulBt(a, b) => {
                    let (va, vb) = (&self.nodes[a.0].value, &self.nodes[b.0].value);
                    let ga = gi.matmul(vb)?.reshape(va.shape().to_vec())?;
                    let gb = gi.transpose().matmul(va)?.reshape(vb.shape().to_vec())?;
                    acc(&mut g, *a, ga)?;
                    acc(&mut g, *b, gb)?;
                }
                Op::Transpose(a) => {
                    let shape = self.nodes[a.0].value.shape().to_vec();
                    acc(&mut g, *a, gi.transpose().reshape(shape)?)?;
                }
                Op::Add(a, b) => {
                    acc(&mut g, *a, gi.clone())?;
                    acc(&mut g, *b, gi)?;
                }
                Op::AddRow(a, b) => {
                    let vb = &self.nodes[b.0].value;
                    let c = vb.len();
                    let mut gb = Tensor::zeros(vb.shape());
                    for (k, x) in gi.data().iter().enumerate() {
                        gb.data_mut()[k % c] += x;
                    }
                    acc(&mut g, *a, gi)?;
                    acc(&mut g, *b, gb)?;
                }
                Op::Sub(a, b) => {
                    acc(&mut g, *b, gi.scale(-1.0))?;
                    acc(&mut g, *a, gi)?;
                }
                Op::Mul(a, b) => {
                    let ga = gi.zip_map(&self.nodes[b.0].value, |x, y| x * y)?;
                    let gb = gi.zip_map(&self.nodes[a.0].value, |x, y| x * y)?;
                    acc(&mut g, *a, ga)?;
                    acc(&mut g, *b, gb)?;
                }
                Op::Scale(a, c) => acc(&mut g, *a, gi.scale(*c))?,
                Op::Exp(a) => acc(&mut g, *a, gi.zip_map(y, |x, e| x * e)?)?,
                Op::Log(a) => {
                    let ga = gi.zip_map(&self.nodes[a.0].value, |x, v| x / v)?;
                    acc(&mut g, *a, ga)?
                }
                Op::Sigmoid(a) => acc(&mut g, *a, gi.zip_map(y, |x, s| x * s * (1.0 - s))?)?,
                Op::Softplus(a) => {
                    let ga = gi.zip_map(&self.nodes[a.0].value, |x, v| x * numerics::sigmoid(v))?;
                    acc(&mut g, *a, ga)?
                }
                Op::Relu(a) => {
                    let ga = gi.zip_map(&self.nodes[a.0].value, |x, v| if v > 0.0 { x } else { 0.0 })?;
                    acc(&mut g, *a, ga)?
                }
                Op::Clamp(a, lo, hi) => {
                    let (lo, hi) = (*lo, *hi);
                    let ga = gi.zip_map(&self.nodes[a.0].value, |x, v| if v > lo && v < hi { x } else { 0.0 })?;
                    acc(&mut g, *a, ga)?
                }
                Op::SoftmaxRows(a) => {
                    let (r, c) = (y.rows(), y.cols());
                    let mut ga = vec![0.0; r * c];
                    for k in 0..r {
                        let (yr, gr) = (y.row(k), gi.row(k));
                        let inner = numerics::dot(yr, gr);
                        for j in 0..c {
                            ga[k * c + j] = yr[j] * (gr[j] - inner);
                        }
                    }
                    let shape = self.nodes[a.0].value.shape().to_vec();
                    acc(&mut g, *a, Tensor::new(shape, ga)?)?;
                }
                Op::ConcatCols(parts) => {
                    let rows = y.rows();
                    let mut offset = 0;
                    for p in parts.clone() {
                        let vp = &self.nodes[p.0].value;
                        let pc = vp.cols();
                        let mut gp = Vec::with_capacity(rows * pc);
                        for k in 0..rows {
                            gp.extend_from_slice(&gi.row(k)[offset..offset + pc]);
                        }
                        offset += pc;
                        let shape = vp.shape().to_vec();
                        acc(&mut g, p, Tensor::new(shape, gp)?)?;
                    }
                }
                Op::ConcatRows(parts) => {
                    let cols = y.cols();
                    let mut offset = 0;
                    for p in parts.clone() {
                        let vp = &self.nodes[p.0].value;
                        let n = vp.rows() * cols;
                        let gp = gi.data()[offset..offset + n].to_vec();
                        offset += n;
                        let shape = vp.shape().to_vec();
                        acc(&mut g, p, Tensor::new(shape, gp)?)?;
                    }
                }
                Op::Mean(a) => {
                    let va = &self.nodes[a.0].value;
                    let ga = Tensor::full(va.shape(), gi.data()[0] / va.len() as f64);
                    acc(&mut g, *a, ga)?;
                }
                Op::Sum(a) => {
                    let ga = Tensor::full(self.nodes[a.0].value.shape(), gi.data()[0]);
                    acc(&mut g, *a, ga)?;
                }
                Op::KfFusion { mean, prior_prec, values, precs } => {
                    let (gm, gpi, gv, gp) = kf_fusion_adjoint(
                        &self.nodes[mean.0].value,
                        &self.nodes[prior_prec.0].value,
                        &self.nodes[values.0].value,
                        &self.nodes[precs.0].value,
                        y,
                        &gi,
                    )?;
                    acc(&mut g, *mean, gm)?;
                    acc(&mut g, *prior_prec, gpi)?;
                    acc(&mut g, *values, gv)?;
                    acc(&mut g, *precs, gp)?;
                }
                Op::FreqWeights { sys_prec, rand_sigma, counts } => {
                    let vs = &self.nodes[sys_prec.0].value;
                    let vr = &self.nodes[rand_sigma.0].value;
                    let mut gs = Tensor::zeros(vs.shape());
                    let mut gr = Tensor::zeros(vr.shape());
                    for m in 0..counts.len() {
                        let (s, r, n) = (vs.data()[m], vr.data()[m], counts[m]);
                        let den = n + s * r * r;
                        gs.data_mut()[m] = gi.data()[m] * n * n / (den * den);
                        gr.data_mut()[m] = -gi.data()[m] * 2.0 * s * s * n * r / (den * den);
                    }
                    acc(&mut g, *sys_prec, gs)?;
                    acc(&mut g, *rand_sigma, gr)?;
                }
                Op::BceLogits { logit, label } => {
                    let z = self.nodes[logit.0].value.data()[0];
                    let gz = gi.data()[0] * (numerics::sigmoid(z) - label);
                    let shape = self.nodes[logit.0].value.shape().to_vec();
                    acc(&mut g, *logit, Tensor::full(&shape, gz))?;
                }
            }
            self.nodes[i].grad = Some(kept);
        }
        Ok(())
    }
}

fn acc(g: &mut [Option<Tensor>], v: Var, delta: Tensor) -> Result<()> {
    match &mut g[v.0] {
        Some(t) => t.add_assign(&delta),
        slot => {
            *slot = Some(delta);
            Ok(())
        }
    }
}

fn gather_rows(table: &Tensor, rows: &[usize]) -> Result<Tensor> {
    let c = table.cols();
    let mut data = Vec::with_capacity(rows.len() * c);
    for &r in rows {
        if r >= table.rows() {
            return Err(Error::Shape(format!("gather row {r} of {}", table.rows())));
        }
        data.extend_from_slice(table.row(r));
    }
    Tensor::matrix(rows.len(), c, data)
}

fn scatter_rows(dst: &mut Tensor, rows: &[usize], g: &Tensor) {
    let c = dst.cols();
    for (k, &r) in rows.iter().enumerate() {
        let src = g.row(k);
        for (d, s) in dst.data_mut()[r * c..(r + 1) * c].iter_mut().zip(src) {
            *d += s;
        }
    }
}

/// Value of the fusion node; shared with the attention kernels' tests.
pub fn kf_fusion_value(mean: &Tensor, prior_prec: &Tensor, values: &Tensor, precs: &Tensor) -> Result<Tensor> {
    let d = mean.len();
    let t = precs.len();
    if !prior_prec.is_scalar() || values.len() != t * d || (t > 0 && values.cols() != d) {
        return Err(Error::Shape(format!(
            "kf_fusion: mean {:?}, prior {:?}, values {:?}, precs {:?}",
            mean.shape(),
            prior_prec.shape(),
            values.shape(),
            precs.shape()
        )));
    }
    let pi = prior_prec.data()[0];
    let total = pi + precs.sum();
    if total <= 0.0 {
        return Err(Error::DegenerateFusion);
    }
    let mut num: Vec<f64> = mean.data().iter().map(|m| pi * m).collect();
    for (k, &p) in precs.data().iter().enumerate() {
        for (n, v) in num.iter_mut().zip(values.row(k)) {
            *n += p * v;
        }
    }
    Tensor::matrix(1, d, num.into_iter().map(|n| n / total).collect())
}

fn kf_fusion_adjoint(
    mean: &Tensor,
    prior_prec: &Tensor,
    values: &Tensor,
    precs: &Tensor,
    out: &Tensor,
    g: &Tensor,
) -> Result<(Tensor, Tensor, Tensor, Tensor)> {
    let pi = prior_prec.data()[0];
    let total = pi + precs.sum();
    let gd = g.data();
    let od = out.data();
    let gm = Tensor::new(mean.shape().to_vec(), gd.iter().map(|x| x * pi / total).collect())?;
    let gpi: f64 = mean.data().iter().zip(od).zip(gd).map(|((m, o), x)| (m - o) * x).sum::<f64>() / total;
    let mut gv = Tensor::zeros(values.shape());
    let mut gp = Tensor::zeros(precs.shape());
    let d = mean.len();
    for (k, &p) in precs.data().iter().enumerate() {
        let row = values.row(k);
        gp.data_mut()[k] = row.iter().zip(od).zip(gd).map(|((v, o), x)| (v - o) * x).sum::<f64>() / total;
        for j in 0..d {
            gv.data_mut()[k * d + j] = p * gd[j] / total;
        }
    }
    Ok((gm, Tensor::full(prior_prec.shape(), gpi), gv, gp))
}

pub fn freq_weights_value(sys_prec: &Tensor, rand_sigma: &Tensor, counts: &[f64]) -> Result<Tensor> {
    if sys_prec.len() != counts.len() || rand_sigma.len() != counts.len() {
        return Err(Error::Shape(format!(
            "freq_weights: {} system precisions, {} sigmas, {} counts",
            sys_prec.len(),
            rand_sigma.len(),
            counts.len()
        )));
    }
    let data = sys_prec
        .data()
        .iter()
        .zip(rand_sigma.data())
        .zip(counts)
        .map(|((&s, &r), &n)| s * n / (n + s * r * r))
        .collect();
    Tensor::new(sys_prec.shape().to_vec(), data)
}

/// Computation description evaluated by [`forward`].
#[derive(Clone, Debug)]
pub enum Expr {
    /// A named trainable input.
    Input(String),
    Const(Tensor),
    Op { tag: String, args: Vec<Expr>, attrs: Vec<f64> },
}

impl Expr {
    pub fn input(name: &str) -> Expr {
        Expr::Input(name.to_string())
    }

    pub fn op(tag: &str, args: Vec<Expr>) -> Expr {
        Expr::Op {
            tag: tag.to_string(),
            args,
            attrs: vec![],
        }
    }

    pub fn op_with(tag: &str, args: Vec<Expr>, attrs: Vec<f64>) -> Expr {
        Expr::Op {
            tag: tag.to_string(),
            args,
            attrs,
        }
    }
}

/// Result of [`forward`]: the tape, the output node and the parameter id
/// assigned to each named input (sorted by name).
pub struct Forward {
    pub tape: Tape,
    pub output: Var,
    pub param_names: Vec<String>,
}

impl Forward {
    pub fn value(&self) -> &Tensor {
        self.tape.value(self.output)
    }

    pub fn param_id(&self, name: &str) -> Option<ParamId> {
        self.param_names.iter().position(|n| n == name)
    }
}

/// Evaluates `expr` onto a fresh tape. Every named input becomes a trainable
/// leaf; ids follow the sorted order of `inputs`.
pub fn forward(expr: &Expr, inputs: &BTreeMap<String, Tensor>) -> Result<Forward> {
    let param_names: Vec<String> = inputs.keys().cloned().collect();
    let mut tape = Tape::new();
    let mut leaves: BTreeMap<String, Var> = BTreeMap::new();
    let output = build(&mut tape, expr, inputs, &param_names, &mut leaves)?;
    Ok(Forward {
        tape,
        output,
        param_names,
    })
}

fn arity(tag: &str, args: &[Var], n: usize) -> Result<()> {
    if args.len() != n {
        return Err(Error::Shape(format!("`{tag}` takes {n} arguments, got {}", args.len())));
    }
    Ok(())
}

fn build(
    tape: &mut Tape,
    expr: &Expr,
    inputs: &BTreeMap<String, Tensor>,
    names: &[String],
    leaves: &mut BTreeMap<String, Var>,
) -> Result<Var> {
    match expr {
        Expr::Input(name) => {
            if let Some(&v) = leaves.get(name) {
                return Ok(v);
            }
            let value = inputs.get(name).ok_or_else(|| Error::UnknownInput(name.clone()))?;
            let id = names.iter().position(|n| n == name).expect("name listed");
            let v = tape.param(id, value);
            leaves.insert(name.clone(), v);
            Ok(v)
        }
        Expr::Const(t) => Ok(tape.constant(t.clone())),
        Expr::Op { tag, args, attrs } => {
            if !SUPPORTED_OPS.contains(&tag.as_str()) {
                return Err(Error::UnsupportedOp(tag.clone()));
            }
            let a: Vec<Var> = args
                .iter()
                .map(|e| build(tape, e, inputs, names, leaves))
                .collect::<Result<_>>()?;
            let attr = |i: usize| {
                attrs
                    .get(i)
                    .copied()
                    .ok_or_else(|| Error::Shape(format!("`{tag}` missing attribute {i}")))
            };
            let t = tag.as_str();
            match t {
                "identity" => {
                    arity(t, &a, 1)?;
                    Ok(a[0])
                }
                "matmul" => {
                    arity(t, &a, 2)?;
                    tape.matmul(a[0], a[1])
                }
                "matmul_bt" => {
                    arity(t, &a, 2)?;
                    tape.matmul_bt(a[0], a[1])
                }
                "add" => {
                    arity(t, &a, 2)?;
                    tape.add(a[0], a[1])
                }
                "add_row" => {
                    arity(t, &a, 2)?;
                    tape.add_row(a[0], a[1])
                }
                "sub" => {
                    arity(t, &a, 2)?;
                    tape.sub(a[0], a[1])
                }
                "mul" => {
                    arity(t, &a, 2)?;
                    tape.mul(a[0], a[1])
                }
                "transpose" | "exp" | "log" | "sigmoid" | "softplus" | "relu" | "softmax_rows" | "mean"
                | "sum" => {
                    arity(t, &a, 1)?;
                    let x = a[0];
                    Ok(match t {
                        "transpose" => tape.transpose(x),
                        "exp" => tape.exp(x),
                        "log" => tape.log(x),
                        "sigmoid" => tape.sigmoid(x),
                        "softplus" => tape.softplus(x),
                        "relu" => tape.relu(x),
                        "softmax_rows" => tape.softmax_rows(x)?,
                        "mean" => tape.mean(x),
                        _ => tape.sum(x),
                    })
                }
                "scale" => {
                    arity(t, &a, 1)?;
                    Ok(tape.scale(a[0], attr(0)?))
                }
                "clamp" => {
                    arity(t, &a, 1)?;
                    Ok(tape.clamp(a[0], attr(0)?, attr(1)?))
                }
                "concat_cols" => tape.concat_cols(&a),
                "concat_rows" => tape.concat_rows(&a),
                "gather" => {
                    arity(t, &a, 1)?;
                    let rows: Vec<usize> = attrs.iter().map(|&r| r as usize).collect();
                    tape.gather(a[0], &rows)
                }
                "kf_fusion" => {
                    arity(t, &a, 4)?;
                    tape.kf_fusion(a[0], a[1], a[2], a[3])
                }
                "freq_weights" => {
                    arity(t, &a, 2)?;
                    tape.freq_weights(a[0], a[1], attrs)
                }
                "bce_logits" => {
                    arity(t, &a, 1)?;
                    tape.bce_logits(a[0], attr(0)?)
                }
                _ => Err(Error::UnsupportedOp(tag.clone())),
            }
        }
    }
}

/// Adam with β1 = 0.9, β2 = 0.999, ε = 1e-8.
#[derive(Clone, Debug)]
pub struct Adam {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    step: u64,
    m: Vec<Tensor>,
    v: Vec<Tensor>,
}

impl Adam {
    pub fn new(lr: f64) -> Result<Self> {
        if !(lr > 0.0) {
            return Err(Error::BadLearningRate);
        }
        Ok(Adam {
            lr,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            step: 0,
            m: Vec::new(),
            v: Vec::new(),
        })
    }

    pub fn steps_taken(&self) -> u64 {
        self.step
    }

    /// Applies one update. Parameters without a gradient slot see a zero gradient.
    pub fn step(&mut self, params: &mut [Tensor], grads: &Grads) -> Result<()> {
        if self.m.is_empty() {
            self.m = params.iter().map(|p| Tensor::zeros(p.shape())).collect();
            self.v = self.m.clone();
        }
        if self.m.len() != params.len() {
            return Err(Error::Shape(format!("optimizer tracks {} params, got {}", self.m.len(), params.len())));
        }
        self.step += 1;
        let bc1 = 1.0 - self.beta1.powi(self.step as i32);
        let bc2 = 1.0 - self.beta2.powi(self.step as i32);
        for (id, p) in params.iter_mut().enumerate() {
            let (m, v) = (&mut self.m[id], &mut self.v[id]);
            let g = grads.get(id);
            if let Some(g) = g {
                if g.len() != p.len() {
                    return Err(Error::Shape(format!("gradient {:?} for param {:?}", g.shape(), p.shape())));
                }
            }
            for k in 0..p.len() {
                let gk = g.map_or(0.0, |g| g.data()[k]);
                let mk = &mut m.data_mut()[k];
                *mk = self.beta1 * *mk + (1.0 - self.beta1) * gk;
                let mk = *mk;
                let vk = &mut v.data_mut()[k];
                *vk = self.beta2 * *vk + (1.0 - self.beta2) * gk * gk;
                let vk = *vk;
                let update = self.lr * (mk / bc1) / ((vk / bc2).sqrt() + self.eps);
                p.data_mut()[k] -= update;
            }
        }
        Ok(())
    }
}

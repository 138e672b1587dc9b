//! Tape-based reverse-mode automatic differentiation over dense `f64` tensors.
//!
//! A [`Tape`] owns every value computed in a forward pass. Operations append a
//! node holding the result and a record of how to propagate gradients back to
//! their inputs, so the tape is topologically ordered by construction and
//! [`Tape::backward`] simply walks it in reverse.
//!
//! Only the handful of operations needed for an LSTM decoder with a softmax
//! cross-entropy loss are provided. The single broadcast is
//! [`Tape::add_bias`], which adds a vector to every row of a matrix.
//!
//! ```
//! use mlcap::autodiff::{Tape, Tensor};
//!
//! let mut tape = Tape::new();
//! let w = tape.param(Tensor::vector(vec![1.0, -2.0, 3.0]));
//! let loss = tape.sum(w);
//! tape.backward(loss).unwrap();
//! assert_eq!(tape.grad(w).unwrap().data(), &[1.0, 1.0, 1.0]);
//! ```

use crate::error::{Error, Result};

/// Dense row-major array of `f64`.
///
/// Gradient bookkeeping (`requires_grad`, `grad`) lives on the [`Tape`]
/// node that holds the tensor, not on the tensor itself.
#[derive(Debug, Clone, PartialEq)]
pub struct Tensor {
    shape: Vec<usize>,
    data: Vec<f64>,
}

impl Tensor {
    pub fn new(shape: Vec<usize>, data: Vec<f64>) -> Result<Self> {
        if shape.is_empty() || shape.contains(&0) {
            return Err(Error::contract(format!(
                "tensor shape must be a non-empty list of positive sizes, got {shape:?}"
            )));
        }
        let expected: usize = shape.iter().product();
        if expected != data.len() {
            return Err(Error::Dimension {
                op: "tensor",
                lhs: shape,
                rhs: vec![data.len()],
            });
        }
        Ok(Self { shape, data })
    }

    pub fn scalar(value: f64) -> Self {
        Self {
            shape: vec![1],
            data: vec![value],
        }
    }

    /// 1-D tensor. Panics on an empty vector.
    pub fn vector(data: Vec<f64>) -> Self {
        assert!(!data.is_empty(), "empty vector tensor");
        Self {
            shape: vec![data.len()],
            data,
        }
    }

    pub fn matrix(rows: usize, cols: usize, data: Vec<f64>) -> Result<Self> {
        Self::new(vec![rows, cols], data)
    }

    pub fn zeros(shape: &[usize]) -> Self {
        let n = shape.iter().product();
        Self {
            shape: shape.to_vec(),
            data: vec![0.0; n],
        }
    }

    pub fn filled(shape: &[usize], value: f64) -> Self {
        let n = shape.iter().product();
        Self {
            shape: shape.to_vec(),
            data: vec![value; n],
        }
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<f64> {
        self.data
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn is_scalar(&self) -> bool {
        self.data.len() == 1
    }

    /// Rows when viewed as a matrix; a 1-D tensor is a single row.
    pub fn rows(&self) -> usize {
        match self.shape.len() {
            1 => 1,
            _ => self.shape[0],
        }
    }

    pub fn cols(&self) -> usize {
        *self.shape.last().expect("shape is never empty")
    }

    pub fn row(&self, r: usize) -> &[f64] {
        let c = self.cols();
        &self.data[r * c..(r + 1) * c]
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|x| x.is_finite())
    }
}

/// Handle to a node on a [`Tape`].
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Var(usize);

/// Pointwise operation kinds.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Elementwise {
    Add,
    Hadamard,
    Sigmoid,
    Tanh,
}

#[derive(Debug)]
enum Op {
    Leaf,
    MatMul(Var, Var),
    AddBias(Var, Var),
    Add(Var, Var),
    Mul(Var, Var),
    Sigmoid(Var),
    Tanh(Var),
    SliceCols { src: Var, start: usize },
    GatherRows { table: Var, ids: Vec<usize> },
    SoftmaxXent {
        logits: Var,
        targets: Vec<Option<usize>>,
        probs: Vec<f64>,
    },
    Sum(Var),
    Scale(Var, f64),
}

#[derive(Debug)]
struct Node {
    value: Tensor,
    op: Op,
    requires_grad: bool,
}

/// Recorded computation. Every operation's inputs precede it on the tape.
#[derive(Debug, Default)]
pub struct Tape {
    nodes: Vec<Node>,
    grads: Vec<Option<Vec<f64>>>,
    backpropagated: bool,
}

pub fn sigmoid(x: f64) -> f64 {
    1.0 / (1.0 + (-x).exp())
}

/// Softmax of one row with max-subtraction.
pub fn softmax(logits: &[f64]) -> Vec<f64> {
    let max = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let exps: Vec<f64> = logits.iter().map(|&x| (x - max).exp()).collect();
    let total: f64 = exps.iter().sum();
    exps.into_iter().map(|e| e / total).collect()
}

/// `ln Σ exp(x)` with max-subtraction.
pub fn log_sum_exp(logits: &[f64]) -> f64 {
    let max = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let total: f64 = logits.iter().map(|&x| (x - max).exp()).sum();
    max + total.ln()
}

pub fn log_softmax(logits: &[f64]) -> Vec<f64> {
    let lse = log_sum_exp(logits);
    logits.iter().map(|&x| x - lse).collect()
}

fn matmul_kernel(a: &[f64], b: &[f64], m: usize, k: usize, n: usize) -> Vec<f64> {
    let mut out = vec![0.0; m * n];
    for i in 0..m {
        let out_row = &mut out[i * n..(i + 1) * n];
        for (p, &av) in a[i * k..(i + 1) * k].iter().enumerate() {
            if av == 0.0 {
                continue;
            }
            let b_row = &b[p * n..(p + 1) * n];
            for (o, &bv) in out_row.iter_mut().zip(b_row) {
                *o += av * bv;
            }
        }
    }
    out
}

fn accumulate(slot: &mut Option<Vec<f64>>, len: usize, f: impl FnOnce(&mut [f64])) {
    let buf = slot.get_or_insert_with(|| vec![0.0; len]);
    f(buf);
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

    fn push(&mut self, value: Tensor, op: Op, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
        });
        self.grads.push(None);
        Var(self.nodes.len() - 1)
    }

    fn needs(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    pub fn leaf(&mut self, value: Tensor, requires_grad: bool) -> Var {
        self.push(value, Op::Leaf, requires_grad)
    }

    /// Trainable leaf.
    pub fn param(&mut self, value: Tensor) -> Var {
        self.leaf(value, true)
    }

    pub fn constant(&mut self, value: Tensor) -> Var {
        self.leaf(value, false)
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.needs(v)
    }

    /// Gradient of the last backpropagated loss with respect to `v`, if any
    /// flowed into it.
    pub fn grad(&self, v: Var) -> Option<Tensor> {
        self.grads[v.0].as_ref().map(|g| Tensor {
            shape: self.nodes[v.0].value.shape.clone(),
            data: g.clone(),
        })
    }

    /// Clears all gradients so that [`Tape::backward`] may be called again.
    pub fn zero_grad(&mut self) {
        self.grads.iter_mut().for_each(|g| *g = None);
        self.backpropagated = false;
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (av, bv) = (self.value(a), self.value(b));
        if av.shape.len() != 2 || bv.shape.len() != 2 || av.shape[1] != bv.shape[0] {
            return Err(Error::Dimension {
                op: "matmul",
                lhs: av.shape.clone(),
                rhs: bv.shape.clone(),
            });
        }
        let (m, k, n) = (av.shape[0], av.shape[1], bv.shape[1]);
        let data = matmul_kernel(&av.data, &bv.data, m, k, n);
        let rg = self.needs(a) || self.needs(b);
        Ok(self.push(Tensor { shape: vec![m, n], data }, Op::MatMul(a, b), rg))
    }

    /// Adds a length-`c` vector to every row of an `r × c` matrix.
    pub fn add_bias(&mut self, a: Var, bias: Var) -> Result<Var> {
        let (av, bv) = (self.value(a), self.value(bias));
        let c = av.cols();
        if bv.len() != c || (bv.shape.len() == 2 && bv.shape[0] != 1) {
            return Err(Error::Dimension {
                op: "add_bias",
                lhs: av.shape.clone(),
                rhs: bv.shape.clone(),
            });
        }
        let mut data = av.data.clone();
        for row in data.chunks_mut(c) {
            for (x, &b) in row.iter_mut().zip(&bv.data) {
                *x += b;
            }
        }
        let shape = av.shape.clone();
        let rg = self.needs(a) || self.needs(bias);
        Ok(self.push(Tensor { shape, data }, Op::AddBias(a, bias), rg))
    }

    fn binary(&mut self, a: Var, b: Var, name: &'static str) -> Result<(Vec<usize>, bool)> {
        let (av, bv) = (self.value(a), self.value(b));
        if av.shape != bv.shape {
            return Err(Error::Dimension {
                op: name,
                lhs: av.shape.clone(),
                rhs: bv.shape.clone(),
            });
        }
        Ok((av.shape.clone(), self.needs(a) || self.needs(b)))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let (shape, rg) = self.binary(a, b, "add")?;
        let data = self.value(a).data.iter().zip(&self.value(b).data).map(|(x, y)| x + y).collect();
        Ok(self.push(Tensor { shape, data }, Op::Add(a, b), rg))
    }

    pub fn hadamard(&mut self, a: Var, b: Var) -> Result<Var> {
        let (shape, rg) = self.binary(a, b, "hadamard")?;
        let data = self.value(a).data.iter().zip(&self.value(b).data).map(|(x, y)| x * y).collect();
        Ok(self.push(Tensor { shape, data }, Op::Mul(a, b), rg))
    }

    pub fn sigmoid(&mut self, a: Var) -> Var {
        let av = self.value(a);
        let data = av.data.iter().map(|&x| sigmoid(x)).collect();
        let shape = av.shape.clone();
        let rg = self.needs(a);
        self.push(Tensor { shape, data }, Op::Sigmoid(a), rg)
    }

    pub fn tanh(&mut self, a: Var) -> Var {
        let av = self.value(a);
        let data = av.data.iter().map(|x| x.tanh()).collect();
        let shape = av.shape.clone();
        let rg = self.needs(a);
        self.push(Tensor { shape, data }, Op::Tanh(a), rg)
    }

    /// Dispatches a pointwise operation by kind.
    pub fn elementwise(&mut self, kind: Elementwise, operands: &[Var]) -> Result<Var> {
        let arity = match kind {
            Elementwise::Add | Elementwise::Hadamard => 2,
            Elementwise::Sigmoid | Elementwise::Tanh => 1,
        };
        if operands.len() != arity {
            return Err(Error::contract(format!(
                "{kind:?} takes {arity} operand(s), got {}",
                operands.len()
            )));
        }
        match kind {
            Elementwise::Add => self.add(operands[0], operands[1]),
            Elementwise::Hadamard => self.hadamard(operands[0], operands[1]),
            Elementwise::Sigmoid => Ok(self.sigmoid(operands[0])),
            Elementwise::Tanh => Ok(self.tanh(operands[0])),
        }
    }

    /// Columns `start..start + len` of a matrix (or 1-D row).
    pub fn slice_cols(&mut self, a: Var, start: usize, len: usize) -> Result<Var> {
        let av = self.value(a);
        let c = av.cols();
        if len == 0 || start + len > c {
            return Err(Error::Dimension {
                op: "slice_cols",
                lhs: av.shape.clone(),
                rhs: vec![start, len],
            });
        }
        let rows = av.rows();
        let mut data = Vec::with_capacity(rows * len);
        for r in 0..rows {
            data.extend_from_slice(&av.data[r * c + start..r * c + start + len]);
        }
        let shape = if av.shape.len() == 1 { vec![len] } else { vec![rows, len] };
        let rg = self.needs(a);
        Ok(self.push(Tensor { shape, data }, Op::SliceCols { src: a, start }, rg))
    }

    /// Stacks rows `ids` of a `V × E` table into an `ids.len() × E` matrix.
    pub fn gather_rows(&mut self, table: Var, ids: &[usize]) -> Result<Var> {
        let tv = self.value(table);
        if tv.shape.len() != 2 {
            return Err(Error::Dimension {
                op: "gather_rows",
                lhs: tv.shape.clone(),
                rhs: vec![ids.len()],
            });
        }
        if ids.is_empty() {
            return Err(Error::contract("gather_rows needs at least one id"));
        }
        let (v, e) = (tv.shape[0], tv.shape[1]);
        let mut data = Vec::with_capacity(ids.len() * e);
        for &id in ids {
            if id >= v {
                return Err(Error::Index {
                    what: "embedding table",
                    index: id,
                    len: v,
                });
            }
            data.extend_from_slice(&tv.data[id * e..(id + 1) * e]);
        }
        let rg = self.needs(table);
        Ok(self.push(
            Tensor {
                shape: vec![ids.len(), e],
                data,
            },
            Op::GatherRows {
                table,
                ids: ids.to_vec(),
            },
            rg,
        ))
    }

    /// `−log softmax(logits)[target]` for a single logit vector.
    pub fn softmax_cross_entropy(&mut self, logits: Var, target: usize) -> Result<Var> {
        if self.value(logits).rows() != 1 {
            return Err(Error::Dimension {
                op: "softmax_cross_entropy",
                lhs: self.value(logits).shape.clone(),
                rhs: vec![1],
            });
        }
        self.softmax_cross_entropy_rows(logits, &[Some(target)])
    }

    /// Sum over rows of `−log softmax(row)[target]`, skipping rows whose
    /// target is `None`.
    pub fn softmax_cross_entropy_rows(&mut self, logits: Var, targets: &[Option<usize>]) -> Result<Var> {
        let lv = self.value(logits);
        let (rows, v) = (lv.rows(), lv.cols());
        if targets.len() != rows {
            return Err(Error::Dimension {
                op: "softmax_cross_entropy",
                lhs: lv.shape.clone(),
                rhs: vec![targets.len()],
            });
        }
        let mut probs = vec![0.0; rows * v];
        let mut loss = 0.0;
        for (r, target) in targets.iter().enumerate() {
            let Some(t) = *target else { continue };
            if t >= v {
                return Err(Error::Index {
                    what: "softmax target",
                    index: t,
                    len: v,
                });
            }
            let row = lv.row(r);
            loss += log_sum_exp(row) - row[t];
            probs[r * v..(r + 1) * v].copy_from_slice(&softmax(row));
        }
        let rg = self.needs(logits);
        Ok(self.push(
            Tensor::scalar(loss),
            Op::SoftmaxXent {
                logits,
                targets: targets.to_vec(),
                probs,
            },
            rg,
        ))
    }

    pub fn sum(&mut self, a: Var) -> Var {
        let s = self.value(a).data.iter().sum();
        let rg = self.needs(a);
        self.push(Tensor::scalar(s), Op::Sum(a), rg)
    }

    pub fn scale(&mut self, a: Var, factor: f64) -> Var {
        let av = self.value(a);
        let data = av.data.iter().map(|x| x * factor).collect();
        let shape = av.shape.clone();
        let rg = self.needs(a);
        self.push(Tensor { shape, data }, Op::Scale(a, factor), rg)
    }

    /// Populates gradients of `loss` for every node that requires them.
    ///
    /// Errors if called twice without an intervening [`Tape::zero_grad`].
    pub fn backward(&mut self, loss: Var) -> Result<()> {
        if !self.value(loss).is_scalar() {
            return Err(Error::contract(format!(
                "backward needs a scalar loss, got shape {:?}",
                self.value(loss).shape
            )));
        }
        if self.backpropagated {
            return Err(Error::contract(
                "backward already ran on this tape; call zero_grad first",
            ));
        }
        self.backpropagated = true;
        if !self.needs(loss) {
            return Ok(());
        }
        self.grads[loss.0] = Some(vec![1.0]);

        for idx in (0..=loss.0).rev() {
            if !self.nodes[idx].requires_grad {
                continue;
            }
            let Some(g) = self.grads[idx].take() else { continue };
            self.propagate(idx, &g);
            self.grads[idx] = Some(g);
        }
        Ok(())
    }

    fn propagate(&mut self, idx: usize, g: &[f64]) {
        let (nodes, grads) = (&self.nodes, &mut self.grads);
        let node = &nodes[idx];
        let needs = |v: &Var| nodes[v.0].requires_grad;
        match &node.op {
            Op::Leaf => {}
            Op::MatMul(a, b) => {
                let (av, bv) = (&nodes[a.0].value, &nodes[b.0].value);
                let (m, k, n) = (av.shape[0], av.shape[1], bv.shape[1]);
                if needs(a) {
                    // dA = G · Bᵀ
                    accumulate(&mut grads[a.0], m * k, |ga| {
                        for i in 0..m {
                            let g_row = &g[i * n..(i + 1) * n];
                            for p in 0..k {
                                let b_row = &bv.data[p * n..(p + 1) * n];
                                ga[i * k + p] += g_row.iter().zip(b_row).map(|(x, y)| x * y).sum::<f64>();
                            }
                        }
                    });
                }
                if needs(b) {
                    // dB = Aᵀ · G
                    accumulate(&mut grads[b.0], k * n, |gb| {
                        for i in 0..m {
                            let g_row = &g[i * n..(i + 1) * n];
                            for p in 0..k {
                                let av_ip = av.data[i * k + p];
                                if av_ip == 0.0 {
                                    continue;
                                }
                                for (o, &gv) in gb[p * n..(p + 1) * n].iter_mut().zip(g_row) {
                                    *o += av_ip * gv;
                                }
                            }
                        }
                    });
                }
            }
            Op::AddBias(a, bias) => {
                let len = nodes[a.0].value.len();
                let c = nodes[bias.0].value.len();
                if needs(a) {
                    accumulate(&mut grads[a.0], len, |ga| {
                        ga.iter_mut().zip(g).for_each(|(x, y)| *x += y);
                    });
                }
                if needs(bias) {
                    accumulate(&mut grads[bias.0], c, |gb| {
                        for row in g.chunks(c) {
                            gb.iter_mut().zip(row).for_each(|(x, y)| *x += y);
                        }
                    });
                }
            }
            Op::Add(a, b) => {
                for v in [a, b] {
                    if needs(v) {
                        accumulate(&mut grads[v.0], g.len(), |gv| {
                            gv.iter_mut().zip(g).for_each(|(x, y)| *x += y);
                        });
                    }
                }
            }
            Op::Mul(a, b) => {
                let (av, bv) = (&nodes[a.0].value.data, &nodes[b.0].value.data);
                if needs(a) {
                    accumulate(&mut grads[a.0], g.len(), |ga| {
                        for ((x, gy), bb) in ga.iter_mut().zip(g).zip(bv) {
                            *x += gy * bb;
                        }
                    });
                }
                if needs(b) {
                    accumulate(&mut grads[b.0], g.len(), |gb| {
                        for ((x, gy), aa) in gb.iter_mut().zip(g).zip(av) {
                            *x += gy * aa;
                        }
                    });
                }
            }
            Op::Sigmoid(a) => {
                let out = &node.value.data;
                accumulate(&mut grads[a.0], g.len(), |ga| {
                    for ((x, gy), s) in ga.iter_mut().zip(g).zip(out) {
                        *x += gy * s * (1.0 - s);
                    }
                });
            }
            Op::Tanh(a) => {
                let out = &node.value.data;
                accumulate(&mut grads[a.0], g.len(), |ga| {
                    for ((x, gy), t) in ga.iter_mut().zip(g).zip(out) {
                        *x += gy * (1.0 - t * t);
                    }
                });
            }
            Op::SliceCols { src, start } => {
                let sv = &nodes[src.0].value;
                let c = sv.cols();
                let len = node.value.cols();
                accumulate(&mut grads[src.0], sv.len(), |gs| {
                    for (r, g_row) in g.chunks(len).enumerate() {
                        let dst = &mut gs[r * c + start..r * c + start + len];
                        dst.iter_mut().zip(g_row).for_each(|(x, y)| *x += y);
                    }
                });
            }
            Op::GatherRows { table, ids } => {
                let tv = &nodes[table.0].value;
                let e = tv.cols();
                accumulate(&mut grads[table.0], tv.len(), |gt| {
                    for (&id, g_row) in ids.iter().zip(g.chunks(e)) {
                        let dst = &mut gt[id * e..(id + 1) * e];
                        dst.iter_mut().zip(g_row).for_each(|(x, y)| *x += y);
                    }
                });
            }
            Op::SoftmaxXent {
                logits,
                targets,
                probs,
            } => {
                let lv = &nodes[logits.0].value;
                let v = lv.cols();
                let scale = g[0];
                accumulate(&mut grads[logits.0], lv.len(), |gl| {
                    for (r, target) in targets.iter().enumerate() {
                        let Some(t) = *target else { continue };
                        let dst = &mut gl[r * v..(r + 1) * v];
                        for (j, (x, p)) in dst.iter_mut().zip(&probs[r * v..(r + 1) * v]).enumerate() {
                            let onehot = if j == t { 1.0 } else { 0.0 };
                            *x += scale * (p - onehot);
                        }
                    }
                });
            }
            Op::Sum(a) => {
                let len = nodes[a.0].value.len();
                accumulate(&mut grads[a.0], len, |ga| ga.iter_mut().for_each(|x| *x += g[0]));
            }
            Op::Scale(a, factor) => {
                accumulate(&mut grads[a.0], g.len(), |ga| {
                    ga.iter_mut().zip(g).for_each(|(x, y)| *x += y * factor);
                });
            }
        }
    }
}

/// Outcome of comparing reverse-mode gradients against central differences.
#[derive(Debug, Clone, PartialEq)]
pub struct GradCheckReport {
    /// Worst relative error over every coordinate of every input.
    pub max_rel_err: f64,
    /// Worst relative error per input, in input order.
    pub per_input: Vec<f64>,
    pub coordinates: usize,
}

fn relative_error(ad: f64, fd: f64) -> f64 {
    (ad - fd).abs() / f64::max(1e-12, ad.abs() + fd.abs())
}

fn eval_scalar<F>(f: &F, inputs: &[Tensor]) -> Result<f64>
where
    F: Fn(&mut Tape, &[Var]) -> Result<Var>,
{
    let mut tape = Tape::new();
    let vars: Vec<Var> = inputs.iter().map(|t| tape.constant(t.clone())).collect();
    let out = f(&mut tape, &vars)?;
    let value = tape.value(out);
    if !value.is_scalar() {
        return Err(Error::contract(format!(
            "gradient_check needs a scalar function, got shape {:?}",
            value.shape
        )));
    }
    Ok(value.data[0])
}

/// Compares the tape gradient of scalar `f` at `inputs` with central
/// differences `(f(x+h) − f(x−h)) / 2h`, coordinate by coordinate.
pub fn gradient_check_report<F>(f: F, inputs: &[Tensor], h: f64) -> Result<GradCheckReport>
where
    F: Fn(&mut Tape, &[Var]) -> Result<Var>,
{
    if !(h > 0.0) {
        return Err(Error::contract(format!("finite-difference step must be > 0, got {h}")));
    }
    let mut tape = Tape::new();
    let vars: Vec<Var> = inputs.iter().map(|t| tape.param(t.clone())).collect();
    let out = f(&mut tape, &vars)?;
    tape.backward(out)?;
    let analytic: Vec<Vec<f64>> = vars
        .iter()
        .zip(inputs)
        .map(|(&v, t)| tape.grad(v).map(Tensor::into_data).unwrap_or_else(|| vec![0.0; t.len()]))
        .collect();

    let mut work = inputs.to_vec();
    let mut per_input = Vec::with_capacity(inputs.len());
    let mut coordinates = 0;
    for (i, ad) in analytic.iter().enumerate() {
        let mut worst = 0.0f64;
        for j in 0..inputs[i].len() {
            let orig = work[i].data[j];
            work[i].data[j] = orig + h;
            let plus = eval_scalar(&f, &work)?;
            work[i].data[j] = orig - h;
            let minus = eval_scalar(&f, &work)?;
            work[i].data[j] = orig;
            let fd = (plus - minus) / (2.0 * h);
            worst = worst.max(relative_error(ad[j], fd));
            coordinates += 1;
        }
        per_input.push(worst);
    }
    let max_rel_err = per_input.iter().copied().fold(0.0, f64::max);
    Ok(GradCheckReport {
        max_rel_err,
        per_input,
        coordinates,
    })
}

/// Maximum relative error between reverse-mode and central-difference
/// gradients of `f` at `inputs`.
pub fn gradient_check<F>(f: F, inputs: &[Tensor], h: f64) -> Result<f64>
where
    F: Fn(&mut Tape, &[Var]) -> Result<Var>,
{
    gradient_check_report(f, inputs, h).map(|r| r.max_rel_err)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random(rng: &mut ChaCha8Rng, shape: &[usize]) -> Tensor {
        let n = shape.iter().product();
        Tensor::new(shape.to_vec(), (0..n).map(|_| rng.gen_range(-1.0..1.0)).collect()).unwrap()
    }

    #[test]
    fn tensor_rejects_bad_shapes() {
        assert!(Tensor::new(vec![2, 2], vec![1.0; 3]).is_err());
        assert!(Tensor::new(vec![0], vec![]).is_err());
        assert!(Tensor::new(vec![], vec![1.0]).is_err());
    }

    #[test]
    fn matmul_identity_and_zero() {
        let mut tape = Tape::new();
        let eye = tape.constant(Tensor::matrix(2, 2, vec![1.0, 0.0, 0.0, 1.0]).unwrap());
        let m = tape.constant(Tensor::matrix(2, 2, vec![1.0, 2.0, 3.0, 4.0]).unwrap());
        let zero = tape.constant(Tensor::zeros(&[2, 2]));
        let p = tape.matmul(eye, m).unwrap();
        assert_eq!(tape.value(p).data(), &[1.0, 2.0, 3.0, 4.0]);
        let z = tape.matmul(m, zero).unwrap();
        assert_eq!(tape.value(z).data(), &[0.0; 4]);
    }

    #[test]
    fn matmul_shape_error_names_both_shapes() {
        let mut tape = Tape::new();
        let a = tape.constant(Tensor::zeros(&[2, 3]));
        let b = tape.constant(Tensor::zeros(&[2, 3]));
        let err = tape.matmul(a, b).unwrap_err().to_string();
        assert!(err.contains("[2, 3]"), "{err}");
    }

    #[test]
    fn matmul_gradient_matches_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let inputs = [random(&mut rng, &[3, 4]), random(&mut rng, &[4, 2])];
        let err = gradient_check(
            |t, v| {
                let p = t.matmul(v[0], v[1])?;
                let s = t.sigmoid(p);
                Ok(t.sum(s))
            },
            &inputs,
            1e-5,
        )
        .unwrap();
        assert!(err < 1e-5, "rel err {err}");
    }

    #[test]
    fn analytic_unary_values() {
        let mut tape = Tape::new();
        let z = tape.constant(Tensor::scalar(0.0));
        let s = tape.elementwise(Elementwise::Sigmoid, &[z]).unwrap();
        let t = tape.elementwise(Elementwise::Tanh, &[z]).unwrap();
        assert_eq!(tape.value(s).data()[0], 0.5);
        assert_eq!(tape.value(t).data()[0], 0.0);
        assert!(tape.elementwise(Elementwise::Add, &[z]).is_err());
    }

    #[test]
    fn elementwise_shape_mismatch() {
        let mut tape = Tape::new();
        let a = tape.constant(Tensor::zeros(&[3]));
        let b = tape.constant(Tensor::zeros(&[4]));
        assert!(matches!(tape.add(a, b), Err(Error::Dimension { .. })));
        assert!(matches!(tape.hadamard(a, b), Err(Error::Dimension { .. })));
    }

    #[test]
    fn hadamard_and_unary_gradients() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let inputs = [random(&mut rng, &[5]), random(&mut rng, &[5])];
        let err = gradient_check(
            |t, v| {
                let p = t.hadamard(v[0], v[1])?;
                Ok(t.sum(p))
            },
            &inputs,
            1e-5,
        )
        .unwrap();
        assert!(err < 1e-5, "hadamard rel err {err}");

        let err = gradient_check(
            |t, v| {
                let a = t.tanh(v[0]);
                let b = t.sigmoid(v[1]);
                let s = t.add(a, b)?;
                let p = t.hadamard(s, a)?;
                Ok(t.sum(p))
            },
            &inputs,
            1e-5,
        )
        .unwrap();
        assert!(err < 1e-5, "unary rel err {err}");
    }

    #[test]
    fn bias_slice_gather_gradients() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let inputs = [random(&mut rng, &[3, 6]), random(&mut rng, &[6]), random(&mut rng, &[4, 3])];
        let err = gradient_check(
            |t, v| {
                let rows = t.gather_rows(v[2], &[1, 3, 1])?;
                let a = t.matmul(rows, v[0])?;
                let b = t.add_bias(a, v[1])?;
                let s = t.slice_cols(b, 2, 3)?;
                let th = t.tanh(s);
                let sc = t.scale(th, 0.7);
                let sq = t.hadamard(sc, sc)?;
                Ok(t.sum(sq))
            },
            &inputs,
            1e-5,
        )
        .unwrap();
        assert!(err < 1e-5, "rel err {err}");
    }

    #[test]
    fn cross_entropy_uniform_and_saturated() {
        let mut tape = Tape::new();
        let l = tape.constant(Tensor::vector(vec![0.3; 4]));
        for target in 0..4 {
            let loss = tape.softmax_cross_entropy(l, target).unwrap();
            assert!((tape.value(loss).data()[0] - 4f64.ln()).abs() < 1e-15);
        }
        let mut sat = vec![0.0; 5];
        sat[2] = 1e6;
        let s = tape.constant(Tensor::vector(sat));
        let loss = tape.softmax_cross_entropy(s, 2).unwrap();
        assert_eq!(tape.value(loss).data()[0], 0.0);
        assert!(matches!(tape.softmax_cross_entropy(s, 5), Err(Error::Index { .. })));
    }

    #[test]
    fn cross_entropy_gradient() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let inputs = [random(&mut rng, &[7])];
        let err = gradient_check(|t, v| t.softmax_cross_entropy(v[0], 4), &inputs, 1e-5).unwrap();
        assert!(err < 1e-5, "rel err {err}");

        let inputs = [random(&mut rng, &[3, 5])];
        let err = gradient_check(
            |t, v| t.softmax_cross_entropy_rows(v[0], &[Some(1), None, Some(4)]),
            &inputs,
            1e-5,
        )
        .unwrap();
        assert!(err < 1e-5, "rel err {err}");
    }

    #[test]
    fn sum_gradient_is_ones() {
        let mut tape = Tape::new();
        let w = tape.param(Tensor::zeros(&[2, 3]));
        let s = tape.sum(w);
        tape.backward(s).unwrap();
        assert_eq!(tape.grad(w).unwrap().data(), &[1.0; 6]);
        assert_eq!(tape.grad(w).unwrap().shape(), &[2, 3]);
    }

    #[test]
    fn constant_loss_has_no_gradients() {
        let mut tape = Tape::new();
        let c = tape.constant(Tensor::scalar(0.0));
        tape.backward(c).unwrap();
        assert!(tape.grad(c).is_none());
    }

    #[test]
    fn backward_twice_requires_reset() {
        let mut tape = Tape::new();
        let w = tape.param(Tensor::vector(vec![1.0, 2.0]));
        let s = tape.sum(w);
        tape.backward(s).unwrap();
        assert!(matches!(tape.backward(s), Err(Error::Contract(_))));
        tape.zero_grad();
        tape.backward(s).unwrap();
        assert_eq!(tape.grad(w).unwrap().data(), &[1.0, 1.0]);
    }

    #[test]
    fn backward_rejects_non_scalar() {
        let mut tape = Tape::new();
        let w = tape.param(Tensor::vector(vec![1.0, 2.0]));
        assert!(matches!(tape.backward(w), Err(Error::Contract(_))));
    }

    #[test]
    fn gradient_check_square_and_constant() {
        let err = gradient_check(|t, v| t.hadamard(v[0], v[0]), &[Tensor::scalar(3.0)], 1e-5).unwrap();
        assert!(err < 1e-9, "rel err {err}");

        let err = gradient_check(
            |t, _| Ok(t.constant(Tensor::scalar(2.5))),
            &[Tensor::vector(vec![1.0, 2.0])],
            1e-5,
        )
        .unwrap();
        assert_eq!(err, 0.0);

        assert!(gradient_check(|_, v| Ok(v[0]), &[Tensor::vector(vec![1.0, 2.0])], 1e-5).is_err());
        assert!(gradient_check(|_, v| Ok(v[0]), &[Tensor::scalar(1.0)], 0.0).is_err());
    }

    #[test]
    fn softmax_normalized_and_shift_invariant() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        for _ in 0..50 {
            let logits: Vec<f64> = (0..9).map(|_| rng.gen_range(-5.0..5.0)).collect();
            let p = softmax(&logits);
            assert!((p.iter().sum::<f64>() - 1.0).abs() < 1e-12);
            let shifted: Vec<f64> = logits.iter().map(|x| x + 123.25).collect();
            for (a, b) in p.iter().zip(softmax(&shifted)) {
                assert!((a - b).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn forward_and_backward_are_deterministic() {
        let run = || {
            let mut rng = ChaCha8Rng::seed_from_u64(99);
            let mut tape = Tape::new();
            let a = tape.param(random(&mut rng, &[4, 5]));
            let b = tape.param(random(&mut rng, &[5, 3]));
            let p = tape.matmul(a, b).unwrap();
            let loss = tape.softmax_cross_entropy_rows(p, &[Some(0), Some(2), None, Some(1)]).unwrap();
            tape.backward(loss).unwrap();
            (tape.value(loss).clone(), tape.grad(a).unwrap(), tape.grad(b).unwrap())
        };
        let (l1, a1, b1) = run();
        let (l2, a2, b2) = run();
        assert_eq!(l1.data()[0].to_bits(), l2.data()[0].to_bits());
        assert!(a1.data().iter().zip(a2.data()).all(|(x, y)| x.to_bits() == y.to_bits()));
        assert!(b1.data().iter().zip(b2.data()).all(|(x, y)| x.to_bits() == y.to_bits()));
    }
}

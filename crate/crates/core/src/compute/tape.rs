//! Reverse-mode differentiation tape.
//!
//! Every primitive appends a node holding its forward value and whatever it
//! needs for the backward rule. Nodes are appended in evaluation order, so
//! walking the vector backwards visits each node once in reverse topological
//! order.

use rand::Rng;
use rand_chacha::ChaCha8Rng;

use super::params::{Gradients, ParamId, ParamStore};
use super::tensor::{matmul_acc, matmul_nt_acc, matmul_tn_acc, Tensor};
use crate::error::{Error, Result};

pub const LAYER_NORM_EPS: f64 = 1e-5;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Var(usize);

enum Op {
    Constant,
    Param(ParamId),
    MatMul(Var, Var),
    AddBias(Var, Var),
    Add(Var, Var),
    Relu(Var),
    Scale(Var, f64),
    Dropout(Var, Vec<f64>),
    Unfold(Var, usize),
    ConcatCols(Vec<Var>),
    ConcatRows(Vec<Var>),
    SliceCols(Var, usize, usize),
    Transpose(Var),
    SoftmaxRows(Var),
    LayerNorm {
        x: Var,
        gamma: Var,
        beta: Var,
        xhat: Vec<f64>,
        inv_std: Vec<f64>,
    },
    Gather(Var, Vec<usize>),
    CrossEntropy {
        logits: Var,
        target: Vec<f64>,
        mask: Vec<bool>,
        probs: Vec<f64>,
    },
}

struct Node {
    value: Option<Tensor>,
    op: Op,
}

#[cfg(test)]
thread_local! {
    /// Mutation switch: when set, ReLU lets gradient through negative inputs.
    pub(crate) static CORRUPT_RELU_BACKWARD: std::cell::Cell<bool> = const { std::cell::Cell::new(false) };
}

pub struct Tape<'s> {
    store: &'s ParamStore,
    nodes: Vec<Node>,
    dropout_rng: Option<ChaCha8Rng>,
}

impl<'s> Tape<'s> {
    /// Inference tape: dropout is the identity.
    pub fn new(store: &'s ParamStore) -> Self {
        Self {
            store,
            nodes: Vec::new(),
            dropout_rng: None,
        }
    }

    /// Training tape: dropout masks are drawn from `rng`.
    pub fn training(store: &'s ParamStore, rng: ChaCha8Rng) -> Self {
        Self {
            store,
            nodes: Vec::new(),
            dropout_rng: Some(rng),
        }
    }

    pub fn store(&self) -> &'s ParamStore {
        self.store
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn is_training(&self) -> bool {
        self.dropout_rng.is_some()
    }

    pub fn value(&self, v: Var) -> &Tensor {
        let node = &self.nodes[v.0];
        match (&node.op, &node.value) {
            (Op::Param(id), _) => self.store.value(*id),
            (_, Some(t)) => t,
            (_, None) => unreachable!("non-parameter node without a value"),
        }
    }

    fn push(&mut self, value: Tensor, op: Op) -> Var {
        self.nodes.push(Node {
            value: Some(value),
            op,
        });
        Var(self.nodes.len() - 1)
    }

    fn dims(&self, v: Var) -> (usize, usize) {
        let t = self.value(v);
        (t.rows(), t.cols())
    }

    pub fn constant(&mut self, value: Tensor) -> Var {
        self.push(value, Op::Constant)
    }

    pub fn param(&mut self, id: ParamId) -> Var {
        self.nodes.push(Node {
            value: None,
            op: Op::Param(id),
        });
        Var(self.nodes.len() - 1)
    }

    pub fn check_finite(&self, v: Var, layer: &str) -> Result<Var> {
        if self.value(v).is_finite() {
            Ok(v)
        } else {
            Err(Error::NonFinite(layer.to_string()))
        }
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (n, m) = self.dims(a);
        let (m2, p) = self.dims(b);
        if m != m2 {
            return Err(Error::Shape(format!("matmul {n}×{m} · {m2}×{p}")));
        }
        let mut out = vec![0.0; n * p];
        matmul_acc(self.value(a).data(), self.value(b).data(), &mut out, n, m, p);
        Ok(self.push(Tensor::matrix(n, p, out)?, Op::MatMul(a, b)))
    }

    /// `x + b` with the `1×m` row `b` broadcast over every row of `x`.
    pub fn add_bias(&mut self, x: Var, b: Var) -> Result<Var> {
        let (n, m) = self.dims(x);
        if self.value(b).len() != m {
            return Err(Error::Shape(format!(
                "bias of {} values for width {m}",
                self.value(b).len()
            )));
        }
        let bias = self.value(b).data();
        let mut out = self.value(x).data().to_vec();
        for row in out.chunks_mut(m.max(1)) {
            for (o, bv) in row.iter_mut().zip(bias) {
                *o += bv;
            }
        }
        Ok(self.push(Tensor::matrix(n, m, out)?, Op::AddBias(x, b)))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        if self.value(a).shape() != self.value(b).shape() {
            return Err(Error::Shape(format!(
                "add {:?} + {:?}",
                self.value(a).shape(),
                self.value(b).shape()
            )));
        }
        let out: Vec<f64> = self
            .value(a)
            .data()
            .iter()
            .zip(self.value(b).data())
            .map(|(x, y)| x + y)
            .collect();
        let shape = self.value(a).shape().to_vec();
        Ok(self.push(Tensor::new(shape, out)?, Op::Add(a, b)))
    }

    pub fn relu(&mut self, x: Var) -> Var {
        let t = self.value(x);
        let out: Vec<f64> = t.data().iter().map(|v| v.max(0.0)).collect();
        let value = Tensor::new(t.shape().to_vec(), out).expect("same shape");
        self.push(value, Op::Relu(x))
    }

    pub fn scale(&mut self, x: Var, c: f64) -> Var {
        let t = self.value(x);
        let out: Vec<f64> = t.data().iter().map(|v| v * c).collect();
        let value = Tensor::new(t.shape().to_vec(), out).expect("same shape");
        self.push(value, Op::Scale(x, c))
    }

    /// Inverted dropout. Identity on an inference tape or when `p == 0`.
    pub fn dropout(&mut self, x: Var, p: f64) -> Var {
        if p <= 0.0 {
            return x;
        }
        if self.dropout_rng.is_none() {
            return x;
        }
        let len = self.value(x).len();
        let rng = self.dropout_rng.as_mut().expect("checked above");
        let keep = 1.0 / (1.0 - p);
        let mask: Vec<f64> = (0..len)
            .map(|_| if rng.gen::<f64>() < p { 0.0 } else { keep })
            .collect();
        let t = self.value(x);
        let out: Vec<f64> = t.data().iter().zip(&mask).map(|(v, m)| v * m).collect();
        let value = Tensor::new(t.shape().to_vec(), out).expect("same shape");
        self.push(value, Op::Dropout(x, mask))
    }

    /// Row `j` of the output is rows `j..j+k` of `x` laid end to end.
    pub fn unfold(&mut self, x: Var, k: usize) -> Result<Var> {
        let (n, d) = self.dims(x);
        if k == 0 || n < k {
            return Err(Error::EmptyOutput { len: n, window: k });
        }
        let rows = n - k + 1;
        let src = self.value(x).data();
        let mut out = Vec::with_capacity(rows * k * d);
        for j in 0..rows {
            out.extend_from_slice(&src[j * d..(j + k) * d]);
        }
        Ok(self.push(Tensor::matrix(rows, k * d, out)?, Op::Unfold(x, k)))
    }

    pub fn concat_cols(&mut self, parts: &[Var]) -> Result<Var> {
        let n = parts.first().map_or(0, |&v| self.dims(v).0);
        let mut total = 0;
        for &v in parts {
            let (r, c) = self.dims(v);
            if r != n {
                return Err(Error::Shape(format!("concat_cols rows {r} vs {n}")));
            }
            total += c;
        }
        let mut out = Vec::with_capacity(n * total);
        for r in 0..n {
            for &v in parts {
                out.extend_from_slice(self.value(v).row(r));
            }
        }
        Ok(self.push(Tensor::matrix(n, total, out)?, Op::ConcatCols(parts.to_vec())))
    }

    pub fn concat_rows(&mut self, parts: &[Var]) -> Result<Var> {
        let m = parts.first().map_or(0, |&v| self.dims(v).1);
        let mut rows = 0;
        let mut out = Vec::new();
        for &v in parts {
            let (r, c) = self.dims(v);
            if c != m {
                return Err(Error::Shape(format!("concat_rows cols {c} vs {m}")));
            }
            rows += r;
            out.extend_from_slice(self.value(v).data());
        }
        Ok(self.push(Tensor::matrix(rows, m, out)?, Op::ConcatRows(parts.to_vec())))
    }

    pub fn slice_cols(&mut self, x: Var, start: usize, end: usize) -> Result<Var> {
        let (n, m) = self.dims(x);
        if start > end || end > m {
            return Err(Error::Shape(format!("slice {start}..{end} of width {m}")));
        }
        let t = self.value(x);
        let mut out = Vec::with_capacity(n * (end - start));
        for r in 0..n {
            out.extend_from_slice(&t.row(r)[start..end]);
        }
        Ok(self.push(
            Tensor::matrix(n, end - start, out)?,
            Op::SliceCols(x, start, end),
        ))
    }

    pub fn transpose(&mut self, x: Var) -> Var {
        let (n, m) = self.dims(x);
        let t = self.value(x).data();
        let mut out = vec![0.0; n * m];
        for i in 0..n {
            for j in 0..m {
                out[j * n + i] = t[i * m + j];
            }
        }
        let value = Tensor::matrix(m, n, out).expect("transpose shape");
        self.push(value, Op::Transpose(x))
    }

    pub fn softmax_rows(&mut self, x: Var) -> Var {
        let (n, m) = self.dims(x);
        let mut out = self.value(x).data().to_vec();
        for row in out.chunks_mut(m.max(1)) {
            softmax_in_place(row);
        }
        let value = Tensor::matrix(n, m, out).expect("softmax shape");
        self.push(value, Op::SoftmaxRows(x))
    }

    /// Row-wise layer normalization with learned `1×m` gain and shift.
    pub fn layer_norm(&mut self, x: Var, gamma: Var, beta: Var) -> Result<Var> {
        let (n, m) = self.dims(x);
        if self.value(gamma).len() != m || self.value(beta).len() != m {
            return Err(Error::Shape(format!("layer norm width {m}")));
        }
        let src = self.value(x).data();
        let g = self.value(gamma).data();
        let b = self.value(beta).data();
        let mut xhat = vec![0.0; n * m];
        let mut inv_std = vec![0.0; n];
        let mut out = vec![0.0; n * m];
        for r in 0..n {
            let row = &src[r * m..(r + 1) * m];
            let mean = row.iter().sum::<f64>() / m as f64;
            let var = row.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / m as f64;
            let is = 1.0 / (var + LAYER_NORM_EPS).sqrt();
            inv_std[r] = is;
            for c in 0..m {
                let h = (row[c] - mean) * is;
                xhat[r * m + c] = h;
                out[r * m + c] = g[c] * h + b[c];
            }
        }
        Ok(self.push(
            Tensor::matrix(n, m, out)?,
            Op::LayerNorm {
                x,
                gamma,
                beta,
                xhat,
                inv_std,
            },
        ))
    }

    /// Selects rows of `table` by index.
    pub fn gather_rows(&mut self, table: Var, indices: &[usize]) -> Result<Var> {
        let (n, m) = self.dims(table);
        let t = self.value(table);
        let mut out = Vec::with_capacity(indices.len() * m);
        for &i in indices {
            if i >= n {
                return Err(Error::Shape(format!("row {i} of a {n}-row table")));
            }
            out.extend_from_slice(t.row(i));
        }
        Ok(self.push(
            Tensor::matrix(indices.len(), m, out)?,
            Op::Gather(table, indices.to_vec()),
        ))
    }

    /// Cross entropy between `target` and the softmax of `logits` restricted
    /// to entries where `mask` is true. Returns a `1×1` node.
    pub fn cross_entropy(&mut self, logits: Var, target: &[f64], mask: &[bool]) -> Result<Var> {
        let values = self.value(logits).data();
        let (loss, probs) = masked_cross_entropy(values, target, mask)?;
        if !loss.is_finite() {
            return Err(Error::NonFinite("cross entropy".into()));
        }
        Ok(self.push(
            Tensor::scalar(loss),
            Op::CrossEntropy {
                logits,
                target: target.to_vec(),
                mask: mask.to_vec(),
                probs,
            },
        ))
    }

    /// Gradients of the scalar node `output` with respect to every parameter.
    pub fn backward(&self, output: Var) -> Result<Gradients> {
        if self.value(output).len() != 1 {
            return Err(Error::Shape(format!(
                "backward from non-scalar {:?}",
                self.value(output).shape()
            )));
        }
        let mut grads: Vec<Option<Tensor>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[output.0] = Some(Tensor::scalar(1.0));
        let mut result = Gradients::zeros(self.store.len());

        for idx in (0..=output.0).rev() {
            let Some(g) = grads[idx].take() else {
                continue;
            };
            let node = &self.nodes[idx];
            match &node.op {
                Op::Constant => {}
                Op::Param(id) => match &mut result.per_param[id.index()] {
                    Some(acc) => acc.add_assign(&g),
                    slot @ None => *slot = Some(g),
                },
                Op::MatMul(a, b) => {
                    let (n, m) = self.dims(*a);
                    let p = self.dims(*b).1;
                    let ga = grad_slot(&mut grads, *a, self.value(*a).shape());
                    matmul_nt_acc(g.data(), self.value(*b).data(), ga.data_mut(), n, p, m);
                    let gb = grad_slot(&mut grads, *b, self.value(*b).shape());
                    matmul_tn_acc(self.value(*a).data(), g.data(), gb.data_mut(), n, m, p);
                }
                Op::AddBias(x, b) => {
                    let m = self.dims(*x).1;
                    grad_slot(&mut grads, *x, self.value(*x).shape()).add_assign(&g);
                    let gb = grad_slot(&mut grads, *b, self.value(*b).shape());
                    for row in g.data().chunks(m.max(1)) {
                        for (acc, v) in gb.data_mut().iter_mut().zip(row) {
                            *acc += v;
                        }
                    }
                }
                Op::Add(a, b) => {
                    grad_slot(&mut grads, *a, self.value(*a).shape()).add_assign(&g);
                    grad_slot(&mut grads, *b, self.value(*b).shape()).add_assign(&g);
                }
                Op::Relu(x) => {
                    let xv = self.value(*x).data();
                    #[cfg(test)]
                    let corrupt = CORRUPT_RELU_BACKWARD.with(|c| c.get());
                    #[cfg(not(test))]
                    let corrupt = false;
                    let gx = grad_slot(&mut grads, *x, self.value(*x).shape());
                    for ((acc, gv), xv) in gx.data_mut().iter_mut().zip(g.data()).zip(xv) {
                        if *xv > 0.0 || corrupt {
                            *acc += gv;
                        }
                    }
                }
                Op::Scale(x, c) => {
                    grad_slot(&mut grads, *x, self.value(*x).shape()).add_scaled(&g, *c);
                }
                Op::Dropout(x, mask) => {
                    let gx = grad_slot(&mut grads, *x, self.value(*x).shape());
                    for ((acc, gv), m) in gx.data_mut().iter_mut().zip(g.data()).zip(mask) {
                        *acc += gv * m;
                    }
                }
                Op::Unfold(x, k) => {
                    let d = self.dims(*x).1;
                    let width = k * d;
                    let gx = grad_slot(&mut grads, *x, self.value(*x).shape());
                    for (j, row) in g.data().chunks(width.max(1)).enumerate() {
                        for (acc, v) in gx.data_mut()[j * d..j * d + width].iter_mut().zip(row) {
                            *acc += v;
                        }
                    }
                }
                Op::ConcatCols(parts) => {
                    let total = g.cols();
                    let mut offset = 0;
                    for &p in parts {
                        let (n, c) = self.dims(p);
                        let gp = grad_slot(&mut grads, p, self.value(p).shape());
                        for r in 0..n {
                            let src = &g.data()[r * total + offset..r * total + offset + c];
                            for (acc, v) in gp.data_mut()[r * c..(r + 1) * c].iter_mut().zip(src) {
                                *acc += v;
                            }
                        }
                        offset += c;
                    }
                }
                Op::ConcatRows(parts) => {
                    let mut offset = 0;
                    for &p in parts {
                        let len = self.value(p).len();
                        let gp = grad_slot(&mut grads, p, self.value(p).shape());
                        for (acc, v) in gp.data_mut().iter_mut().zip(&g.data()[offset..offset + len]) {
                            *acc += v;
                        }
                        offset += len;
                    }
                }
                Op::SliceCols(x, start, end) => {
                    let (n, m) = self.dims(*x);
                    let w = end - start;
                    let gx = grad_slot(&mut grads, *x, self.value(*x).shape());
                    for r in 0..n {
                        let dst = &mut gx.data_mut()[r * m + start..r * m + end];
                        for (acc, v) in dst.iter_mut().zip(&g.data()[r * w..(r + 1) * w]) {
                            *acc += v;
                        }
                    }
                }
                Op::Transpose(x) => {
                    let (n, m) = self.dims(*x);
                    let gx = grad_slot(&mut grads, *x, self.value(*x).shape());
                    for i in 0..n {
                        for j in 0..m {
                            gx.data_mut()[i * m + j] += g.data()[j * n + i];
                        }
                    }
                }
                Op::SoftmaxRows(x) => {
                    let m = self.dims(*x).1.max(1);
                    let y = node.value.as_ref().expect("softmax value").data();
                    let gx = grad_slot(&mut grads, *x, self.value(*x).shape());
                    for ((dst, yr), gr) in gx
                        .data_mut()
                        .chunks_mut(m)
                        .zip(y.chunks(m))
                        .zip(g.data().chunks(m))
                    {
                        let dot: f64 = yr.iter().zip(gr).map(|(a, b)| a * b).sum();
                        for ((acc, yv), gv) in dst.iter_mut().zip(yr).zip(gr) {
                            *acc += yv * (gv - dot);
                        }
                    }
                }
                Op::LayerNorm {
                    x,
                    gamma,
                    beta,
                    xhat,
                    inv_std,
                } => {
                    let (n, m) = self.dims(*x);
                    let gv = self.value(*gamma).data().to_vec();
                    {
                        let gg = grad_slot(&mut grads, *gamma, self.value(*gamma).shape());
                        for r in 0..n {
                            for c in 0..m {
                                gg.data_mut()[c] += g.data()[r * m + c] * xhat[r * m + c];
                            }
                        }
                    }
                    {
                        let gb = grad_slot(&mut grads, *beta, self.value(*beta).shape());
                        for r in 0..n {
                            for c in 0..m {
                                gb.data_mut()[c] += g.data()[r * m + c];
                            }
                        }
                    }
                    let gx = grad_slot(&mut grads, *x, self.value(*x).shape());
                    let mf = m as f64;
                    for r in 0..n {
                        let dxhat: Vec<f64> = (0..m).map(|c| g.data()[r * m + c] * gv[c]).collect();
                        let sum: f64 = dxhat.iter().sum();
                        let sum_xh: f64 = dxhat
                            .iter()
                            .zip(&xhat[r * m..(r + 1) * m])
                            .map(|(a, b)| a * b)
                            .sum();
                        for c in 0..m {
                            gx.data_mut()[r * m + c] += inv_std[r] / mf
                                * (mf * dxhat[c] - sum - xhat[r * m + c] * sum_xh);
                        }
                    }
                }
                Op::Gather(table, indices) => {
                    let m = self.dims(*table).1;
                    let gt = grad_slot(&mut grads, *table, self.value(*table).shape());
                    for (row, &i) in g.data().chunks(m.max(1)).zip(indices) {
                        for (acc, v) in gt.data_mut()[i * m..(i + 1) * m].iter_mut().zip(row) {
                            *acc += v;
                        }
                    }
                }
                Op::CrossEntropy {
                    logits,
                    target,
                    mask,
                    probs,
                } => {
                    let upstream = g.data()[0];
                    let total: f64 = target.iter().sum();
                    let gl = grad_slot(&mut grads, *logits, self.value(*logits).shape());
                    for (i, acc) in gl.data_mut().iter_mut().enumerate() {
                        if mask[i] {
                            *acc += upstream * (probs[i] * total - target[i]);
                        }
                    }
                }
            }
        }
        Ok(result)
    }
}

fn grad_slot<'g>(grads: &'g mut [Option<Tensor>], v: Var, shape: &[usize]) -> &'g mut Tensor {
    grads[v.0].get_or_insert_with(|| Tensor::zeros(shape))
}

/// Numerically stable softmax with max subtraction.
pub fn softmax_in_place(values: &mut [f64]) {
    let max = values.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let mut sum = 0.0;
    for v in values.iter_mut() {
        *v = (*v - max).exp();
        sum += *v;
    }
    for v in values.iter_mut() {
        *v /= sum;
    }
}

/// Softmax over the entries where `mask` is true; masked entries get exactly 0.
pub fn masked_softmax(logits: &[f64], mask: &[bool]) -> Result<Vec<f64>> {
    if logits.len() != mask.len() {
        return Err(Error::Shape(format!(
            "{} logits with a mask of {}",
            logits.len(),
            mask.len()
        )));
    }
    let max = logits
        .iter()
        .zip(mask)
        .filter(|(_, &m)| m)
        .map(|(&v, _)| v)
        .fold(f64::NEG_INFINITY, f64::max);
    if max == f64::NEG_INFINITY {
        return Err(Error::NoValidSpans);
    }
    let mut out: Vec<f64> = logits
        .iter()
        .zip(mask)
        .map(|(&v, &m)| if m { (v - max).exp() } else { 0.0 })
        .collect();
    let sum: f64 = out.iter().sum();
    out.iter_mut().for_each(|v| *v /= sum);
    Ok(out)
}

/// Returns the masked cross-entropy loss and the masked softmax.
pub fn masked_cross_entropy(logits: &[f64], target: &[f64], mask: &[bool]) -> Result<(f64, Vec<f64>)> {
    if target.len() != logits.len() {
        return Err(Error::Shape(format!(
            "{} logits with a target of {}",
            logits.len(),
            target.len()
        )));
    }
    validate_target(target)?;
    for (i, (&t, &m)) in target.iter().zip(mask).enumerate() {
        if t > 0.0 && !m {
            return Err(Error::InvalidTarget(format!("mass {t} on masked entry {i}")));
        }
    }
    let probs = masked_softmax(logits, mask)?;
    let max = logits
        .iter()
        .zip(mask)
        .filter(|(_, &m)| m)
        .map(|(&v, _)| v)
        .fold(f64::NEG_INFINITY, f64::max);
    let lse = max
        + logits
            .iter()
            .zip(mask)
            .filter(|(_, &m)| m)
            .map(|(&v, _)| (v - max).exp())
            .sum::<f64>()
            .ln();
    let loss = target
        .iter()
        .zip(logits)
        .filter(|(&t, _)| t > 0.0)
        .map(|(&t, &z)| -t * (z - lse))
        .sum();
    Ok((loss, probs))
}

/// Cross entropy of `target` against `softmax(logits)` and its gradient
/// with respect to the logits, `softmax(logits) − target`.
pub fn softmax_cross_entropy(logits: &[f64], target: &[f64]) -> Result<(f64, Vec<f64>)> {
    let mask = vec![true; logits.len()];
    let (loss, probs) = masked_cross_entropy(logits, target, &mask)?;
    let grad = probs.iter().zip(target).map(|(p, t)| p - t).collect();
    Ok((loss, grad))
}

fn validate_target(target: &[f64]) -> Result<()> {
    if let Some(t) = target.iter().find(|t| !(t.is_finite() && **t >= 0.0)) {
        return Err(Error::InvalidTarget(format!("entry {t}")));
    }
    let sum: f64 = target.iter().sum();
    if sum == 0.0 {
        return Err(Error::InvalidTarget("all targets are zero".into()));
    }
    if (sum - 1.0).abs() > 1e-9 {
        return Err(Error::InvalidTarget(format!("sums to {sum}")));
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;

    #[test]
    fn uniform_logits_two_positives_of_seven() {
        let logits = [0.0; 7];
        let mut target = [0.0; 7];
        target[1] = 0.5;
        target[4] = 0.5;
        let (loss, grad) = softmax_cross_entropy(&logits, &target).unwrap();
        assert_abs_diff_eq!(loss, 7f64.ln(), epsilon = 1e-12);
        assert_abs_diff_eq!(loss, 1.9459, epsilon = 1e-4);
        for (i, g) in grad.iter().enumerate() {
            assert_abs_diff_eq!(*g, 1.0 / 7.0 - target[i], epsilon = 1e-15);
        }
    }

    #[test]
    fn large_margin_one_hot_goes_to_zero() {
        let logits = [0.0, 800.0, -3.0];
        let (loss, _) = softmax_cross_entropy(&logits, &[0.0, 1.0, 0.0]).unwrap();
        assert!(loss < 1e-300 || loss == 0.0);
    }

    #[test]
    fn zero_target_is_rejected() {
        assert!(matches!(
            softmax_cross_entropy(&[1.0, 2.0], &[0.0, 0.0]),
            Err(Error::InvalidTarget(_))
        ));
        assert!(softmax_cross_entropy(&[1.0, 2.0], &[0.5, 0.4]).is_err());
    }

    #[test]
    fn masked_entries_get_zero_probability() {
        let p = masked_softmax(&[1.0, 50.0, 2.0], &[true, false, true]).unwrap();
        assert_eq!(p[1], 0.0);
        assert_abs_diff_eq!(p[0] + p[2], 1.0, epsilon = 1e-12);
        assert!(matches!(
            masked_softmax(&[1.0], &[false]),
            Err(Error::NoValidSpans)
        ));
    }

    #[test]
    fn op_free_tape_backward_is_zero() {
        let mut store = ParamStore::new();
        let w = store.add_constant("w", 2, 2, 1.0).unwrap();
        let mut tape = Tape::new(&store);
        let _unused = tape.param(w);
        let out = tape.constant(Tensor::scalar(3.0));
        let grads = tape.backward(out).unwrap();
        assert!(grads.get(w).is_none());
        assert_eq!(grads.coordinate(w, 3), 0.0);
    }

    #[test]
    fn dropout_is_identity_at_inference_and_for_zero_rate() {
        use rand::SeedableRng;
        let store = ParamStore::new();
        let mut tape = Tape::new(&store);
        let x = tape.constant(Tensor::matrix(1, 4, vec![1.0, 2.0, 3.0, 4.0]).unwrap());
        assert_eq!(tape.dropout(x, 0.5), x);

        let mut tape = Tape::training(&store, ChaCha8Rng::seed_from_u64(0));
        let x = tape.constant(Tensor::matrix(1, 4, vec![1.0, 2.0, 3.0, 4.0]).unwrap());
        assert_eq!(tape.dropout(x, 0.0), x);
        let y = tape.dropout(x, 0.5);
        for (a, b) in tape.value(y).data().iter().zip([1.0, 2.0, 3.0, 4.0]) {
            assert!(*a == 0.0 || (*a - 2.0 * b).abs() < 1e-12);
        }
    }

    #[test]
    fn softmax_is_shift_invariant() {
        let mut a = vec![0.3, -1.2, 4.0, 0.0];
        let mut b: Vec<f64> = a.iter().map(|v| v + 123.0).collect();
        softmax_in_place(&mut a);
        softmax_in_place(&mut b);
        for (x, y) in a.iter().zip(&b) {
            assert_abs_diff_eq!(x, y, epsilon = 1e-12);
        }
        assert_abs_diff_eq!(a.iter().sum::<f64>(), 1.0, epsilon = 1e-12);
    }
}

//! Tape-based reverse-mode differentiation over [`Tensor`]s.
//!
//! Nodes are appended in evaluation order, so the tape is a topological order
//! by construction and the backward sweep is a single reverse pass. A node
//! needs a gradient when any of its inputs does; constants never do.

use std::collections::BTreeMap;

use rand::Rng;

use super::tensor::{matmul, matmul_nt, matmul_tn, Tensor};
use crate::error::{Error, Result};

/// Additive sentinel used to exclude attention entries before a softmax.
pub const MASK_NEG: f64 = -1e30;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

#[derive(Debug)]
enum Op {
    Leaf,
    MatMul(Var, Var),
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    AddRow(Var, Var),
    MulCol(Var, Var),
    Scale(Var, f64),
    Shift(Var),
    Sigmoid(Var),
    Tanh(Var),
    Relu(Var),
    Softplus(Var, f64),
    Log(Var),
    ClampMin(Var, f64),
    SoftmaxRows(Var),
    LogSoftmaxRows(Var),
    LayerNorm {
        x: Var,
        gain: Var,
        bias: Var,
        xhat: Tensor,
        inv_std: Vec<f64>,
    },
    Embedding {
        table: Var,
        ids: Vec<usize>,
    },
    Conv1d {
        x: Var,
        kernel: Var,
        bias: Var,
        stride: usize,
        padding: usize,
    },
    MaxPool {
        x: Var,
        argmax: Vec<usize>,
    },
    Dropout {
        x: Var,
        mask: Tensor,
    },
    ConcatCols(Vec<Var>),
    ConcatRows(Vec<Var>),
    SliceCols {
        x: Var,
        start: usize,
    },
    SliceRows {
        x: Var,
        start: usize,
    },
    Transpose(Var),
    Sum(Var),
    Mean(Var),
    SumRows(Var),
    Gather {
        x: Var,
        idx: Vec<(usize, usize)>,
    },
    RepeatRows {
        x: Var,
        times: usize,
    },
}

struct Node {
    value: Tensor,
    op: Op,
    requires_grad: bool,
}

/// Gradients of a scalar loss, keyed by parameter name.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct Gradients {
    map: BTreeMap<String, Tensor>,
}

impl Gradients {
    pub fn get(&self, name: &str) -> Option<&Tensor> {
        self.map.get(name)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&String, &Tensor)> {
        self.map.iter()
    }

    pub fn len(&self) -> usize {
        self.map.len()
    }

    pub fn is_empty(&self) -> bool {
        self.map.is_empty()
    }

    pub fn insert(&mut self, name: String, grad: Tensor) {
        self.map.insert(name, grad);
    }

    /// Adds `other` into `self`; names missing on either side are kept.
    pub fn accumulate(&mut self, other: &Gradients) {
        for (name, g) in &other.map {
            match self.map.get_mut(name) {
                Some(acc) => acc.add_assign(g),
                None => {
                    self.map.insert(name.clone(), g.clone());
                }
            }
        }
    }

    pub fn scale(&mut self, k: f64) {
        for g in self.map.values_mut() {
            for v in g.data_mut() {
                *v *= k;
            }
        }
    }

    pub fn global_norm(&self) -> f64 {
        self.map.values().map(Tensor::sum_sq).sum::<f64>().sqrt()
    }
}

#[derive(Default)]
pub struct Graph {
    nodes: Vec<Node>,
    params: Vec<(String, Var)>,
}

impl Graph {
    pub fn new() -> Self {
        Self::default()
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

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    /// Trainable leaf; its gradient is reported under `name`.
    pub fn param(&mut self, name: impl Into<String>, value: Tensor) -> Var {
        let v = self.push_unchecked(value, Op::Leaf, true);
        self.params.push((name.into(), v));
        v
    }

    pub fn constant(&mut self, value: Tensor) -> Var {
        self.push_unchecked(value, Op::Leaf, false)
    }

    fn push_unchecked(&mut self, value: Tensor, op: Op, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    fn push(&mut self, name: &'static str, value: Tensor, op: Op, parents: &[Var]) -> Result<Var> {
        if !value.all_finite() {
            return Err(Error::NonFinite { op: name.into() });
        }
        let requires_grad = parents.iter().any(|p| self.nodes[p.0].requires_grad);
        Ok(self.push_unchecked(value, op, requires_grad))
    }

    fn dims(&self, v: Var) -> (usize, usize) {
        let t = &self.nodes[v.0].value;
        (t.rows(), t.cols())
    }

    fn same_shape(&self, op: &'static str, a: Var, b: Var) -> Result<()> {
        if self.dims(a) != self.dims(b) {
            return Err(Error::shape(
                op,
                format!("{:?} vs {:?}", self.dims(a), self.dims(b)),
            ));
        }
        Ok(())
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let ((m, k), (k2, n)) = (self.dims(a), self.dims(b));
        if k != k2 {
            return Err(Error::shape("matmul", format!("{m}x{k} · {k2}x{n}")));
        }
        let out = matmul(self.value(a), self.value(b));
        self.push("matmul", out, Op::MatMul(a, b), &[a, b])
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("add", a, b)?;
        let out = self.value(a).zip_map(self.value(b), |x, y| x + y);
        self.push("add", out, Op::Add(a, b), &[a, b])
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("sub", a, b)?;
        let out = self.value(a).zip_map(self.value(b), |x, y| x - y);
        self.push("sub", out, Op::Sub(a, b), &[a, b])
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("mul", a, b)?;
        let out = self.value(a).zip_map(self.value(b), |x, y| x * y);
        self.push("mul", out, Op::Mul(a, b), &[a, b])
    }

    /// Broadcasts a `1 × c` row over every row of `x`.
    pub fn add_row(&mut self, x: Var, row: Var) -> Result<Var> {
        let ((r, c), (r2, c2)) = (self.dims(x), self.dims(row));
        if r2 != 1 || c2 != c {
            return Err(Error::shape("add_row", format!("{r}x{c} + {r2}x{c2}")));
        }
        let b = self.value(row).data().to_vec();
        let mut out = self.value(x).clone();
        for chunk in out.data_mut().chunks_mut(c) {
            for (o, bv) in chunk.iter_mut().zip(&b) {
                *o += bv;
            }
        }
        self.push("add_row", out, Op::AddRow(x, row), &[x, row])
    }

    /// Scales row `i` of `x` by `col[i]` (`col` is `r × 1`).
    pub fn mul_col(&mut self, x: Var, col: Var) -> Result<Var> {
        let ((r, c), (r2, c2)) = (self.dims(x), self.dims(col));
        if r2 != r || c2 != 1 {
            return Err(Error::shape("mul_col", format!("{r}x{c} * {r2}x{c2}")));
        }
        let w = self.value(col).data().to_vec();
        let mut out = self.value(x).clone();
        for (chunk, wv) in out.data_mut().chunks_mut(c).zip(&w) {
            for o in chunk {
                *o *= wv;
            }
        }
        self.push("mul_col", out, Op::MulCol(x, col), &[x, col])
    }

    pub fn scale(&mut self, x: Var, k: f64) -> Result<Var> {
        let out = self.value(x).map(|v| v * k);
        self.push("scale", out, Op::Scale(x, k), &[x])
    }

    pub fn add_scalar(&mut self, x: Var, k: f64) -> Result<Var> {
        let out = self.value(x).map(|v| v + k);
        self.push("add_scalar", out, Op::Shift(x), &[x])
    }

    pub fn sigmoid(&mut self, x: Var) -> Result<Var> {
        let out = self.value(x).map(sigmoid);
        self.push("sigmoid", out, Op::Sigmoid(x), &[x])
    }

    pub fn tanh(&mut self, x: Var) -> Result<Var> {
        let out = self.value(x).map(f64::tanh);
        self.push("tanh", out, Op::Tanh(x), &[x])
    }

    pub fn relu(&mut self, x: Var) -> Result<Var> {
        let out = self.value(x).map(|v| v.max(0.0));
        self.push("relu", out, Op::Relu(x), &[x])
    }

    /// `(1/β)·ln(1 + e^{βx})`.
    pub fn softplus(&mut self, x: Var, beta: f64) -> Result<Var> {
        if !(beta > 0.0) {
            return Err(Error::Config(format!(
                "softplus beta must be > 0, got {beta}"
            )));
        }
        let out = self.value(x).map(|v| softplus_beta(v, beta));
        self.push("softplus", out, Op::Softplus(x, beta), &[x])
    }

    pub fn log(&mut self, x: Var) -> Result<Var> {
        let out = self.value(x).map(f64::ln);
        self.push("log", out, Op::Log(x), &[x])
    }

    /// `max(x, floor)`; entries at the floor pass no gradient.
    pub fn clamp_min(&mut self, x: Var, floor: f64) -> Result<Var> {
        let out = self.value(x).map(|v| v.max(floor));
        self.push("clamp_min", out, Op::ClampMin(x, floor), &[x])
    }

    /// Row-wise softmax. Entries pushed towards [`MASK_NEG`] come out as exact zeros.
    pub fn softmax_rows(&mut self, x: Var) -> Result<Var> {
        let t = self.value(x);
        let c = t.cols();
        let mut out = t.clone();
        for row in out.data_mut().chunks_mut(c) {
            softmax_in_place(row);
        }
        self.push("softmax_rows", out, Op::SoftmaxRows(x), &[x])
    }

    pub fn log_softmax_rows(&mut self, x: Var) -> Result<Var> {
        let t = self.value(x);
        let c = t.cols();
        let mut out = t.clone();
        for row in out.data_mut().chunks_mut(c) {
            let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let lse = max + row.iter().map(|v| (v - max).exp()).sum::<f64>().ln();
            for v in row.iter_mut() {
                *v -= lse;
            }
        }
        self.push("log_softmax_rows", out, Op::LogSoftmaxRows(x), &[x])
    }

    /// Row-wise layer normalization with learned `1 × c` gain and shift.
    pub fn layer_norm(&mut self, x: Var, gain: Var, bias: Var, eps: f64) -> Result<Var> {
        let (r, c) = self.dims(x);
        if self.dims(gain) != (1, c) || self.dims(bias) != (1, c) {
            return Err(Error::shape("layer_norm", format!("x {r}x{c}")));
        }
        let t = self.value(x);
        let g = self.value(gain).data();
        let b = self.value(bias).data();
        let mut xhat = t.clone();
        let mut out = t.clone();
        let mut inv_std = Vec::with_capacity(r);
        for i in 0..r {
            let row = t.row(i);
            let mean = row.iter().sum::<f64>() / c as f64;
            let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / c as f64;
            let is = 1.0 / (var + eps).sqrt();
            inv_std.push(is);
            for j in 0..c {
                let xh = (row[j] - mean) * is;
                xhat.data_mut()[i * c + j] = xh;
                out.data_mut()[i * c + j] = xh * g[j] + b[j];
            }
        }
        let op = Op::LayerNorm {
            x,
            gain,
            bias,
            xhat,
            inv_std,
        };
        self.push("layer_norm", out, op, &[x, gain, bias])
    }

    /// Looks up rows of `table`; id 0 yields a zero row and never touches the table.
    pub fn embedding(&mut self, table: Var, ids: &[usize]) -> Result<Var> {
        let (n_rows, d) = self.dims(table);
        if ids.is_empty() {
            return Err(Error::shape("embedding", "no ids"));
        }
        if let Some(&bad) = ids.iter().find(|&&id| id >= n_rows) {
            return Err(Error::shape(
                "embedding",
                format!("id {bad} outside table of {n_rows} rows"),
            ));
        }
        let t = self.value(table);
        let mut out = vec![0.0; ids.len() * d];
        for (k, &id) in ids.iter().enumerate() {
            if id != 0 {
                out[k * d..(k + 1) * d].copy_from_slice(t.row(id));
            }
        }
        let out = Tensor::from_rows(ids.len(), d, out)?;
        let op = Op::Embedding {
            table,
            ids: ids.to_vec(),
        };
        self.push("embedding", out, op, &[table])
    }

    /// Single-channel 1-D convolution sliding along the feature axis of every row.
    pub fn conv1d_feature(
        &mut self,
        x: Var,
        kernel: Var,
        bias: Var,
        stride: usize,
        padding: usize,
    ) -> Result<Var> {
        let (r, l) = self.dims(x);
        let (kr, k) = self.dims(kernel);
        if kr != 1 || self.dims(bias) != (1, 1) || stride == 0 {
            return Err(Error::shape(
                "conv1d_feature",
                "kernel must be 1xk, bias 1x1",
            ));
        }
        let out_len = conv_out_len(l, k, stride, padding).ok_or_else(|| {
            Error::shape(
                "conv1d_feature",
                format!("length {l} too short for kernel {k}"),
            )
        })?;
        let t = self.value(x);
        let w = self.value(kernel).data();
        let b = self.value(bias).item();
        let mut out = vec![0.0; r * out_len];
        for i in 0..r {
            let row = t.row(i);
            for o in 0..out_len {
                let mut acc = b;
                for (j, wj) in w.iter().enumerate() {
                    let pos = (o * stride + j) as isize - padding as isize;
                    if pos >= 0 && (pos as usize) < l {
                        acc += wj * row[pos as usize];
                    }
                }
                out[i * out_len + o] = acc;
            }
        }
        let out = Tensor::from_rows(r, out_len, out)?;
        let op = Op::Conv1d {
            x,
            kernel,
            bias,
            stride,
            padding,
        };
        self.push("conv1d_feature", out, op, &[x, kernel, bias])
    }

    pub fn maxpool1d_feature(&mut self, x: Var, size: usize, stride: usize) -> Result<Var> {
        let (r, l) = self.dims(x);
        let out_len = conv_out_len(l, size, stride, 0).ok_or_else(|| {
            Error::shape(
                "maxpool1d_feature",
                format!("length {l} too short for window {size}"),
            )
        })?;
        let t = self.value(x);
        let mut out = vec![0.0; r * out_len];
        let mut argmax = vec![0; r * out_len];
        for i in 0..r {
            let row = t.row(i);
            for o in 0..out_len {
                let start = o * stride;
                let mut best = start;
                for j in start + 1..start + size {
                    if row[j] > row[best] {
                        best = j;
                    }
                }
                out[i * out_len + o] = row[best];
                argmax[i * out_len + o] = i * l + best;
            }
        }
        let out = Tensor::from_rows(r, out_len, out)?;
        self.push("maxpool1d_feature", out, Op::MaxPool { x, argmax }, &[x])
    }

    /// Inverted dropout. With `rng = None` (evaluation) this returns `x` itself.
    pub fn dropout<R: Rng>(&mut self, x: Var, rate: f64, rng: Option<&mut R>) -> Result<Var> {
        let Some(rng) = rng else { return Ok(x) };
        if rate <= 0.0 {
            return Ok(x);
        }
        if rate >= 1.0 {
            return Err(Error::Config(format!(
                "dropout rate must be < 1, got {rate}"
            )));
        }
        let keep = 1.0 / (1.0 - rate);
        let t = self.value(x);
        let mask_data: Vec<f64> = (0..t.len())
            .map(|_| {
                if rng.random::<f64>() < rate {
                    0.0
                } else {
                    keep
                }
            })
            .collect();
        let mask = Tensor::new(t.shape().to_vec(), mask_data)?;
        let out = t.zip_map(&mask, |a, m| a * m);
        self.push("dropout", out, Op::Dropout { x, mask }, &[x])
    }

    pub fn concat_cols(&mut self, parts: &[Var]) -> Result<Var> {
        let r = self.dims(parts[0]).0;
        if parts.iter().any(|&p| self.dims(p).0 != r) {
            return Err(Error::shape("concat_cols", "row counts differ"));
        }
        let total: usize = parts.iter().map(|&p| self.dims(p).1).sum();
        let mut out = vec![0.0; r * total];
        let mut offset = 0;
        for &p in parts {
            let t = self.value(p);
            let c = t.cols();
            for i in 0..r {
                out[i * total + offset..i * total + offset + c].copy_from_slice(t.row(i));
            }
            offset += c;
        }
        let out = Tensor::from_rows(r, total, out)?;
        self.push("concat_cols", out, Op::ConcatCols(parts.to_vec()), parts)
    }

    pub fn concat_rows(&mut self, parts: &[Var]) -> Result<Var> {
        let c = self.dims(parts[0]).1;
        if parts.iter().any(|&p| self.dims(p).1 != c) {
            return Err(Error::shape("concat_rows", "column counts differ"));
        }
        let mut out = Vec::new();
        for &p in parts {
            out.extend_from_slice(self.value(p).data());
        }
        let r = out.len() / c;
        let out = Tensor::from_rows(r, c, out)?;
        self.push("concat_rows", out, Op::ConcatRows(parts.to_vec()), parts)
    }

    pub fn slice_cols(&mut self, x: Var, start: usize, len: usize) -> Result<Var> {
        let (r, c) = self.dims(x);
        if len == 0 || start + len > c {
            return Err(Error::shape(
                "slice_cols",
                format!("[{start}, {}) of {c}", start + len),
            ));
        }
        let t = self.value(x);
        let mut out = Vec::with_capacity(r * len);
        for i in 0..r {
            out.extend_from_slice(&t.row(i)[start..start + len]);
        }
        let out = Tensor::from_rows(r, len, out)?;
        self.push("slice_cols", out, Op::SliceCols { x, start }, &[x])
    }

    pub fn slice_rows(&mut self, x: Var, start: usize, len: usize) -> Result<Var> {
        let (r, c) = self.dims(x);
        if len == 0 || start + len > r {
            return Err(Error::shape(
                "slice_rows",
                format!("[{start}, {}) of {r}", start + len),
            ));
        }
        let out = self.value(x).data()[start * c..(start + len) * c].to_vec();
        let out = Tensor::from_rows(len, c, out)?;
        self.push("slice_rows", out, Op::SliceRows { x, start }, &[x])
    }

    pub fn transpose(&mut self, x: Var) -> Result<Var> {
        let out = self.value(x).transpose();
        self.push("transpose", out, Op::Transpose(x), &[x])
    }

    pub fn sum(&mut self, x: Var) -> Result<Var> {
        let out = Tensor::scalar(self.value(x).sum());
        self.push("sum", out, Op::Sum(x), &[x])
    }

    pub fn mean(&mut self, x: Var) -> Result<Var> {
        let t = self.value(x);
        let out = Tensor::scalar(t.sum() / t.len() as f64);
        self.push("mean", out, Op::Mean(x), &[x])
    }

    /// `r × c → r × 1` row sums.
    pub fn sum_rows(&mut self, x: Var) -> Result<Var> {
        let t = self.value(x);
        let sums: Vec<f64> = (0..t.rows()).map(|i| t.row(i).iter().sum()).collect();
        let out = Tensor::column(sums)?;
        self.push("sum_rows", out, Op::SumRows(x), &[x])
    }

    /// Picks `x[r, c]` for each `(r, c)` into an `n × 1` column.
    pub fn gather(&mut self, x: Var, idx: &[(usize, usize)]) -> Result<Var> {
        let (r, c) = self.dims(x);
        if let Some(bad) = idx.iter().find(|(i, j)| *i >= r || *j >= c) {
            return Err(Error::shape("gather", format!("{bad:?} outside {r}x{c}")));
        }
        let t = self.value(x);
        let out = Tensor::column(idx.iter().map(|&(i, j)| t.at(i, j)).collect())?;
        let op = Op::Gather {
            x,
            idx: idx.to_vec(),
        };
        self.push("gather", out, op, &[x])
    }

    /// Repeats each row `times` times consecutively.
    pub fn repeat_rows(&mut self, x: Var, times: usize) -> Result<Var> {
        let (r, c) = self.dims(x);
        if times == 0 {
            return Err(Error::shape("repeat_rows", "times must be >= 1"));
        }
        let t = self.value(x);
        let mut out = Vec::with_capacity(r * c * times);
        for i in 0..r {
            for _ in 0..times {
                out.extend_from_slice(t.row(i));
            }
        }
        let out = Tensor::from_rows(r * times, c, out)?;
        self.push("repeat_rows", out, Op::RepeatRows { x, times }, &[x])
    }

    /// Reverse sweep from a scalar `loss`. Every registered parameter gets an
    /// entry; parameters the loss does not depend on get zeros.
    pub fn backward(&self, loss: Var) -> Result<Gradients> {
        let lv = self.value(loss);
        if lv.len() != 1 {
            return Err(Error::BadLoss(format!(
                "shape {:?} is not scalar",
                lv.shape()
            )));
        }
        if !lv.item().is_finite() {
            return Err(Error::BadLoss(format!("value {}", lv.item())));
        }
        let mut grads: Vec<Option<Tensor>> = (0..=loss.0).map(|_| None).collect();
        grads[loss.0] = Some(Tensor::scalar(1.0));

        for i in (0..=loss.0).rev() {
            let node = &self.nodes[i];
            if !node.requires_grad {
                continue;
            }
            let Some(g) = grads[i].take() else { continue };
            if matches!(node.op, Op::Leaf) {
                grads[i] = Some(g);
                continue;
            }
            self.propagate(&node.op, &node.value, g, &mut grads);
        }

        let mut out = Gradients::default();
        for (name, v) in &self.params {
            let value = self.value(*v);
            let g = grads.get(v.0).and_then(|g| g.clone()).unwrap_or_else(|| {
                Tensor::new(value.shape().to_vec(), vec![0.0; value.len()]).unwrap()
            });
            match out.map.get_mut(name) {
                Some(acc) => acc.add_assign(&g),
                None => {
                    out.map.insert(name.clone(), g);
                }
            }
        }
        Ok(out)
    }

    fn propagate(&self, op: &Op, y: &Tensor, g: Tensor, grads: &mut [Option<Tensor>]) {
        let val = |v: Var| &self.nodes[v.0].value;
        let mut send = |v: Var, t: Tensor| {
            if !self.nodes[v.0].requires_grad {
                return;
            }
            match &mut grads[v.0] {
                Some(acc) => acc.add_assign(&t),
                slot @ None => *slot = Some(t),
            }
        };
        match op {
            Op::Leaf => {}
            Op::MatMul(a, b) => {
                if self.nodes[a.0].requires_grad {
                    send(*a, matmul_nt(&g, val(*b)));
                }
                if self.nodes[b.0].requires_grad {
                    send(*b, matmul_tn(val(*a), &g));
                }
            }
            Op::Add(a, b) => {
                send(*a, g.clone());
                send(*b, g);
            }
            Op::Sub(a, b) => {
                send(*b, g.map(|v| -v));
                send(*a, g);
            }
            Op::Mul(a, b) => {
                send(*a, g.zip_map(val(*b), |x, y| x * y));
                send(*b, g.zip_map(val(*a), |x, y| x * y));
            }
            Op::AddRow(x, row) => {
                let c = g.cols();
                let mut rg = vec![0.0; c];
                for chunk in g.data().chunks(c) {
                    for (acc, v) in rg.iter_mut().zip(chunk) {
                        *acc += v;
                    }
                }
                send(*row, Tensor::row_vector(rg).unwrap());
                send(*x, g);
            }
            Op::MulCol(x, col) => {
                let c = g.cols();
                let w = val(*col).data();
                let xv = val(*x);
                let cg: Vec<f64> = g
                    .data()
                    .chunks(c)
                    .zip(xv.data().chunks(c))
                    .map(|(gr, xr)| gr.iter().zip(xr).map(|(a, b)| a * b).sum())
                    .collect();
                send(*col, Tensor::column(cg).unwrap());
                let mut xg = g;
                for (chunk, wv) in xg.data_mut().chunks_mut(c).zip(w) {
                    for v in chunk {
                        *v *= wv;
                    }
                }
                send(*x, xg);
            }
            Op::Scale(x, k) => send(*x, g.map(|v| v * k)),
            Op::Shift(x) => send(*x, g),
            Op::Sigmoid(x) => send(*x, g.zip_map(y, |gv, s| gv * s * (1.0 - s))),
            Op::Tanh(x) => send(*x, g.zip_map(y, |gv, t| gv * (1.0 - t * t))),
            Op::Relu(x) => send(
                *x,
                g.zip_map(val(*x), |gv, xv| if xv > 0.0 { gv } else { 0.0 }),
            ),
            Op::Softplus(x, beta) => send(*x, g.zip_map(val(*x), |gv, xv| gv * sigmoid(beta * xv))),
            Op::Log(x) => send(*x, g.zip_map(val(*x), |gv, xv| gv / xv)),
            Op::ClampMin(x, floor) => send(
                *x,
                g.zip_map(val(*x), |gv, xv| if xv >= *floor { gv } else { 0.0 }),
            ),
            Op::SoftmaxRows(x) => {
                let c = g.cols();
                let mut dx = g.clone();
                for (dr, (gr, yr)) in dx
                    .data_mut()
                    .chunks_mut(c)
                    .zip(g.data().chunks(c).zip(y.data().chunks(c)))
                {
                    let dot: f64 = gr.iter().zip(yr).map(|(a, b)| a * b).sum();
                    for ((d, gv), yv) in dr.iter_mut().zip(gr).zip(yr) {
                        *d = yv * (gv - dot);
                    }
                }
                send(*x, dx);
            }
            Op::LogSoftmaxRows(x) => {
                let c = g.cols();
                let mut dx = g.clone();
                for (dr, (gr, yr)) in dx
                    .data_mut()
                    .chunks_mut(c)
                    .zip(g.data().chunks(c).zip(y.data().chunks(c)))
                {
                    let total: f64 = gr.iter().sum();
                    for ((d, gv), yv) in dr.iter_mut().zip(gr).zip(yr) {
                        *d = gv - yv.exp() * total;
                    }
                }
                send(*x, dx);
            }
            Op::LayerNorm {
                x,
                gain,
                bias,
                xhat,
                inv_std,
            } => {
                let c = g.cols();
                let gn = val(*gain).data();
                let mut dgain = vec![0.0; c];
                let mut dbias = vec![0.0; c];
                let mut dx = vec![0.0; g.len()];
                for (i, is) in inv_std.iter().enumerate() {
                    let gr = g.row(i);
                    let xr = xhat.row(i);
                    let mut sum_d = 0.0;
                    let mut sum_dx = 0.0;
                    for j in 0..c {
                        dgain[j] += gr[j] * xr[j];
                        dbias[j] += gr[j];
                        let d = gr[j] * gn[j];
                        sum_d += d;
                        sum_dx += d * xr[j];
                    }
                    let n = c as f64;
                    for j in 0..c {
                        let d = gr[j] * gn[j];
                        dx[i * c + j] = is / n * (n * d - sum_d - xr[j] * sum_dx);
                    }
                }
                send(*gain, Tensor::row_vector(dgain).unwrap());
                send(*bias, Tensor::row_vector(dbias).unwrap());
                send(*x, Tensor::new(g.shape().to_vec(), dx).unwrap());
            }
            Op::Embedding { table, ids } => {
                let t = val(*table);
                let d = t.cols();
                let mut dt = vec![0.0; t.len()];
                for (k, &id) in ids.iter().enumerate() {
                    if id == 0 {
                        continue;
                    }
                    for j in 0..d {
                        dt[id * d + j] += g.at(k, j);
                    }
                }
                send(*table, Tensor::new(t.shape().to_vec(), dt).unwrap());
            }
            Op::Conv1d {
                x,
                kernel,
                bias,
                stride,
                padding,
            } => {
                let xv = val(*x);
                let w = val(*kernel).data();
                let (r, l) = (xv.rows(), xv.cols());
                let out_len = g.cols();
                let mut dx = vec![0.0; xv.len()];
                let mut dw = vec![0.0; w.len()];
                let mut db = 0.0;
                for i in 0..r {
                    let row = xv.row(i);
                    for o in 0..out_len {
                        let gv = g.at(i, o);
                        db += gv;
                        for (j, wj) in w.iter().enumerate() {
                            let pos = (o * stride + j) as isize - *padding as isize;
                            if pos >= 0 && (pos as usize) < l {
                                let p = pos as usize;
                                dw[j] += gv * row[p];
                                dx[i * l + p] += gv * wj;
                            }
                        }
                    }
                }
                send(*kernel, Tensor::row_vector(dw).unwrap());
                send(*bias, Tensor::scalar(db));
                send(*x, Tensor::new(xv.shape().to_vec(), dx).unwrap());
            }
            Op::MaxPool { x, argmax } => {
                let xv = val(*x);
                let mut dx = vec![0.0; xv.len()];
                for (gv, &src) in g.data().iter().zip(argmax) {
                    dx[src] += gv;
                }
                send(*x, Tensor::new(xv.shape().to_vec(), dx).unwrap());
            }
            Op::Dropout { x, mask } => send(*x, g.zip_map(mask, |a, m| a * m)),
            Op::ConcatCols(parts) => {
                let total = g.cols();
                let r = g.rows();
                let mut offset = 0;
                for &p in parts {
                    let c = val(p).cols();
                    let mut pg = Vec::with_capacity(r * c);
                    for i in 0..r {
                        pg.extend_from_slice(&g.data()[i * total + offset..i * total + offset + c]);
                    }
                    offset += c;
                    send(p, Tensor::from_rows(r, c, pg).unwrap());
                }
            }
            Op::ConcatRows(parts) => {
                let c = g.cols();
                let mut offset = 0;
                for &p in parts {
                    let n = val(p).len();
                    let pr = n / c;
                    send(
                        p,
                        Tensor::from_rows(pr, c, g.data()[offset..offset + n].to_vec()).unwrap(),
                    );
                    offset += n;
                }
            }
            Op::SliceCols { x, start } => {
                let xv = val(*x);
                let (r, c) = (xv.rows(), xv.cols());
                let len = g.cols();
                let mut dx = vec![0.0; r * c];
                for i in 0..r {
                    dx[i * c + start..i * c + start + len].copy_from_slice(g.row(i));
                }
                send(*x, Tensor::new(xv.shape().to_vec(), dx).unwrap());
            }
            Op::SliceRows { x, start } => {
                let xv = val(*x);
                let c = xv.cols();
                let mut dx = vec![0.0; xv.len()];
                dx[start * c..start * c + g.len()].copy_from_slice(g.data());
                send(*x, Tensor::new(xv.shape().to_vec(), dx).unwrap());
            }
            Op::Transpose(x) => send(*x, g.transpose()),
            Op::Sum(x) => {
                let xv = val(*x);
                send(
                    *x,
                    Tensor::new(xv.shape().to_vec(), vec![g.item(); xv.len()]).unwrap(),
                );
            }
            Op::Mean(x) => {
                let xv = val(*x);
                let v = g.item() / xv.len() as f64;
                send(
                    *x,
                    Tensor::new(xv.shape().to_vec(), vec![v; xv.len()]).unwrap(),
                );
            }
            Op::SumRows(x) => {
                let xv = val(*x);
                let c = xv.cols();
                let mut dx = Vec::with_capacity(xv.len());
                for &gv in g.data() {
                    dx.extend(std::iter::repeat_n(gv, c));
                }
                send(*x, Tensor::new(xv.shape().to_vec(), dx).unwrap());
            }
            Op::Gather { x, idx } => {
                let xv = val(*x);
                let c = xv.cols();
                let mut dx = vec![0.0; xv.len()];
                for (&(i, j), gv) in idx.iter().zip(g.data()) {
                    dx[i * c + j] += gv;
                }
                send(*x, Tensor::new(xv.shape().to_vec(), dx).unwrap());
            }
            Op::RepeatRows { x, times } => {
                let xv = val(*x);
                let c = xv.cols();
                let mut dx = vec![0.0; xv.len()];
                for (k, chunk) in g.data().chunks(c).enumerate() {
                    let src = k / times;
                    for (d, gv) in dx[src * c..(src + 1) * c].iter_mut().zip(chunk) {
                        *d += gv;
                    }
                }
                send(*x, Tensor::new(xv.shape().to_vec(), dx).unwrap());
            }
        }
    }
}

pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

/// `(1/β)·ln(1 + e^{βx})`, stable for large `|x|`.
pub fn softplus_beta(x: f64, beta: f64) -> f64 {
    let z = beta * x;
    (z.max(0.0) + (-z.abs()).exp().ln_1p()) / beta
}

fn softmax_in_place(row: &mut [f64]) {
    let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let mut total = 0.0;
    for v in row.iter_mut() {
        *v = (*v - max).exp();
        total += *v;
    }
    for v in row.iter_mut() {
        *v /= total;
    }
}

/// `⌊(len + 2·padding − window)/stride⌋ + 1`, or `None` when the window does not fit.
pub fn conv_out_len(len: usize, window: usize, stride: usize, padding: usize) -> Option<usize> {
    let padded = len + 2 * padding;
    if window == 0 || stride == 0 || padded < window {
        return None;
    }
    Some((padded - window) / stride + 1)
}

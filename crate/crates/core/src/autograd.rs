//! Tape-based reverse-mode differentiation.
//!
//! Every operation on a [`Graph`] appends one node holding its value and
//! the inputs it was computed from. Nodes can only reference earlier
//! nodes, so the tape is topologically ordered by construction and
//! [`Graph::backward`] is a single reverse sweep that visits each node once.
//! Gradients accumulate additively, so fan-out is handled without special
//! cases.

use std::sync::Arc;

use crate::error::{Error, Result};
use crate::tensor::{gemm, Tensor};

/// Handle to a node on a [`Graph`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Debug)]
enum Op {
    Leaf,
    MatMul(Var, Var),
    MatMulT(Var, Var),
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Scale(Var, f64),
    AddRow(Var, Var),
    Softmax {
        x: Var,
        axis: usize,
    },
    LayerNorm {
        x: Var,
        gain: Var,
        bias: Var,
        xhat: Vec<f64>,
        rstd: Vec<f64>,
    },
    Gelu(Var),
    Exp(Var),
    Sum(Var),
    SumRows(Var),
    Gather {
        table: Var,
        ids: Vec<usize>,
    },
    ColSlice {
        x: Var,
        start: usize,
    },
    ConcatCols(Vec<Var>),
    ConcatRows(Vec<Var>),
    Reshape(Var),
    Clamp {
        x: Var,
        lo: f64,
        hi: f64,
    },
    HingeMax {
        x: Var,
        floor: f64,
    },
    CrossEntropy {
        logits: Var,
        targets: Vec<Option<usize>>,
        probs: Vec<f64>,
    },
}

struct Node {
    value: Arc<Tensor>,
    op: Op,
    requires_grad: bool,
}

/// The recording tape.
#[derive(Default)]
pub struct Graph {
    nodes: Vec<Node>,
}

/// Gradients produced by one backward sweep, indexed by node.
pub struct Gradients {
    grads: Vec<Option<Vec<f64>>>,
}

impl Gradients {
    /// Gradient of the loss with respect to `v`, or `None` when `v` does
    /// not require a gradient or is unreachable from the loss.
    pub fn get(&self, v: Var) -> Option<&[f64]> {
        self.grads.get(v.0).and_then(|g| g.as_deref())
    }

    pub fn take(&mut self, v: Var) -> Option<Vec<f64>> {
        self.grads.get_mut(v.0).and_then(Option::take)
    }
}

fn gelu_scalar(x: f64) -> f64 {
    // 0.5·x·(1 + tanh(√(2/π)·(x + 0.044715·x³)))
    let c = (2.0 / std::f64::consts::PI).sqrt();
    0.5 * x * (1.0 + (c * (x + 0.044715 * x * x * x)).tanh())
}

fn gelu_grad(x: f64) -> f64 {
    let c = (2.0 / std::f64::consts::PI).sqrt();
    let u = c * (x + 0.044715 * x * x * x);
    let t = u.tanh();
    0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * c * (1.0 + 3.0 * 0.044715 * x * x)
}

/// Decomposes `shape` around `axis` into `(outer, n, inner)` lane geometry.
fn lanes(shape: &[usize], axis: usize) -> (usize, usize, usize) {
    let outer = shape[..axis].iter().product();
    let inner = shape[axis + 1..].iter().product();
    (outer, shape[axis], inner)
}

fn softmax_lanes(x: &[f64], shape: &[usize], axis: usize, visible: Option<&[bool]>) -> Vec<f64> {
    let (outer, n, inner) = lanes(shape, axis);
    let mut out = vec![0.0; x.len()];
    for o in 0..outer {
        for j in 0..inner {
            let idx = |i: usize| (o * n + i) * inner + j;
            let vis = |i: usize| visible.is_none_or(|m| m[idx(i)]);
            let mut max = f64::NEG_INFINITY;
            for i in 0..n {
                if vis(i) {
                    max = max.max(x[idx(i)]);
                }
            }
            if max == f64::NEG_INFINITY {
                // Fully masked lane: all weights stay zero.
                continue;
            }
            let mut sum = 0.0;
            for i in 0..n {
                if vis(i) {
                    let e = (x[idx(i)] - max).exp();
                    out[idx(i)] = e;
                    sum += e;
                }
            }
            for i in 0..n {
                out[idx(i)] /= sum;
            }
        }
    }
    out
}

fn softmax_lanes_backward(y: &[f64], g: &[f64], shape: &[usize], axis: usize) -> Vec<f64> {
    let (outer, n, inner) = lanes(shape, axis);
    let mut dx = vec![0.0; y.len()];
    for o in 0..outer {
        for j in 0..inner {
            let idx = |i: usize| (o * n + i) * inner + j;
            let dot: f64 = (0..n).map(|i| g[idx(i)] * y[idx(i)]).sum();
            for i in 0..n {
                dx[idx(i)] = y[idx(i)] * (g[idx(i)] - dot);
            }
        }
    }
    dx
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

    fn push(&mut self, value: Tensor, op: Op, requires_grad: bool) -> Result<Var> {
        if cfg!(debug_assertions) && !value.is_finite() {
            return Err(Error::NonFinite(format!("{op:?}")));
        }
        self.nodes.push(Node {
            value: Arc::new(value),
            op,
            requires_grad,
        });
        Ok(Var(self.nodes.len() - 1))
    }

    fn rg(&self, vars: &[Var]) -> bool {
        vars.iter().any(|v| self.nodes[v.0].requires_grad)
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    /// A leaf sharing storage with `value` (used to bind parameters without copying).
    pub fn leaf(&mut self, value: Arc<Tensor>, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op: Op::Leaf,
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    pub fn constant(&mut self, value: Tensor) -> Var {
        self.leaf(Arc::new(value), false)
    }

    pub fn variable(&mut self, value: Tensor) -> Var {
        self.leaf(Arc::new(value), true)
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let out = self.value(a).matmul(self.value(b))?;
        let rg = self.rg(&[a, b]);
        self.push(out, Op::MatMul(a, b), rg)
    }

    /// `a · bᵀ` for `a: m×k`, `b: n×k`.
    pub fn matmul_t(&mut self, a: Var, b: Var) -> Result<Var> {
        let (av, bv) = (self.value(a), self.value(b));
        if av.shape().len() != 2 || bv.shape().len() != 2 || av.cols() != bv.cols() {
            return Err(Error::dim("matmul_t", av.shape(), bv.shape()));
        }
        let (m, k, n) = (av.shape()[0], av.cols(), bv.shape()[0]);
        let mut out = vec![0.0; m * n];
        gemm(m, k, n, av.data(), false, bv.data(), true, &mut out, 0.0);
        let rg = self.rg(&[a, b]);
        self.push(Tensor::new(vec![m, n], out)?, Op::MatMulT(a, b), rg)
    }

    fn zip(&mut self, op: &'static str, a: Var, b: Var, f: impl Fn(f64, f64) -> f64) -> Result<Tensor> {
        let (av, bv) = (self.value(a), self.value(b));
        if av.shape() != bv.shape() {
            return Err(Error::dim(op, av.shape(), bv.shape()));
        }
        let data = av.data().iter().zip(bv.data()).map(|(x, y)| f(*x, *y)).collect();
        Tensor::new(av.shape().to_vec(), data)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let out = self.zip("add", a, b, |x, y| x + y)?;
        let rg = self.rg(&[a, b]);
        self.push(out, Op::Add(a, b), rg)
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        let out = self.zip("sub", a, b, |x, y| x - y)?;
        let rg = self.rg(&[a, b]);
        self.push(out, Op::Sub(a, b), rg)
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        let out = self.zip("mul", a, b, |x, y| x * y)?;
        let rg = self.rg(&[a, b]);
        self.push(out, Op::Mul(a, b), rg)
    }

    pub fn scale(&mut self, a: Var, s: f64) -> Result<Var> {
        let v = self.value(a);
        let out = Tensor::new(v.shape().to_vec(), v.data().iter().map(|x| x * s).collect())?;
        let rg = self.rg(&[a]);
        self.push(out, Op::Scale(a, s), rg)
    }

    /// Broadcast-adds a length-`n` vector to every row of `x`.
    pub fn add_row(&mut self, x: Var, b: Var) -> Result<Var> {
        let (xv, bv) = (self.value(x), self.value(b));
        let n = xv.cols();
        if bv.len() != n {
            return Err(Error::dim("add_row", xv.shape(), bv.shape()));
        }
        let mut data = xv.data().to_vec();
        for row in data.chunks_mut(n) {
            for (r, bb) in row.iter_mut().zip(bv.data()) {
                *r += bb;
            }
        }
        let out = Tensor::new(xv.shape().to_vec(), data)?;
        let rg = self.rg(&[x, b]);
        self.push(out, Op::AddRow(x, b), rg)
    }

    /// `x·w + b`, with `w: in×out` and `b` of length `out`.
    pub fn linear(&mut self, x: Var, w: Var, b: Var) -> Result<Var> {
        let y = self.matmul(x, w)?;
        self.add_row(y, b)
    }

    /// Numerically stable softmax along `axis` (max-subtracted).
    pub fn softmax(&mut self, x: Var, axis: usize) -> Result<Var> {
        let xv = self.value(x);
        if axis >= xv.shape().len() {
            return Err(Error::dim("softmax", xv.shape(), &[axis]));
        }
        let out = Tensor::new(xv.shape().to_vec(), softmax_lanes(xv.data(), xv.shape(), axis, None))?;
        let rg = self.rg(&[x]);
        self.push(out, Op::Softmax { x, axis }, rg)
    }

    /// Softmax along `axis` where entries with `visible == false` behave as
    /// if their score were −∞: they receive exactly zero weight and zero
    /// gradient. A lane with no visible entry yields all zeros.
    pub fn masked_softmax(&mut self, x: Var, axis: usize, visible: Arc<[bool]>) -> Result<Var> {
        let xv = self.value(x);
        if axis >= xv.shape().len() || visible.len() != xv.len() {
            return Err(Error::dim("masked_softmax", xv.shape(), &[visible.len()]));
        }
        let out = Tensor::new(
            xv.shape().to_vec(),
            softmax_lanes(xv.data(), xv.shape(), axis, Some(&visible)),
        )?;
        let rg = self.rg(&[x]);
        // Masked entries have zero output, so the plain softmax backward applies.
        self.push(out, Op::Softmax { x, axis }, rg)
    }

    /// Layer normalization over the last dimension, population variance.
    pub fn layer_norm(&mut self, x: Var, gain: Var, bias: Var, eps: f64) -> Result<Var> {
        let (xv, gv, bv) = (self.value(x), self.value(gain), self.value(bias));
        let n = xv.cols();
        if gv.len() != n || bv.len() != n {
            return Err(Error::dim("layer_norm", xv.shape(), gv.shape()));
        }
        let rows = xv.len() / n;
        let mut xhat = vec![0.0; xv.len()];
        let mut rstd = vec![0.0; rows];
        let mut out = vec![0.0; xv.len()];
        for r in 0..rows {
            let row = &xv.data()[r * n..(r + 1) * n];
            let mean = row.iter().sum::<f64>() / n as f64;
            let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n as f64;
            let rs = 1.0 / (var + eps).sqrt();
            rstd[r] = rs;
            for c in 0..n {
                let h = (row[c] - mean) * rs;
                xhat[r * n + c] = h;
                out[r * n + c] = h * gv.data()[c] + bv.data()[c];
            }
        }
        let out = Tensor::new(xv.shape().to_vec(), out)?;
        let rg = self.rg(&[x, gain, bias]);
        self.push(
            out,
            Op::LayerNorm {
                x,
                gain,
                bias,
                xhat,
                rstd,
            },
            rg,
        )
    }

    /// GELU, tanh approximation: `0.5·x·(1 + tanh(√(2/π)·(x + 0.044715·x³)))`.
    pub fn gelu(&mut self, x: Var) -> Result<Var> {
        let xv = self.value(x);
        let out = Tensor::new(xv.shape().to_vec(), xv.data().iter().map(|&v| gelu_scalar(v)).collect())?;
        let rg = self.rg(&[x]);
        self.push(out, Op::Gelu(x), rg)
    }

    pub fn exp(&mut self, x: Var) -> Result<Var> {
        let xv = self.value(x);
        let out = Tensor::new(xv.shape().to_vec(), xv.data().iter().map(|v| v.exp()).collect())?;
        let rg = self.rg(&[x]);
        self.push(out, Op::Exp(x), rg)
    }

    pub fn sum(&mut self, x: Var) -> Result<Var> {
        let s = self.value(x).data().iter().sum();
        let rg = self.rg(&[x]);
        self.push(Tensor::scalar(s), Op::Sum(x), rg)
    }

    /// Sums over rows, giving a `1 × cols` tensor.
    pub fn sum_rows(&mut self, x: Var) -> Result<Var> {
        let xv = self.value(x);
        let n = xv.cols();
        let mut out = vec![0.0; n];
        for row in xv.data().chunks(n) {
            for (o, v) in out.iter_mut().zip(row) {
                *o += v;
            }
        }
        let rg = self.rg(&[x]);
        self.push(Tensor::row(out), Op::SumRows(x), rg)
    }

    /// Row lookup: `out[i] = table[ids[i]]`.
    pub fn gather(&mut self, table: Var, ids: &[usize]) -> Result<Var> {
        let tv = self.value(table);
        let (rows, n) = (tv.shape()[0], tv.cols());
        let mut data = Vec::with_capacity(ids.len() * n);
        for &id in ids {
            if id >= rows {
                return Err(Error::Index {
                    what: "gather",
                    index: id,
                    size: rows,
                });
            }
            data.extend_from_slice(tv.row_slice(id));
        }
        let out = Tensor::new(vec![ids.len(), n], data)?;
        let rg = self.rg(&[table]);
        self.push(
            out,
            Op::Gather {
                table,
                ids: ids.to_vec(),
            },
            rg,
        )
    }

    /// Columns `start..start+len` of a 2-D tensor.
    pub fn col_slice(&mut self, x: Var, start: usize, len: usize) -> Result<Var> {
        let xv = self.value(x);
        let n = xv.cols();
        if start + len > n || len == 0 {
            return Err(Error::dim("col_slice", xv.shape(), &[start, len]));
        }
        let rows = xv.len() / n;
        let mut data = Vec::with_capacity(rows * len);
        for r in 0..rows {
            data.extend_from_slice(&xv.data()[r * n + start..r * n + start + len]);
        }
        let out = Tensor::new(vec![rows, len], data)?;
        let rg = self.rg(&[x]);
        self.push(out, Op::ColSlice { x, start }, rg)
    }

    pub fn concat_cols(&mut self, xs: &[Var]) -> Result<Var> {
        let rows = self.value(xs[0]).rows();
        if xs.iter().any(|v| self.value(*v).rows() != rows) {
            return Err(Error::dim("concat_cols", self.value(xs[0]).shape(), &[rows]));
        }
        let total: usize = xs.iter().map(|v| self.value(*v).cols()).sum();
        let mut data = Vec::with_capacity(rows * total);
        for r in 0..rows {
            for v in xs {
                data.extend_from_slice(self.value(*v).row_slice(r));
            }
        }
        let out = Tensor::new(vec![rows, total], data)?;
        let rg = self.rg(xs);
        self.push(out, Op::ConcatCols(xs.to_vec()), rg)
    }

    pub fn concat_rows(&mut self, xs: &[Var]) -> Result<Var> {
        let cols = self.value(xs[0]).cols();
        let mut data = Vec::new();
        for v in xs {
            let t = self.value(*v);
            if t.cols() != cols {
                return Err(Error::dim("concat_rows", self.value(xs[0]).shape(), t.shape()));
            }
            data.extend_from_slice(t.data());
        }
        let rows = data.len() / cols;
        let out = Tensor::new(vec![rows, cols], data)?;
        let rg = self.rg(xs);
        self.push(out, Op::ConcatRows(xs.to_vec()), rg)
    }

    pub fn reshape(&mut self, x: Var, shape: &[usize]) -> Result<Var> {
        let out = self.value(x).reshape(shape)?;
        let rg = self.rg(&[x]);
        self.push(out, Op::Reshape(x), rg)
    }

    /// Elementwise clamp; the gradient passes only where `lo ≤ x ≤ hi`.
    pub fn clamp(&mut self, x: Var, lo: f64, hi: f64) -> Result<Var> {
        let xv = self.value(x);
        let out = Tensor::new(xv.shape().to_vec(), xv.data().iter().map(|v| v.clamp(lo, hi)).collect())?;
        let rg = self.rg(&[x]);
        self.push(out, Op::Clamp { x, lo, hi }, rg)
    }

    /// `max(floor, x)` for a scalar `x`. At the tie `x == floor` the
    /// gradient passes through to `x`.
    pub fn hinge_max(&mut self, x: Var, floor: f64) -> Result<Var> {
        let xv = self.value(x);
        if xv.len() != 1 {
            return Err(Error::contract("hinge_max expects a scalar"));
        }
        let out = Tensor::scalar(xv.item().max(floor));
        let rg = self.rg(&[x]);
        self.push(out, Op::HingeMax { x, floor }, rg)
    }

    /// Summed token negative log-likelihood (nats) of `targets` under
    /// `logits: L×V`. Positions whose target equals `ignore_index` are
    /// skipped. Returns the scalar loss and the number of scored tokens.
    pub fn cross_entropy(&mut self, logits: Var, targets: &[usize], ignore_index: usize) -> Result<(Var, usize)> {
        let lv = self.value(logits);
        let v = lv.cols();
        let rows = lv.len() / v;
        if rows != targets.len() {
            return Err(Error::dim("cross_entropy", lv.shape(), &[targets.len()]));
        }
        let mut probs = vec![0.0; lv.len()];
        let mut kept = Vec::with_capacity(rows);
        let mut loss = 0.0;
        let mut count = 0;
        for (r, &t) in targets.iter().enumerate() {
            if t == ignore_index {
                kept.push(None);
                continue;
            }
            if t >= v {
                return Err(Error::Index {
                    what: "cross_entropy target",
                    index: t,
                    size: v,
                });
            }
            let row = lv.row_slice(r);
            let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let mut sum = 0.0;
            for (c, x) in row.iter().enumerate() {
                let e = (x - max).exp();
                probs[r * v + c] = e;
                sum += e;
            }
            for p in &mut probs[r * v..(r + 1) * v] {
                *p /= sum;
            }
            loss += sum.ln() + max - row[t];
            count += 1;
            kept.push(Some(t));
        }
        let rg = self.rg(&[logits]);
        let var = self.push(
            Tensor::scalar(loss),
            Op::CrossEntropy {
                logits,
                targets: kept,
                probs,
            },
            rg,
        )?;
        Ok((var, count))
    }

    /// Reverse sweep from a scalar `loss`.
    pub fn backward(&self, loss: Var) -> Result<Gradients> {
        if self.value(loss).len() != 1 {
            return Err(Error::contract(format!(
                "backward needs a scalar loss, got shape {:?}",
                self.value(loss).shape()
            )));
        }
        let mut grads: Vec<Option<Vec<f64>>> = vec![None; self.nodes.len()];
        if !self.nodes[loss.0].requires_grad {
            return Ok(Gradients { grads });
        }
        grads[loss.0] = Some(vec![1.0]);

        for i in (0..=loss.0).rev() {
            let node = &self.nodes[i];
            if !node.requires_grad {
                continue;
            }
            let Some(g) = grads[i].take() else { continue };
            self.propagate(node, &g, &mut grads);
            grads[i] = Some(g);
        }
        Ok(Gradients { grads })
    }

    fn acc(&self, grads: &mut [Option<Vec<f64>>], v: Var, f: impl FnOnce(&mut [f64])) {
        if !self.nodes[v.0].requires_grad {
            return;
        }
        let slot = grads[v.0].get_or_insert_with(|| vec![0.0; self.nodes[v.0].value.len()]);
        f(slot);
    }

    fn propagate(&self, node: &Node, g: &[f64], grads: &mut [Option<Vec<f64>>]) {
        let y = &node.value;
        match &node.op {
            Op::Leaf => {}
            Op::MatMul(a, b) => {
                let (av, bv) = (self.value(*a), self.value(*b));
                let (m, k, n) = (av.shape()[0], av.shape()[1], bv.shape()[1]);
                // dA = G·Bᵀ, dB = Aᵀ·G
                self.acc(grads, *a, |da| gemm(m, n, k, g, false, bv.data(), true, da, 1.0));
                self.acc(grads, *b, |db| gemm(k, m, n, av.data(), true, g, false, db, 1.0));
            }
            Op::MatMulT(a, b) => {
                let (av, bv) = (self.value(*a), self.value(*b));
                let (m, k, n) = (av.shape()[0], av.shape()[1], bv.shape()[0]);
                // y = A·Bᵀ: dA = G·B, dB = Gᵀ·A
                self.acc(grads, *a, |da| gemm(m, n, k, g, false, bv.data(), false, da, 1.0));
                self.acc(grads, *b, |db| gemm(n, m, k, g, true, av.data(), false, db, 1.0));
            }
            Op::Add(a, b) => {
                self.acc(grads, *a, |d| d.iter_mut().zip(g).for_each(|(d, g)| *d += g));
                self.acc(grads, *b, |d| d.iter_mut().zip(g).for_each(|(d, g)| *d += g));
            }
            Op::Sub(a, b) => {
                self.acc(grads, *a, |d| d.iter_mut().zip(g).for_each(|(d, g)| *d += g));
                self.acc(grads, *b, |d| d.iter_mut().zip(g).for_each(|(d, g)| *d -= g));
            }
            Op::Mul(a, b) => {
                let (av, bv) = (self.value(*a).data(), self.value(*b).data());
                self.acc(grads, *a, |d| {
                    for i in 0..d.len() {
                        d[i] += g[i] * bv[i];
                    }
                });
                self.acc(grads, *b, |d| {
                    for i in 0..d.len() {
                        d[i] += g[i] * av[i];
                    }
                });
            }
            Op::Scale(a, s) => {
                self.acc(grads, *a, |d| d.iter_mut().zip(g).for_each(|(d, g)| *d += s * g));
            }
            Op::AddRow(x, b) => {
                self.acc(grads, *x, |d| d.iter_mut().zip(g).for_each(|(d, g)| *d += g));
                let n = self.value(*b).len();
                self.acc(grads, *b, |d| {
                    for row in g.chunks(n) {
                        for (d, g) in d.iter_mut().zip(row) {
                            *d += g;
                        }
                    }
                });
            }
            Op::Softmax { x, axis } => {
                let dx = softmax_lanes_backward(y.data(), g, y.shape(), *axis);
                self.acc(grads, *x, |d| d.iter_mut().zip(&dx).for_each(|(d, g)| *d += g));
            }
            Op::LayerNorm {
                x,
                gain,
                bias,
                xhat,
                rstd,
            } => {
                let gv = self.value(*gain).data();
                let n = gv.len();
                let rows = xhat.len() / n;
                self.acc(grads, *x, |d| {
                    for r in 0..rows {
                        let gr = &g[r * n..(r + 1) * n];
                        let xh = &xhat[r * n..(r + 1) * n];
                        let mut m1 = 0.0;
                        let mut m2 = 0.0;
                        for c in 0..n {
                            let dxh = gr[c] * gv[c];
                            m1 += dxh;
                            m2 += dxh * xh[c];
                        }
                        m1 /= n as f64;
                        m2 /= n as f64;
                        for c in 0..n {
                            let dxh = gr[c] * gv[c];
                            d[r * n + c] += rstd[r] * (dxh - m1 - xh[c] * m2);
                        }
                    }
                });
                self.acc(grads, *gain, |d| {
                    for r in 0..rows {
                        for c in 0..n {
                            d[c] += g[r * n + c] * xhat[r * n + c];
                        }
                    }
                });
                self.acc(grads, *bias, |d| {
                    for r in 0..rows {
                        for c in 0..n {
                            d[c] += g[r * n + c];
                        }
                    }
                });
            }
            Op::Gelu(x) => {
                let xv = self.value(*x).data();
                self.acc(grads, *x, |d| {
                    for i in 0..d.len() {
                        d[i] += g[i] * gelu_grad(xv[i]);
                    }
                });
            }
            Op::Exp(x) => {
                let yv = y.data();
                self.acc(grads, *x, |d| {
                    for i in 0..d.len() {
                        d[i] += g[i] * yv[i];
                    }
                });
            }
            Op::Sum(x) => {
                self.acc(grads, *x, |d| d.iter_mut().for_each(|d| *d += g[0]));
            }
            Op::SumRows(x) => {
                let n = g.len();
                self.acc(grads, *x, |d| {
                    for row in d.chunks_mut(n) {
                        for (d, g) in row.iter_mut().zip(g) {
                            *d += g;
                        }
                    }
                });
            }
            Op::Gather { table, ids } => {
                let n = y.cols();
                self.acc(grads, *table, |d| {
                    for (i, &id) in ids.iter().enumerate() {
                        for c in 0..n {
                            d[id * n + c] += g[i * n + c];
                        }
                    }
                });
            }
            Op::ColSlice { x, start } => {
                let len = y.cols();
                let n = self.value(*x).cols();
                self.acc(grads, *x, |d| {
                    for (r, gr) in g.chunks(len).enumerate() {
                        for (c, gv) in gr.iter().enumerate() {
                            d[r * n + start + c] += gv;
                        }
                    }
                });
            }
            Op::ConcatCols(xs) => {
                let total = y.cols();
                let mut offset = 0;
                for v in xs {
                    let w = self.value(*v).cols();
                    self.acc(grads, *v, |d| {
                        for (r, dr) in d.chunks_mut(w).enumerate() {
                            for (c, dv) in dr.iter_mut().enumerate() {
                                *dv += g[r * total + offset + c];
                            }
                        }
                    });
                    offset += w;
                }
            }
            Op::ConcatRows(xs) => {
                let mut offset = 0;
                for v in xs {
                    let len = self.value(*v).len();
                    self.acc(grads, *v, |d| {
                        d.iter_mut().zip(&g[offset..offset + len]).for_each(|(d, g)| *d += g)
                    });
                    offset += len;
                }
            }
            Op::Reshape(x) => {
                self.acc(grads, *x, |d| d.iter_mut().zip(g).for_each(|(d, g)| *d += g));
            }
            Op::Clamp { x, lo, hi } => {
                let xv = self.value(*x).data();
                self.acc(grads, *x, |d| {
                    for i in 0..d.len() {
                        if xv[i] >= *lo && xv[i] <= *hi {
                            d[i] += g[i];
                        }
                    }
                });
            }
            Op::HingeMax { x, floor } => {
                let pass = self.value(*x).item() >= *floor;
                self.acc(grads, *x, |d| {
                    if pass {
                        d[0] += g[0];
                    }
                });
            }
            Op::CrossEntropy { logits, targets, probs } => {
                let v = self.value(*logits).cols();
                self.acc(grads, *logits, |d| {
                    for (r, t) in targets.iter().enumerate() {
                        let Some(t) = t else { continue };
                        for c in 0..v {
                            d[r * v + c] += g[0] * probs[r * v + c];
                        }
                        d[r * v + t] -= g[0];
                    }
                });
            }
        }
    }
}

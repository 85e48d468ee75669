//! Tape-style reverse-mode differentiation over a fixed kernel vocabulary.
//!
//! Nodes are appended in evaluation order, so the tape is topologically
//! sorted by construction and [`Graph::backward`] is a single reverse sweep.
//! Leaves are either trainable parameters or constants; constants (the frozen
//! backbone, text embeddings, data) never receive gradients and any node that
//! depends only on constants is skipped during the sweep.

use std::borrow::Cow;

use super::kernels::{self, gemm};
use super::Tensor;
use crate::error::{Error, Result};

/// Handle to a node on a [`Graph`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

#[derive(Debug)]
enum Op {
    Param,
    Const,
    MatMul { a: Var, ta: bool, b: Var, tb: bool },
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Scale(Var, f64),
    AddScalar(Var),
    AddRow(Var, Var),
    MulCol(Var, Var),
    Softmax(Var),
    LogSoftmax(Var),
    LayerNorm { x: Var, gain: Var, bias: Var, xhat: Vec<f64>, inv: Vec<f64> },
    Gelu(Var),
    ConcatRows(Vec<Var>),
    ConcatCols(Vec<Var>),
    SliceRows { x: Var, start: usize },
    SliceCols { x: Var, start: usize },
    GatherRows { x: Var, idx: Vec<usize> },
    AddAtRows { x: Var, idx: Vec<usize>, delta: Var },
    NormalizeRows { x: Var, norms: Vec<f64> },
    SumRows(Var),
    SumAll(Var),
    Log(Var),
    Relu(Var),
    Abs(Var),
    Attention { qkv: Var, batch: usize, seq: usize, heads: usize, probs: Vec<f64> },
}

struct Node<'a> {
    value: Cow<'a, Tensor>,
    op: Op,
    requires_grad: bool,
}

/// Recording of one forward pass. Confined to a single thread.
pub struct Graph<'a> {
    nodes: Vec<Node<'a>>,
}

impl Default for Graph<'_> {
    fn default() -> Self {
        Self::new()
    }
}

impl<'a> Graph<'a> {
    pub fn new() -> Self {
        Self { nodes: Vec::new() }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, value: Cow<'a, Tensor>, op: Op, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    fn derived(&mut self, value: Tensor, op: Op, inputs: &[Var], name: &'static str) -> Result<Var> {
        let value = value.check_finite(name)?;
        let rg = inputs.iter().any(|v| self.nodes[v.0].requires_grad);
        Ok(self.push(Cow::Owned(value), op, rg))
    }

    /// Registers a trainable leaf.
    pub fn param(&mut self, t: Tensor) -> Var {
        self.push(Cow::Owned(t), Op::Param, true)
    }

    pub fn param_ref(&mut self, t: &'a Tensor) -> Var {
        self.push(Cow::Borrowed(t), Op::Param, true)
    }

    /// Registers a frozen leaf; it never receives a gradient.
    pub fn constant(&mut self, t: Tensor) -> Var {
        self.push(Cow::Owned(t), Op::Const, false)
    }

    pub fn constant_ref(&mut self, t: &'a Tensor) -> Var {
        self.push(Cow::Borrowed(t), Op::Const, false)
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn is_param(&self, v: Var) -> bool {
        matches!(self.nodes[v.0].op, Op::Param)
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    fn shape(&self, v: Var) -> [usize; 2] {
        self.value(v).shape()
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.matmul_t(a, false, b, false)
    }

    /// `op(a) · op(b)` where `op` optionally transposes.
    pub fn matmul_t(&mut self, a: Var, ta: bool, b: Var, tb: bool) -> Result<Var> {
        let out = kernels::matmul_t(self.value(a), ta, self.value(b), tb)?;
        self.derived(out, Op::MatMul { a, ta, b, tb }, &[a, b], "matmul")
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let out = self.value(a).add(self.value(b))?;
        self.derived(out, Op::Add(a, b), &[a, b], "add")
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        let out = self.value(a).sub(self.value(b))?;
        self.derived(out, Op::Sub(a, b), &[a, b], "sub")
    }

    /// Elementwise product.
    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        let out = self.value(a).zip(self.value(b), "mul", |x, y| x * y)?;
        self.derived(out, Op::Mul(a, b), &[a, b], "mul")
    }

    pub fn scale(&mut self, x: Var, s: f64) -> Result<Var> {
        let out = self.value(x).scale(s);
        self.derived(out, Op::Scale(x, s), &[x], "scale")
    }

    pub fn add_scalar(&mut self, x: Var, s: f64) -> Result<Var> {
        let out = self.value(x).map(|v| v + s);
        self.derived(out, Op::AddScalar(x), &[x], "add_scalar")
    }

    /// Adds a `1 × n` row to every row of `x`.
    pub fn add_row(&mut self, x: Var, row: Var) -> Result<Var> {
        let [m, n] = self.shape(x);
        if self.shape(row) != [1, n] {
            return Err(Error::shape(
                "add_row",
                format!("row {:?} for input {m}x{n}", self.shape(row)),
            ));
        }
        let mut out = self.value(x).clone();
        let r = self.value(row).data().to_vec();
        for i in 0..m {
            for (v, b) in out.row_slice_mut(i).iter_mut().zip(&r) {
                *v += b;
            }
        }
        self.derived(out, Op::AddRow(x, row), &[x, row], "add_row")
    }

    /// Scales row `i` of `x` by `col[i]` (`col` is `m × 1`).
    pub fn mul_col(&mut self, x: Var, col: Var) -> Result<Var> {
        let [m, _] = self.shape(x);
        if self.shape(col) != [m, 1] {
            return Err(Error::shape(
                "mul_col",
                format!("column {:?} for {m} rows", self.shape(col)),
            ));
        }
        let mut out = self.value(x).clone();
        for i in 0..m {
            let c = self.value(col).data()[i];
            out.row_slice_mut(i).iter_mut().for_each(|v| *v *= c);
        }
        self.derived(out, Op::MulCol(x, col), &[x, col], "mul_col")
    }

    /// Softmax of every row.
    pub fn softmax(&mut self, x: Var) -> Result<Var> {
        let out = kernels::softmax(self.value(x), 1)?;
        self.derived(out, Op::Softmax(x), &[x], "softmax")
    }

    pub fn log_softmax(&mut self, x: Var) -> Result<Var> {
        if self.shape(x)[1] == 0 {
            return Err(Error::invalid("log_softmax over an empty axis"));
        }
        let mut out = self.value(x).clone();
        for r in 0..out.rows() {
            kernels::log_softmax_in_place(out.row_slice_mut(r));
        }
        self.derived(out, Op::LogSoftmax(x), &[x], "log_softmax")
    }

    pub fn layernorm(&mut self, x: Var, gain: Var, bias: Var, eps: f64) -> Result<Var> {
        let xv = self.value(x);
        kernels::check_affine(xv, self.value(gain), self.value(bias))?;
        if eps <= 0.0 {
            return Err(Error::invalid("layernorm eps must be positive"));
        }
        let [m, n] = xv.shape();
        let g = self.value(gain).data();
        let b = self.value(bias).data();
        let mut xhat = vec![0.0; m * n];
        let mut inv = vec![0.0; m];
        let mut out = Tensor::zeros(m, n);
        for r in 0..m {
            let row = xv.row_slice(r);
            let (mean, iv) = kernels::row_stats(row, eps);
            inv[r] = iv;
            let o = out.row_slice_mut(r);
            for c in 0..n {
                let h = (row[c] - mean) * iv;
                xhat[r * n + c] = h;
                o[c] = h * g[c] + b[c];
            }
        }
        self.derived(
            out,
            Op::LayerNorm {
                x,
                gain,
                bias,
                xhat,
                inv,
            },
            &[x, gain, bias],
            "layernorm",
        )
    }

    pub fn gelu(&mut self, x: Var) -> Result<Var> {
        let out = self.value(x).map(kernels::gelu);
        self.derived(out, Op::Gelu(x), &[x], "gelu")
    }

    pub fn concat_rows(&mut self, parts: &[Var]) -> Result<Var> {
        let tensors: Vec<&Tensor> = parts.iter().map(|&p| self.value(p)).collect();
        let out = Tensor::vstack(&tensors)?;
        self.derived(out, Op::ConcatRows(parts.to_vec()), parts, "concat_rows")
    }

    pub fn concat_cols(&mut self, parts: &[Var]) -> Result<Var> {
        let m = parts.first().map_or(0, |&p| self.shape(p)[0]);
        let total: usize = parts.iter().map(|&p| self.shape(p)[1]).sum();
        let mut out = Tensor::zeros(m, total);
        let mut off = 0;
        for &p in parts {
            let t = self.value(p);
            if t.rows() != m {
                return Err(Error::shape(
                    "concat_cols",
                    format!("row count {} vs {m}", t.rows()),
                ));
            }
            for r in 0..m {
                out.row_slice_mut(r)[off..off + t.cols()].copy_from_slice(t.row_slice(r));
            }
            off += t.cols();
        }
        self.derived(out, Op::ConcatCols(parts.to_vec()), parts, "concat_cols")
    }

    pub fn slice_rows(&mut self, x: Var, start: usize, len: usize) -> Result<Var> {
        let out = self.value(x).slice_rows(start, len)?;
        self.derived(out, Op::SliceRows { x, start }, &[x], "slice_rows")
    }

    pub fn slice_cols(&mut self, x: Var, start: usize, len: usize) -> Result<Var> {
        let [m, n] = self.shape(x);
        if start + len > n {
            return Err(Error::shape(
                "slice_cols",
                format!("columns {start}..{} out of {n}", start + len),
            ));
        }
        let mut out = Tensor::zeros(m, len);
        for r in 0..m {
            out.row_slice_mut(r)
                .copy_from_slice(&self.value(x).row_slice(r)[start..start + len]);
        }
        self.derived(out, Op::SliceCols { x, start }, &[x], "slice_cols")
    }

    pub fn gather_rows(&mut self, x: Var, idx: &[usize]) -> Result<Var> {
        let [m, n] = self.shape(x);
        let mut out = Tensor::zeros(idx.len(), n);
        for (k, &i) in idx.iter().enumerate() {
            if i >= m {
                return Err(Error::shape("gather_rows", format!("row {i} out of {m}")));
            }
            out.row_slice_mut(k)
                .copy_from_slice(self.value(x).row_slice(i));
        }
        self.derived(
            out,
            Op::GatherRows {
                x,
                idx: idx.to_vec(),
            },
            &[x],
            "gather_rows",
        )
    }

    /// Returns `x` with `delta[k]` added to row `idx[k]`.
    pub fn add_at_rows(&mut self, x: Var, idx: &[usize], delta: Var) -> Result<Var> {
        let [m, n] = self.shape(x);
        if self.shape(delta) != [idx.len(), n] {
            return Err(Error::shape(
                "add_at_rows",
                format!("delta {:?} for {} indices", self.shape(delta), idx.len()),
            ));
        }
        let mut out = self.value(x).clone();
        for (k, &i) in idx.iter().enumerate() {
            if i >= m {
                return Err(Error::shape("add_at_rows", format!("row {i} out of {m}")));
            }
            let d = self.value(delta).row_slice(k).to_vec();
            for (v, dv) in out.row_slice_mut(i).iter_mut().zip(d) {
                *v += dv;
            }
        }
        self.derived(
            out,
            Op::AddAtRows {
                x,
                idx: idx.to_vec(),
                delta,
            },
            &[x, delta],
            "add_at_rows",
        )
    }

    /// L2-normalises every row.
    pub fn normalize_rows(&mut self, x: Var) -> Result<Var> {
        let out = kernels::l2_normalize_rows(self.value(x))?;
        let norms = (0..out.rows())
            .map(|r| self.value(x).row_slice(r).iter().map(|v| v * v).sum::<f64>().sqrt())
            .collect();
        self.derived(out, Op::NormalizeRows { x, norms }, &[x], "normalize_rows")
    }

    /// Row sums as an `m × 1` column.
    pub fn sum_rows(&mut self, x: Var) -> Result<Var> {
        let t = self.value(x);
        let out = Tensor::column((0..t.rows()).map(|r| t.row_slice(r).iter().sum()).collect());
        self.derived(out, Op::SumRows(x), &[x], "sum_rows")
    }

    pub fn sum(&mut self, x: Var) -> Result<Var> {
        let out = Tensor::scalar(self.value(x).sum());
        self.derived(out, Op::SumAll(x), &[x], "sum")
    }

    pub fn mean(&mut self, x: Var) -> Result<Var> {
        let n = self.value(x).len();
        if n == 0 {
            return Err(Error::invalid("mean of an empty tensor"));
        }
        let s = self.sum(x)?;
        self.scale(s, 1.0 / n as f64)
    }

    pub fn log(&mut self, x: Var) -> Result<Var> {
        let out = self.value(x).map(f64::ln);
        self.derived(out, Op::Log(x), &[x], "log")
    }

    /// `max(0, x)`; the hinge of the margin losses.
    pub fn relu(&mut self, x: Var) -> Result<Var> {
        let out = self.value(x).map(|v| v.max(0.0));
        self.derived(out, Op::Relu(x), &[x], "relu")
    }

    pub fn abs(&mut self, x: Var) -> Result<Var> {
        let out = self.value(x).map(f64::abs);
        self.derived(out, Op::Abs(x), &[x], "abs")
    }

    /// Fused multi-head self-attention over `batch` independent sequences.
    ///
    /// `qkv` is `(batch·seq) × 3d` holding query, key and value blocks side by
    /// side; the result is `(batch·seq) × d`.
    pub fn attention(&mut self, qkv: Var, batch: usize, seq: usize, heads: usize) -> Result<Var> {
        let [m, w] = self.shape(qkv);
        if m != batch * seq || w % 3 != 0 || heads == 0 || (w / 3) % heads != 0 {
            return Err(Error::shape(
                "attention",
                format!("qkv {m}x{w} for batch {batch}, seq {seq}, heads {heads}"),
            ));
        }
        let d = w / 3;
        let dh = d / heads;
        let scale = 1.0 / (dh as f64).sqrt();
        let x = self.value(qkv).data();
        let mut probs = vec![0.0; batch * heads * seq * seq];
        let mut out = Tensor::zeros(m, d);
        let o = out.data_mut();
        for b in 0..batch {
            for h in 0..heads {
                let p = &mut probs[(b * heads + h) * seq * seq..][..seq * seq];
                for i in 0..seq {
                    let qi = &x[(b * seq + i) * w + h * dh..][..dh];
                    let row = &mut p[i * seq..(i + 1) * seq];
                    for (j, s) in row.iter_mut().enumerate() {
                        let kj = &x[(b * seq + j) * w + d + h * dh..][..dh];
                        *s = kernels::dot(qi, kj) * scale;
                    }
                    kernels::softmax_in_place(row);
                    let oi = &mut o[(b * seq + i) * d + h * dh..][..dh];
                    for (j, &pij) in row.iter().enumerate() {
                        let vj = &x[(b * seq + j) * w + 2 * d + h * dh..][..dh];
                        for c in 0..dh {
                            oi[c] += pij * vj[c];
                        }
                    }
                }
            }
        }
        self.derived(
            out,
            Op::Attention {
                qkv,
                batch,
                seq,
                heads,
                probs,
            },
            &[qkv],
            "attention",
        )
    }

    /// Reverse sweep from a scalar output.
    pub fn backward(&self, output: Var) -> Result<Gradients> {
        let out = self.value(output);
        if out.shape() != [1, 1] {
            return Err(Error::shape(
                "backward",
                format!("output must be scalar, got {:?}", out.shape()),
            ));
        }
        if !out.is_finite() {
            return Err(Error::NonFinite("backward"));
        }
        let mut grads: Vec<Option<Tensor>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[output.0] = Some(Tensor::scalar(1.0));
        for i in (0..=output.0).rev() {
            let node = &self.nodes[i];
            if !node.requires_grad {
                continue;
            }
            let Some(dy) = grads[i].take() else {
                continue;
            };
            self.propagate(i, &dy, &mut grads)?;
            grads[i] = Some(dy);
        }
        let grads = grads
            .into_iter()
            .zip(&self.nodes)
            .map(|(g, n)| if matches!(n.op, Op::Param) { g } else { None })
            .collect();
        Ok(Gradients { grads })
    }

    fn accumulate(&self, grads: &mut [Option<Tensor>], v: Var, g: Tensor) {
        if !self.nodes[v.0].requires_grad {
            return;
        }
        match &mut grads[v.0] {
            Some(acc) => acc.add_assign(&g),
            slot @ None => *slot = Some(g),
        }
    }

    fn wants(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    fn propagate(&self, i: usize, dy: &Tensor, grads: &mut [Option<Tensor>]) -> Result<()> {
        let y = &self.nodes[i].value;
        match &self.nodes[i].op {
            Op::Param | Op::Const => {}
            &Op::MatMul { a, ta, b, tb } => {
                let av = self.value(a);
                let bv = self.value(b);
                if self.wants(a) {
                    let mut g = Tensor::zeros(av.rows(), av.cols());
                    if ta {
                        gemm(bv, tb, dy, true, g.data_mut(), 0.0);
                    } else {
                        gemm(dy, false, bv, !tb, g.data_mut(), 0.0);
                    }
                    self.accumulate(grads, a, g);
                }
                if self.wants(b) {
                    let mut g = Tensor::zeros(bv.rows(), bv.cols());
                    if tb {
                        gemm(dy, true, av, ta, g.data_mut(), 0.0);
                    } else {
                        gemm(av, !ta, dy, false, g.data_mut(), 0.0);
                    }
                    self.accumulate(grads, b, g);
                }
            }
            &Op::Add(a, b) => {
                self.accumulate(grads, a, dy.clone());
                self.accumulate(grads, b, dy.clone());
            }
            &Op::Sub(a, b) => {
                self.accumulate(grads, a, dy.clone());
                self.accumulate(grads, b, dy.scale(-1.0));
            }
            &Op::Mul(a, b) => {
                if self.wants(a) {
                    self.accumulate(grads, a, dy.zip(self.value(b), "mul", |g, v| g * v)?);
                }
                if self.wants(b) {
                    self.accumulate(grads, b, dy.zip(self.value(a), "mul", |g, v| g * v)?);
                }
            }
            &Op::Scale(x, s) => self.accumulate(grads, x, dy.scale(s)),
            &Op::AddScalar(x) => self.accumulate(grads, x, dy.clone()),
            &Op::AddRow(x, row) => {
                self.accumulate(grads, x, dy.clone());
                if self.wants(row) {
                    let mut g = Tensor::zeros(1, dy.cols());
                    for r in 0..dy.rows() {
                        for (a, b) in g.data_mut().iter_mut().zip(dy.row_slice(r)) {
                            *a += b;
                        }
                    }
                    self.accumulate(grads, row, g);
                }
            }
            &Op::MulCol(x, col) => {
                let c = self.value(col).data();
                if self.wants(x) {
                    let mut g = dy.clone();
                    for r in 0..g.rows() {
                        g.row_slice_mut(r).iter_mut().for_each(|v| *v *= c[r]);
                    }
                    self.accumulate(grads, x, g);
                }
                if self.wants(col) {
                    let xv = self.value(x);
                    let g = (0..dy.rows())
                        .map(|r| kernels::dot(dy.row_slice(r), xv.row_slice(r)))
                        .collect();
                    self.accumulate(grads, col, Tensor::column(g));
                }
            }
            &Op::Softmax(x) => {
                let mut g = dy.clone();
                for r in 0..g.rows() {
                    let yr = y.row_slice(r);
                    let s = kernels::dot(dy.row_slice(r), yr);
                    for (gv, &p) in g.row_slice_mut(r).iter_mut().zip(yr) {
                        *gv = p * (*gv - s);
                    }
                }
                self.accumulate(grads, x, g);
            }
            &Op::LogSoftmax(x) => {
                let mut g = dy.clone();
                for r in 0..g.rows() {
                    let s: f64 = dy.row_slice(r).iter().sum();
                    for (gv, &ly) in g.row_slice_mut(r).iter_mut().zip(y.row_slice(r)) {
                        *gv -= ly.exp() * s;
                    }
                }
                self.accumulate(grads, x, g);
            }
            Op::LayerNorm {
                x,
                gain,
                bias,
                xhat,
                inv,
            } => {
                let (m, n) = (dy.rows(), dy.cols());
                let gv = self.value(*gain).data();
                if self.wants(*x) {
                    let mut g = Tensor::zeros(m, n);
                    let nf = n as f64;
                    for r in 0..m {
                        let dyr = dy.row_slice(r);
                        let xh = &xhat[r * n..(r + 1) * n];
                        let mut s1 = 0.0;
                        let mut s2 = 0.0;
                        for c in 0..n {
                            let dxh = dyr[c] * gv[c];
                            s1 += dxh;
                            s2 += dxh * xh[c];
                        }
                        let gr = g.row_slice_mut(r);
                        for c in 0..n {
                            let dxh = dyr[c] * gv[c];
                            gr[c] = inv[r] / nf * (nf * dxh - s1 - xh[c] * s2);
                        }
                    }
                    self.accumulate(grads, *x, g);
                }
                if self.wants(*gain) {
                    let mut g = Tensor::zeros(1, n);
                    for r in 0..m {
                        for c in 0..n {
                            g.data_mut()[c] += dy.get(r, c) * xhat[r * n + c];
                        }
                    }
                    self.accumulate(grads, *gain, g);
                }
                if self.wants(*bias) {
                    let mut g = Tensor::zeros(1, n);
                    for r in 0..m {
                        for c in 0..n {
                            g.data_mut()[c] += dy.get(r, c);
                        }
                    }
                    self.accumulate(grads, *bias, g);
                }
            }
            &Op::Gelu(x) => {
                let g = dy.zip(self.value(x), "gelu", |g, v| g * kernels::gelu_grad(v))?;
                self.accumulate(grads, x, g);
            }
            Op::ConcatRows(parts) => {
                let mut off = 0;
                for &p in parts {
                    let rows = self.shape(p)[0];
                    if self.wants(p) {
                        self.accumulate(grads, p, dy.slice_rows(off, rows)?);
                    }
                    off += rows;
                }
            }
            Op::ConcatCols(parts) => {
                let mut off = 0;
                for &p in parts {
                    let cols = self.shape(p)[1];
                    if self.wants(p) {
                        let mut g = Tensor::zeros(dy.rows(), cols);
                        for r in 0..dy.rows() {
                            g.row_slice_mut(r)
                                .copy_from_slice(&dy.row_slice(r)[off..off + cols]);
                        }
                        self.accumulate(grads, p, g);
                    }
                    off += cols;
                }
            }
            &Op::SliceRows { x, start } => {
                let [m, n] = self.shape(x);
                let mut g = Tensor::zeros(m, n);
                g.data_mut()[start * n..start * n + dy.len()].copy_from_slice(dy.data());
                self.accumulate(grads, x, g);
            }
            &Op::SliceCols { x, start } => {
                let [m, n] = self.shape(x);
                let mut g = Tensor::zeros(m, n);
                for r in 0..m {
                    g.row_slice_mut(r)[start..start + dy.cols()].copy_from_slice(dy.row_slice(r));
                }
                self.accumulate(grads, x, g);
            }
            Op::GatherRows { x, idx } => {
                let [m, n] = self.shape(*x);
                let mut g = Tensor::zeros(m, n);
                for (k, &i) in idx.iter().enumerate() {
                    for (a, b) in g.row_slice_mut(i).iter_mut().zip(dy.row_slice(k)) {
                        *a += b;
                    }
                }
                self.accumulate(grads, *x, g);
            }
            Op::AddAtRows { x, idx, delta } => {
                self.accumulate(grads, *x, dy.clone());
                if self.wants(*delta) {
                    let mut g = Tensor::zeros(idx.len(), dy.cols());
                    for (k, &i) in idx.iter().enumerate() {
                        g.row_slice_mut(k).copy_from_slice(dy.row_slice(i));
                    }
                    self.accumulate(grads, *delta, g);
                }
            }
            Op::NormalizeRows { x, norms } => {
                let mut g = dy.clone();
                for r in 0..g.rows() {
                    let yr = y.row_slice(r);
                    let s = kernels::dot(dy.row_slice(r), yr);
                    for (gv, &yv) in g.row_slice_mut(r).iter_mut().zip(yr) {
                        *gv = (*gv - yv * s) / norms[r];
                    }
                }
                self.accumulate(grads, *x, g);
            }
            &Op::SumRows(x) => {
                let [m, n] = self.shape(x);
                let mut g = Tensor::zeros(m, n);
                for r in 0..m {
                    let d = dy.data()[r];
                    g.row_slice_mut(r).iter_mut().for_each(|v| *v = d);
                }
                self.accumulate(grads, x, g);
            }
            &Op::SumAll(x) => {
                let [m, n] = self.shape(x);
                self.accumulate(grads, x, Tensor::filled(m, n, dy.data()[0]));
            }
            &Op::Log(x) => {
                let g = dy.zip(self.value(x), "log", |g, v| g / v)?;
                self.accumulate(grads, x, g);
            }
            &Op::Relu(x) => {
                let g = dy.zip(self.value(x), "relu", |g, v| if v > 0.0 { g } else { 0.0 })?;
                self.accumulate(grads, x, g);
            }
            &Op::Abs(x) => {
                let g = dy.zip(self.value(x), "abs", |g, v| g * v.signum() * (v != 0.0) as u8 as f64)?;
                self.accumulate(grads, x, g);
            }
            Op::Attention {
                qkv,
                batch,
                seq,
                heads,
                probs,
            } => {
                let g = attention_backward(self.value(*qkv), dy, *batch, *seq, *heads, probs);
                self.accumulate(grads, *qkv, g);
            }
        }
        Ok(())
    }
}

fn attention_backward(
    qkv: &Tensor,
    dy: &Tensor,
    batch: usize,
    seq: usize,
    heads: usize,
    probs: &[f64],
) -> Tensor {
    let w = qkv.cols();
    let d = w / 3;
    let dh = d / heads;
    let scale = 1.0 / (dh as f64).sqrt();
    let x = qkv.data();
    let dout = dy.data();
    let mut g = Tensor::zeros(qkv.rows(), w);
    let gx = g.data_mut();
    let mut dp = vec![0.0; seq];
    for b in 0..batch {
        for h in 0..heads {
            let p = &probs[(b * heads + h) * seq * seq..][..seq * seq];
            for i in 0..seq {
                let doi = &dout[(b * seq + i) * d + h * dh..][..dh];
                let pi = &p[i * seq..(i + 1) * seq];
                for j in 0..seq {
                    let vj = &x[(b * seq + j) * w + 2 * d + h * dh..][..dh];
                    dp[j] = kernels::dot(doi, vj);
                    let gv = &mut gx[(b * seq + j) * w + 2 * d + h * dh..][..dh];
                    for c in 0..dh {
                        gv[c] += pi[j] * doi[c];
                    }
                }
                let s = kernels::dot(&dp, pi);
                for j in 0..seq {
                    let ds = pi[j] * (dp[j] - s) * scale;
                    if ds == 0.0 {
                        continue;
                    }
                    let (qi_off, kj_off) = ((b * seq + i) * w + h * dh, (b * seq + j) * w + d + h * dh);
                    for c in 0..dh {
                        gx[qi_off + c] += ds * x[kj_off + c];
                        gx[kj_off + c] += ds * x[qi_off + c];
                    }
                }
            }
        }
    }
    g
}

/// Gradients of the trainable leaves of one [`Graph`].
#[derive(Debug)]
pub struct Gradients {
    grads: Vec<Option<Tensor>>,
}

impl Gradients {
    /// Gradient of `v`; `None` for constants and for parameters the output
    /// does not depend on.
    pub fn get(&self, v: Var) -> Option<&Tensor> {
        self.grads.get(v.0).and_then(Option::as_ref)
    }

    /// Gradient of parameter `v`, zero-filled when it did not reach the output.
    pub fn get_or_zeros(&self, v: Var, shape: [usize; 2]) -> Tensor {
        self.get(v)
            .cloned()
            .unwrap_or_else(|| Tensor::zeros(shape[0], shape[1]))
    }
}

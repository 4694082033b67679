//! Tape-based reverse-mode automatic differentiation.
//!
//! A [`Graph`] records every operation as a node appended to the tape. Node
//! inputs always have smaller indices than the node itself, so iterating the
//! tape backwards is a valid reverse topological order and each node is
//! visited exactly once during [`Graph::backward`].
//!
//! All operations treat values as matrices (see [`Tensor`]). Elementwise
//! binary operations broadcast a `1×Q`, `P×1` or `1×1` operand against a
//! `P×Q` one.

use std::sync::Arc;

use super::kernels::{self, gemm_nn, gemm_nt, gemm_tn};
use super::tensor::Tensor;
use crate::error::{Error, Result};

/// Handle to a node on a [`Graph`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
enum BinOp {
    Add,
    Sub,
    Mul,
    Div,
}

#[derive(Clone, Copy, Debug, PartialEq)]
enum UnOp {
    Sigmoid,
    Relu,
    Exp,
    Log,
    Softplus,
    Neg,
    Square,
    Sqrt,
    Powf(f64),
}

#[derive(Clone, Debug)]
enum Op {
    Leaf,
    MatMul(Var, Var),
    MatMulT(Var, Var),
    Transpose(Var),
    Binary(BinOp, Var, Var),
    Unary(UnOp, Var),
    Scale(Var, f64),
    AddScalar(Var),
    SoftmaxRows(Var),
    SumAll(Var),
    SumRows(Var),
    SumCols(Var),
    ConcatCols(Vec<Var>),
    ConcatRows(Vec<Var>),
    SliceCols(Var, usize),
    SliceRows(Var, usize),
    GatherRows(Var, Vec<usize>),
    NeighborMean(Var, Arc<Neighbors>),
}

/// Fixed-degree neighbor lists: row `i` of the output of
/// [`Graph::neighbor_mean`] averages input rows `indices[i*k..(i+1)*k]`.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Neighbors {
    pub k: usize,
    pub indices: Vec<usize>,
}

struct Node {
    value: Tensor,
    op: Op,
    requires_grad: bool,
}

/// A single-threaded recording of operations and their values.
#[derive(Default)]
pub struct Graph {
    nodes: Vec<Node>,
    grads: Vec<Option<Vec<f64>>>,
}

fn dims(t: &Tensor) -> (usize, usize) {
    (t.rows(), t.cols())
}

fn shape_err(op: &'static str, a: &Tensor, b: &Tensor) -> Error {
    Error::Shape {
        op,
        lhs: a.shape().to_vec(),
        rhs: b.shape().to_vec(),
    }
}

fn broadcast_dim(a: usize, b: usize) -> Option<usize> {
    if a == b {
        Some(a)
    } else if a == 1 {
        Some(b)
    } else if b == 1 {
        Some(a)
    } else {
        None
    }
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

    fn push(&mut self, value: Tensor, op: Op, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    fn rg(&self, vars: &[Var]) -> bool {
        vars.iter().any(|v| self.nodes[v.0].requires_grad)
    }

    /// Leaf that receives a gradient on backward.
    pub fn param(&mut self, value: Tensor) -> Var {
        self.push(value, Op::Leaf, true)
    }

    /// Leaf that is treated as a constant.
    pub fn constant(&mut self, value: Tensor) -> Var {
        self.push(value, Op::Leaf, false)
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    /// Gradient accumulated by the last [`Graph::backward`], if `v` received one.
    pub fn grad(&self, v: Var) -> Option<Tensor> {
        self.grads
            .get(v.0)
            .and_then(|g| g.as_ref())
            .map(|g| Tensor::from_parts(self.nodes[v.0].value.shape().to_vec(), g.clone()))
    }

    pub fn clear_grads(&mut self) {
        self.grads.clear();
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (ta, tb) = (self.value(a), self.value(b));
        let ((m, k), (k2, n)) = (dims(ta), dims(tb));
        if k != k2 {
            return Err(shape_err("matmul", ta, tb));
        }
        let mut out = vec![0.0; m * n];
        gemm_nn(ta.data(), tb.data(), &mut out, m, k, n);
        let rg = self.rg(&[a, b]);
        Ok(self.push(Tensor::from_parts(vec![m, n], out), Op::MatMul(a, b), rg))
    }

    /// `a · bᵀ` without materializing the transpose.
    pub fn matmul_t(&mut self, a: Var, b: Var) -> Result<Var> {
        let (ta, tb) = (self.value(a), self.value(b));
        let ((m, k), (n, k2)) = (dims(ta), dims(tb));
        if k != k2 {
            return Err(shape_err("matmul_t", ta, tb));
        }
        let mut out = vec![0.0; m * n];
        gemm_nt(ta.data(), tb.data(), &mut out, m, k, n);
        let rg = self.rg(&[a, b]);
        Ok(self.push(Tensor::from_parts(vec![m, n], out), Op::MatMulT(a, b), rg))
    }

    pub fn transpose(&mut self, a: Var) -> Var {
        let ta = self.value(a);
        let (m, n) = dims(ta);
        let d = ta.data();
        let mut out = vec![0.0; m * n];
        for i in 0..m {
            for j in 0..n {
                out[j * m + i] = d[i * n + j];
            }
        }
        let rg = self.rg(&[a]);
        self.push(Tensor::from_parts(vec![n, m], out), Op::Transpose(a), rg)
    }

    fn binary(&mut self, op: BinOp, a: Var, b: Var) -> Result<Var> {
        let (ta, tb) = (self.value(a), self.value(b));
        let ((pa, qa), (pb, qb)) = (dims(ta), dims(tb));
        let name = match op {
            BinOp::Add => "add",
            BinOp::Sub => "sub",
            BinOp::Mul => "mul",
            BinOp::Div => "div",
        };
        let (p, q) = match (broadcast_dim(pa, pb), broadcast_dim(qa, qb)) {
            (Some(p), Some(q)) => (p, q),
            _ => return Err(shape_err(name, ta, tb)),
        };
        let (da, db) = (ta.data(), tb.data());
        let mut out = Vec::with_capacity(p * q);
        for r in 0..p {
            let (ra, rb) = (if pa == 1 { 0 } else { r }, if pb == 1 { 0 } else { r });
            for c in 0..q {
                let x = da[ra * qa + if qa == 1 { 0 } else { c }];
                let y = db[rb * qb + if qb == 1 { 0 } else { c }];
                out.push(match op {
                    BinOp::Add => x + y,
                    BinOp::Sub => x - y,
                    BinOp::Mul => x * y,
                    BinOp::Div => x / y,
                });
            }
        }
        if op == BinOp::Div && out.iter().any(|v| !v.is_finite()) {
            return Err(Error::Contract("division produced a non-finite value".into()));
        }
        let shape = if dims(ta) == (p, q) {
            ta.shape().to_vec()
        } else if dims(tb) == (p, q) {
            tb.shape().to_vec()
        } else {
            vec![p, q]
        };
        let rg = self.rg(&[a, b]);
        Ok(self.push(Tensor::from_parts(shape, out), Op::Binary(op, a, b), rg))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(BinOp::Add, a, b)
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(BinOp::Sub, a, b)
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(BinOp::Mul, a, b)
    }

    pub fn div(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(BinOp::Div, a, b)
    }

    fn unary(&mut self, op: UnOp, a: Var) -> Var {
        let ta = self.value(a);
        let f = |x: f64| -> f64 {
            match op {
                UnOp::Sigmoid => kernels::sigmoid(x),
                UnOp::Relu => x.max(0.0),
                UnOp::Exp => x.min(700.0).exp(),
                UnOp::Log => x.max(f64::MIN_POSITIVE).ln(),
                UnOp::Softplus => kernels::softplus(x),
                UnOp::Neg => -x,
                UnOp::Square => x * x,
                UnOp::Sqrt => x.max(0.0).sqrt(),
                UnOp::Powf(p) => x.max(0.0).powf(p).min(f64::MAX),
            }
        };
        let out: Vec<f64> = ta.data().iter().map(|&x| f(x)).collect();
        let shape = ta.shape().to_vec();
        let rg = self.rg(&[a]);
        self.push(Tensor::from_parts(shape, out), Op::Unary(op, a), rg)
    }

    pub fn sigmoid(&mut self, a: Var) -> Var {
        self.unary(UnOp::Sigmoid, a)
    }

    pub fn relu(&mut self, a: Var) -> Var {
        self.unary(UnOp::Relu, a)
    }

    /// Exponential; inputs above 700 are clamped to keep the result finite.
    pub fn exp(&mut self, a: Var) -> Var {
        self.unary(UnOp::Exp, a)
    }

    /// Natural log; inputs are clamped below at the smallest positive normal.
    pub fn log(&mut self, a: Var) -> Var {
        self.unary(UnOp::Log, a)
    }

    pub fn softplus(&mut self, a: Var) -> Var {
        self.unary(UnOp::Softplus, a)
    }

    pub fn neg(&mut self, a: Var) -> Var {
        self.unary(UnOp::Neg, a)
    }

    pub fn square(&mut self, a: Var) -> Var {
        self.unary(UnOp::Square, a)
    }

    pub fn sqrt(&mut self, a: Var) -> Var {
        self.unary(UnOp::Sqrt, a)
    }

    /// `x^p` for nonnegative `x` (negative inputs are clamped to 0).
    pub fn powf(&mut self, a: Var, p: f64) -> Var {
        if p == 2.0 {
            return self.square(a);
        }
        self.unary(UnOp::Powf(p), a)
    }

    pub fn scale(&mut self, a: Var, s: f64) -> Var {
        let ta = self.value(a);
        let out = ta.data().iter().map(|x| x * s).collect();
        let shape = ta.shape().to_vec();
        let rg = self.rg(&[a]);
        self.push(Tensor::from_parts(shape, out), Op::Scale(a, s), rg)
    }

    pub fn add_scalar(&mut self, a: Var, s: f64) -> Var {
        let ta = self.value(a);
        let out = ta.data().iter().map(|x| x + s).collect();
        let shape = ta.shape().to_vec();
        let rg = self.rg(&[a]);
        self.push(Tensor::from_parts(shape, out), Op::AddScalar(a), rg)
    }

    /// `s - a`
    pub fn rsub_scalar(&mut self, s: f64, a: Var) -> Var {
        let n = self.neg(a);
        self.add_scalar(n, s)
    }

    /// Row-wise softmax with max subtraction.
    pub fn softmax_rows(&mut self, a: Var) -> Var {
        let ta = self.value(a);
        let (p, q) = dims(ta);
        let mut out = ta.data().to_vec();
        for row in out.chunks_mut(q.max(1)) {
            let m = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            let mut s = 0.0;
            for v in row.iter_mut() {
                *v = (*v - m).exp();
                s += *v;
            }
            for v in row.iter_mut() {
                *v /= s;
            }
        }
        let rg = self.rg(&[a]);
        self.push(Tensor::from_parts(vec![p, q], out), Op::SoftmaxRows(a), rg)
    }

    /// Sum of all entries as a `1×1` value.
    pub fn sum(&mut self, a: Var) -> Var {
        let s = self.value(a).data().iter().sum();
        let rg = self.rg(&[a]);
        self.push(Tensor::from_parts(vec![1, 1], vec![s]), Op::SumAll(a), rg)
    }

    pub fn mean(&mut self, a: Var) -> Var {
        let n = self.value(a).numel().max(1) as f64;
        let s = self.sum(a);
        self.scale(s, 1.0 / n)
    }

    /// Sums across columns: `P×Q → P×1`.
    pub fn sum_rows(&mut self, a: Var) -> Var {
        let ta = self.value(a);
        let (p, q) = dims(ta);
        let out = ta.data().chunks(q.max(1)).map(|r| r.iter().sum()).collect();
        let rg = self.rg(&[a]);
        self.push(Tensor::from_parts(vec![p, 1], out), Op::SumRows(a), rg)
    }

    /// Sums down rows: `P×Q → 1×Q`.
    pub fn sum_cols(&mut self, a: Var) -> Var {
        let ta = self.value(a);
        let (_, q) = dims(ta);
        let mut out = vec![0.0; q];
        for row in ta.data().chunks(q.max(1)) {
            for (o, v) in out.iter_mut().zip(row) {
                *o += v;
            }
        }
        let rg = self.rg(&[a]);
        self.push(Tensor::from_parts(vec![1, q], out), Op::SumCols(a), rg)
    }

    pub fn mean_rows(&mut self, a: Var) -> Var {
        let q = self.value(a).cols().max(1) as f64;
        let s = self.sum_rows(a);
        self.scale(s, 1.0 / q)
    }

    pub fn mean_cols(&mut self, a: Var) -> Var {
        let p = self.value(a).rows().max(1) as f64;
        let s = self.sum_cols(a);
        self.scale(s, 1.0 / p)
    }

    pub fn concat_cols(&mut self, parts: &[Var]) -> Result<Var> {
        let p = self.value(parts[0]).rows();
        let mut q = 0;
        for &v in parts {
            let t = self.value(v);
            if t.rows() != p {
                return Err(shape_err("concat_cols", self.value(parts[0]), t));
            }
            q += t.cols();
        }
        let mut out = Vec::with_capacity(p * q);
        for r in 0..p {
            for &v in parts {
                out.extend_from_slice(self.value(v).row(r));
            }
        }
        let rg = self.rg(parts);
        Ok(self.push(Tensor::from_parts(vec![p, q], out), Op::ConcatCols(parts.to_vec()), rg))
    }

    pub fn concat_rows(&mut self, parts: &[Var]) -> Result<Var> {
        let q = self.value(parts[0]).cols();
        let mut out = Vec::new();
        let mut p = 0;
        for &v in parts {
            let t = self.value(v);
            if t.cols() != q {
                return Err(shape_err("concat_rows", self.value(parts[0]), t));
            }
            p += t.rows();
            out.extend_from_slice(t.data());
        }
        let rg = self.rg(parts);
        Ok(self.push(Tensor::from_parts(vec![p, q], out), Op::ConcatRows(parts.to_vec()), rg))
    }

    /// Columns `start..start+len`.
    pub fn slice_cols(&mut self, a: Var, start: usize, len: usize) -> Result<Var> {
        let ta = self.value(a);
        let (p, q) = dims(ta);
        if start + len > q {
            return Err(Error::Shape {
                op: "slice_cols",
                lhs: ta.shape().to_vec(),
                rhs: vec![start, len],
            });
        }
        let mut out = Vec::with_capacity(p * len);
        for r in 0..p {
            out.extend_from_slice(&ta.row(r)[start..start + len]);
        }
        let rg = self.rg(&[a]);
        Ok(self.push(Tensor::from_parts(vec![p, len], out), Op::SliceCols(a, start), rg))
    }

    /// Rows `start..start+len`.
    pub fn slice_rows(&mut self, a: Var, start: usize, len: usize) -> Result<Var> {
        let ta = self.value(a);
        let (p, q) = dims(ta);
        if start + len > p {
            return Err(Error::Shape {
                op: "slice_rows",
                lhs: ta.shape().to_vec(),
                rhs: vec![start, len],
            });
        }
        let out = ta.data()[start * q..(start + len) * q].to_vec();
        let rg = self.rg(&[a]);
        Ok(self.push(Tensor::from_parts(vec![len, q], out), Op::SliceRows(a, start), rg))
    }

    /// Rows picked by index (repeats allowed).
    pub fn gather_rows(&mut self, a: Var, rows: &[usize]) -> Result<Var> {
        let ta = self.value(a);
        let (p, q) = dims(ta);
        if let Some(&bad) = rows.iter().find(|&&r| r >= p) {
            return Err(Error::Shape {
                op: "gather_rows",
                lhs: ta.shape().to_vec(),
                rhs: vec![bad],
            });
        }
        let mut out = Vec::with_capacity(rows.len() * q);
        for &r in rows {
            out.extend_from_slice(ta.row(r));
        }
        let rg = self.rg(&[a]);
        Ok(self.push(
            Tensor::from_parts(vec![rows.len(), q], out),
            Op::GatherRows(a, rows.to_vec()),
            rg,
        ))
    }

    /// Each output row is the mean of `k` input rows named by `neighbors`.
    pub fn neighbor_mean(&mut self, a: Var, neighbors: Arc<Neighbors>) -> Result<Var> {
        let ta = self.value(a);
        let (p, q) = dims(ta);
        let k = neighbors.k;
        if k == 0 || !neighbors.indices.len().is_multiple_of(k) || neighbors.indices.iter().any(|&i| i >= p) {
            return Err(Error::Contract("neighbor lists do not fit the input".into()));
        }
        let rows = neighbors.indices.len() / k;
        let inv = 1.0 / k as f64;
        let mut out = vec![0.0; rows * q];
        for (i, nb) in neighbors.indices.chunks(k).enumerate() {
            let o = &mut out[i * q..(i + 1) * q];
            for &j in nb {
                for (ov, v) in o.iter_mut().zip(ta.row(j)) {
                    *ov += v * inv;
                }
            }
        }
        let rg = self.rg(&[a]);
        Ok(self.push(
            Tensor::from_parts(vec![rows, q], out),
            Op::NeighborMean(a, neighbors),
            rg,
        ))
    }

    /// Normalizes each row to zero mean and unit variance, then applies the
    /// per-column `gain` and `bias` (`1×Q` each).
    pub fn layer_norm(&mut self, x: Var, gain: Var, bias: Var, eps: f64) -> Result<Var> {
        let mu = self.mean_rows(x);
        let xc = self.sub(x, mu)?;
        let sq = self.square(xc);
        let var = self.mean_rows(sq);
        let var = self.add_scalar(var, eps);
        let sd = self.sqrt(var);
        let xn = self.div(xc, sd)?;
        let y = self.mul(xn, gain)?;
        self.add(y, bias)
    }

    /// `x · weight + bias`, with `weight: in×out` and `bias: 1×out`.
    pub fn linear(&mut self, x: Var, weight: Var, bias: Var) -> Result<Var> {
        let y = self.matmul(x, weight)?;
        self.add(y, bias)
    }

    /// Populates gradients of `loss` with respect to every node that
    /// requires one.
    pub fn backward(&mut self, loss: Var) -> Result<()> {
        if self.value(loss).numel() != 1 {
            return Err(Error::Contract(format!(
                "backward needs a scalar loss, got shape {:?}",
                self.value(loss).shape()
            )));
        }
        self.grads = vec![None; self.nodes.len()];
        self.grads[loss.0] = Some(vec![1.0]);
        for idx in (0..=loss.0).rev() {
            let Some(g) = self.grads[idx].take() else {
                continue;
            };
            if self.nodes[idx].requires_grad {
                self.propagate(idx, &g);
            }
            self.grads[idx] = Some(g);
        }
        Ok(())
    }

    fn accumulate(&mut self, v: Var, contrib: Vec<f64>) {
        if !self.nodes[v.0].requires_grad {
            return;
        }
        match &mut self.grads[v.0] {
            Some(g) => {
                for (a, b) in g.iter_mut().zip(&contrib) {
                    *a += b;
                }
            }
            slot @ None => *slot = Some(contrib),
        }
    }

    fn wants(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    fn propagate(&mut self, idx: usize, g: &[f64]) {
        let op = self.nodes[idx].op.clone();
        match op {
            Op::Leaf => {}
            Op::MatMul(a, b) => {
                let (m, k) = dims(self.value(a));
                let n = self.value(b).cols();
                if self.wants(a) {
                    let mut ga = vec![0.0; m * k];
                    gemm_nt(g, self.value(b).data(), &mut ga, m, n, k);
                    self.accumulate(a, ga);
                }
                if self.wants(b) {
                    let mut gb = vec![0.0; k * n];
                    gemm_tn(self.value(a).data(), g, &mut gb, k, m, n);
                    self.accumulate(b, gb);
                }
            }
            Op::MatMulT(a, b) => {
                // out = a·bᵀ, a: m×k, b: n×k
                let (m, k) = dims(self.value(a));
                let n = self.value(b).rows();
                if self.wants(a) {
                    let mut ga = vec![0.0; m * k];
                    gemm_nn(g, self.value(b).data(), &mut ga, m, n, k);
                    self.accumulate(a, ga);
                }
                if self.wants(b) {
                    let mut gb = vec![0.0; n * k];
                    gemm_tn(g, self.value(a).data(), &mut gb, n, m, k);
                    self.accumulate(b, gb);
                }
            }
            Op::Transpose(a) => {
                let (m, n) = dims(self.value(a));
                let mut ga = vec![0.0; m * n];
                for i in 0..m {
                    for j in 0..n {
                        ga[i * n + j] = g[j * m + i];
                    }
                }
                self.accumulate(a, ga);
            }
            Op::Binary(op, a, b) => self.propagate_binary(idx, op, a, b, g),
            Op::Unary(op, a) => {
                let x = self.value(a).data();
                let y = self.nodes[idx].value.data();
                let ga: Vec<f64> = (0..g.len())
                    .map(|i| {
                        let d = match op {
                            UnOp::Sigmoid => y[i] * (1.0 - y[i]),
                            UnOp::Relu => {
                                if x[i] > 0.0 {
                                    1.0
                                } else {
                                    0.0
                                }
                            }
                            UnOp::Exp => y[i],
                            UnOp::Log => 1.0 / x[i].max(f64::MIN_POSITIVE),
                            UnOp::Softplus => kernels::sigmoid(x[i]),
                            UnOp::Neg => -1.0,
                            UnOp::Square => 2.0 * x[i],
                            UnOp::Sqrt => {
                                if y[i] > 0.0 {
                                    0.5 / y[i]
                                } else {
                                    0.0
                                }
                            }
                            UnOp::Powf(p) => {
                                if x[i] > 0.0 {
                                    p * x[i].powf(p - 1.0)
                                } else {
                                    0.0
                                }
                            }
                        };
                        (g[i] * d).clamp(-f64::MAX, f64::MAX)
                    })
                    .collect();
                self.accumulate(a, ga);
            }
            Op::Scale(a, s) => {
                let ga = g.iter().map(|v| v * s).collect();
                self.accumulate(a, ga);
            }
            Op::AddScalar(a) => self.accumulate(a, g.to_vec()),
            Op::SoftmaxRows(a) => {
                let y = self.nodes[idx].value.data();
                let q = self.nodes[idx].value.cols().max(1);
                let mut ga = vec![0.0; g.len()];
                for ((gr, yr), out) in g.chunks(q).zip(y.chunks(q)).zip(ga.chunks_mut(q)) {
                    let s: f64 = gr.iter().zip(yr).map(|(a, b)| a * b).sum();
                    for ((o, gv), yv) in out.iter_mut().zip(gr).zip(yr) {
                        *o = yv * (gv - s);
                    }
                }
                self.accumulate(a, ga);
            }
            Op::SumAll(a) => {
                let n = self.value(a).numel();
                self.accumulate(a, vec![g[0]; n]);
            }
            Op::SumRows(a) => {
                let (p, q) = dims(self.value(a));
                let mut ga = Vec::with_capacity(p * q);
                for &gv in g.iter().take(p) {
                    ga.extend(std::iter::repeat_n(gv, q));
                }
                self.accumulate(a, ga);
            }
            Op::SumCols(a) => {
                let (p, _) = dims(self.value(a));
                let ga = g.repeat(p);
                self.accumulate(a, ga);
            }
            Op::ConcatCols(parts) => {
                let q_total = self.nodes[idx].value.cols();
                let mut offset = 0;
                for v in parts {
                    let (p, q) = dims(self.value(v));
                    if self.wants(v) {
                        let mut gv = Vec::with_capacity(p * q);
                        for r in 0..p {
                            gv.extend_from_slice(&g[r * q_total + offset..r * q_total + offset + q]);
                        }
                        self.accumulate(v, gv);
                    }
                    offset += q;
                }
            }
            Op::ConcatRows(parts) => {
                let mut offset = 0;
                for v in parts {
                    let n = self.value(v).numel();
                    if self.wants(v) {
                        self.accumulate(v, g[offset..offset + n].to_vec());
                    }
                    offset += n;
                }
            }
            Op::SliceCols(a, start) => {
                let (p, q) = dims(self.value(a));
                let len = self.nodes[idx].value.cols();
                let mut ga = vec![0.0; p * q];
                for r in 0..p {
                    ga[r * q + start..r * q + start + len].copy_from_slice(&g[r * len..(r + 1) * len]);
                }
                self.accumulate(a, ga);
            }
            Op::SliceRows(a, start) => {
                let (p, q) = dims(self.value(a));
                let mut ga = vec![0.0; p * q];
                ga[start * q..start * q + g.len()].copy_from_slice(g);
                self.accumulate(a, ga);
            }
            Op::GatherRows(a, rows) => {
                let (p, q) = dims(self.value(a));
                let mut ga = vec![0.0; p * q];
                for (i, &r) in rows.iter().enumerate() {
                    for (o, v) in ga[r * q..(r + 1) * q].iter_mut().zip(&g[i * q..(i + 1) * q]) {
                        *o += v;
                    }
                }
                self.accumulate(a, ga);
            }
            Op::NeighborMean(a, nb) => {
                let (p, q) = dims(self.value(a));
                let inv = 1.0 / nb.k as f64;
                let mut ga = vec![0.0; p * q];
                for (i, list) in nb.indices.chunks(nb.k).enumerate() {
                    let gi = &g[i * q..(i + 1) * q];
                    for &j in list {
                        for (o, v) in ga[j * q..(j + 1) * q].iter_mut().zip(gi) {
                            *o += v * inv;
                        }
                    }
                }
                self.accumulate(a, ga);
            }
        }
    }

    fn propagate_binary(&mut self, idx: usize, op: BinOp, a: Var, b: Var, g: &[f64]) {
        let (pa, qa) = dims(self.value(a));
        let (pb, qb) = dims(self.value(b));
        let (p, q) = dims(&self.nodes[idx].value);
        let da = self.value(a).data();
        let db = self.value(b).data();
        let want_a = self.wants(a);
        let want_b = self.wants(b);
        let mut ga = if want_a { vec![0.0; pa * qa] } else { Vec::new() };
        let mut gb = if want_b { vec![0.0; pb * qb] } else { Vec::new() };
        for r in 0..p {
            let (ra, rb) = (if pa == 1 { 0 } else { r }, if pb == 1 { 0 } else { r });
            for c in 0..q {
                let ia = ra * qa + if qa == 1 { 0 } else { c };
                let ib = rb * qb + if qb == 1 { 0 } else { c };
                let gv = g[r * q + c];
                let (x, y) = (da[ia], db[ib]);
                let (dx, dy) = match op {
                    BinOp::Add => (gv, gv),
                    BinOp::Sub => (gv, -gv),
                    BinOp::Mul => (gv * y, gv * x),
                    BinOp::Div => (gv / y, -gv * x / (y * y)),
                };
                if want_a {
                    ga[ia] += dx;
                }
                if want_b {
                    gb[ib] += dy;
                }
            }
        }
        if want_a {
            self.accumulate(a, ga);
        }
        if want_b {
            self.accumulate(b, gb);
        }
    }
}

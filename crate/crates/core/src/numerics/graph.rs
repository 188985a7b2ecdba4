//! Dynamic tape for reverse-mode differentiation.
//!
//! A [`Graph`] records every op in insertion order; [`Graph::backward`] walks
//! the tape in exact reverse. A graph is single-use: it is rebuilt for every
//! forward pass and `backward` may run once.

use std::cell::{Cell, RefCell};

use super::gemm::{gemm, Layout};
use super::tensor::{numel, rows_cols, Tensor};
use crate::error::{Error, Result};

/// Handle to a node on a [`Graph`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn id(self) -> usize {
        self.0
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum BinaryKind {
    Add,
    Sub,
    Mul,
    Div,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum UnaryKind {
    Exp,
    Log,
    Sigmoid,
    Gelu,
}

enum Op {
    Leaf,
    Binary {
        kind: BinaryKind,
        a: Var,
        b: Var,
    },
    Unary {
        kind: UnaryKind,
        x: Var,
    },
    Affine {
        x: Var,
        scale: f64,
    },
    Pow {
        x: Var,
        exponent: f64,
    },
    ClampMin {
        x: Var,
        floor: f64,
    },
    ScaleGrad {
        x: Var,
        factor: f64,
    },
    MatMul {
        a: Var,
        b: Var,
    },
    Transpose {
        x: Var,
    },
    Reshape {
        x: Var,
    },
    Softmax {
        x: Var,
        axis: usize,
    },
    LogSoftmax {
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
    Normalize {
        x: Var,
        norms: Vec<f64>,
    },
    Sum {
        x: Var,
    },
    Mean {
        x: Var,
    },
    SumAxis {
        x: Var,
        axis: usize,
    },
    ConcatRows {
        parts: Vec<Var>,
    },
    GatherRows {
        x: Var,
        index: Vec<usize>,
    },
    Attention {
        q: Var,
        k: Var,
        v: Var,
        heads: usize,
        segments: Vec<(usize, usize)>,
        probs: Vec<f64>,
    },
}

struct Node {
    value: Tensor,
    op: Op,
    requires_grad: bool,
}

#[derive(Default)]
pub struct Graph {
    nodes: RefCell<Vec<Node>>,
    grads: RefCell<Vec<Option<Vec<f64>>>>,
    backward_done: Cell<bool>,
}

const GELU_C: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)
const GELU_A: f64 = 0.044_715;

fn gelu(x: f64) -> f64 {
    0.5 * x * (1.0 + (GELU_C * (x + GELU_A * x * x * x)).tanh())
}

fn gelu_grad(x: f64) -> f64 {
    let t = (GELU_C * (x + GELU_A * x * x * x)).tanh();
    0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * GELU_C * (1.0 + 3.0 * GELU_A * x * x)
}

fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

/// Output shape for trailing-axis broadcasting: shapes must be equal or one
/// must be a suffix of the other (the scalar shape `[]` is a suffix of all).
fn broadcast_shape(a: &[usize], b: &[usize]) -> Result<Vec<usize>> {
    if a == b || a.ends_with(b) {
        Ok(a.to_vec())
    } else if b.ends_with(a) {
        Ok(b.to_vec())
    } else {
        Err(Error::dim(format!("cannot broadcast {a:?} with {b:?}")))
    }
}

/// `(outer, n, inner)` split of a shape around `axis`.
fn axis_split(shape: &[usize], axis: usize) -> Result<(usize, usize, usize)> {
    if axis >= shape.len() {
        return Err(Error::dim(format!("axis {axis} out of range for {shape:?}")));
    }
    Ok((
        numel(&shape[..axis]),
        shape[axis],
        numel(&shape[axis + 1..]),
    ))
}

fn accumulate(slot: &mut Option<Vec<f64>>, contrib: Vec<f64>) {
    match slot {
        Some(acc) => {
            for (a, c) in acc.iter_mut().zip(contrib) {
                *a += c;
            }
        }
        None => *slot = Some(contrib),
    }
}

impl Graph {
    pub fn new() -> Self {
        Self::default()
    }

    fn push(&self, value: Tensor, op: Op, requires_grad: bool) -> Var {
        let mut nodes = self.nodes.borrow_mut();
        nodes.push(Node {
            value,
            op,
            requires_grad,
        });
        Var(nodes.len() - 1)
    }

    fn rg(&self, vars: &[Var]) -> bool {
        let nodes = self.nodes.borrow();
        vars.iter().any(|v| nodes[v.0].requires_grad)
    }

    /// Trainable leaf.
    pub fn param(&self, value: Tensor) -> Var {
        self.push(value, Op::Leaf, true)
    }

    /// Leaf that never receives a gradient.
    pub fn constant(&self, value: Tensor) -> Var {
        self.push(value, Op::Leaf, false)
    }

    pub fn len(&self) -> usize {
        self.nodes.borrow().len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn value(&self, v: Var) -> Tensor {
        self.nodes.borrow()[v.0].value.clone()
    }

    pub fn shape(&self, v: Var) -> Vec<usize> {
        self.nodes.borrow()[v.0].value.shape().to_vec()
    }

    pub fn item(&self, v: Var) -> Result<f64> {
        self.nodes.borrow()[v.0].value.item()
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes.borrow()[v.0].requires_grad
    }

    /// Gradient of a leaf after [`Graph::backward`]; `None` before, or for
    /// nodes that do not require a gradient.
    pub fn grad(&self, v: Var) -> Option<Tensor> {
        let grads = self.grads.borrow();
        let shape = self.shape(v);
        grads
            .get(v.0)
            .and_then(|g| g.as_ref())
            .map(|g| Tensor::new(shape, g.clone()).expect("gradient shape"))
    }

    // ---- elementwise -----------------------------------------------------

    pub fn binary(&self, kind: BinaryKind, a: Var, b: Var) -> Result<Var> {
        let value = {
            let nodes = self.nodes.borrow();
            let (ta, tb) = (&nodes[a.0].value, &nodes[b.0].value);
            let shape = broadcast_shape(ta.shape(), tb.shape())?;
            let (da, db) = (ta.data(), tb.data());
            if kind == BinaryKind::Div && db.contains(&0.0) {
                return Err(Error::DivisionByZero);
            }
            let n = numel(&shape);
            let (na, nb) = (da.len(), db.len());
            let data: Vec<f64> = (0..n)
                .map(|i| {
                    let (x, y) = (da[i % na], db[i % nb]);
                    match kind {
                        BinaryKind::Add => x + y,
                        BinaryKind::Sub => x - y,
                        BinaryKind::Mul => x * y,
                        BinaryKind::Div => x / y,
                    }
                })
                .collect();
            Tensor::new(shape, data)?
        };
        let rg = self.rg(&[a, b]);
        Ok(self.push(value, Op::Binary { kind, a, b }, rg))
    }

    pub fn add(&self, a: Var, b: Var) -> Result<Var> {
        self.binary(BinaryKind::Add, a, b)
    }

    pub fn sub(&self, a: Var, b: Var) -> Result<Var> {
        self.binary(BinaryKind::Sub, a, b)
    }

    pub fn mul(&self, a: Var, b: Var) -> Result<Var> {
        self.binary(BinaryKind::Mul, a, b)
    }

    pub fn div(&self, a: Var, b: Var) -> Result<Var> {
        self.binary(BinaryKind::Div, a, b)
    }

    pub fn unary(&self, kind: UnaryKind, x: Var) -> Result<Var> {
        let value = {
            let nodes = self.nodes.borrow();
            let t = &nodes[x.0].value;
            if kind == UnaryKind::Log {
                if let Some(bad) = t.data().iter().find(|v| **v <= 0.0) {
                    return Err(Error::Domain(format!("log of non-positive value {bad}")));
                }
            }
            let f: fn(f64) -> f64 = match kind {
                UnaryKind::Exp => f64::exp,
                UnaryKind::Log => f64::ln,
                UnaryKind::Sigmoid => sigmoid,
                UnaryKind::Gelu => gelu,
            };
            Tensor::new(t.shape().to_vec(), t.data().iter().map(|v| f(*v)).collect())?
        };
        let rg = self.rg(&[x]);
        Ok(self.push(value, Op::Unary { kind, x }, rg))
    }

    pub fn exp(&self, x: Var) -> Result<Var> {
        self.unary(UnaryKind::Exp, x)
    }

    pub fn log(&self, x: Var) -> Result<Var> {
        self.unary(UnaryKind::Log, x)
    }

    pub fn sigmoid(&self, x: Var) -> Result<Var> {
        self.unary(UnaryKind::Sigmoid, x)
    }

    pub fn gelu(&self, x: Var) -> Result<Var> {
        self.unary(UnaryKind::Gelu, x)
    }

    /// `scale * x + shift`.
    pub fn affine(&self, x: Var, scale: f64, shift: f64) -> Var {
        let value = self.map_value(x, |v| scale * v + shift);
        let rg = self.rg(&[x]);
        self.push(value, Op::Affine { x, scale }, rg)
    }

    pub fn scale(&self, x: Var, s: f64) -> Var {
        self.affine(x, s, 0.0)
    }

    pub fn neg(&self, x: Var) -> Var {
        self.affine(x, -1.0, 0.0)
    }

    /// `1 - x`.
    pub fn one_minus(&self, x: Var) -> Var {
        self.affine(x, -1.0, 1.0)
    }

    /// `x^p` for a scalar exponent.
    pub fn pow(&self, x: Var, exponent: f64) -> Result<Var> {
        {
            let nodes = self.nodes.borrow();
            if exponent.fract() != 0.0 {
                if let Some(bad) = nodes[x.0].value.data().iter().find(|v| **v < 0.0) {
                    return Err(Error::Domain(format!(
                        "non-integer power {exponent} of negative value {bad}"
                    )));
                }
            }
        }
        let value = self.map_value(x, |v| v.powf(exponent));
        let rg = self.rg(&[x]);
        Ok(self.push(value, Op::Pow { x, exponent }, rg))
    }

    /// `max(x, floor)`; the gradient passes only where `x > floor`.
    pub fn clamp_min(&self, x: Var, floor: f64) -> Var {
        let value = self.map_value(x, |v| v.max(floor));
        let rg = self.rg(&[x]);
        self.push(value, Op::ClampMin { x, floor }, rg)
    }

    /// Identity in the forward pass; multiplies the incoming gradient by
    /// `factor`. Used to build deliberately wrong gradients for negative
    /// controls of the gradient checker.
    pub fn scale_grad(&self, x: Var, factor: f64) -> Var {
        let value = self.value(x);
        let rg = self.rg(&[x]);
        self.push(value, Op::ScaleGrad { x, factor }, rg)
    }

    fn map_value(&self, x: Var, f: impl Fn(f64) -> f64) -> Tensor {
        let nodes = self.nodes.borrow();
        let t = &nodes[x.0].value;
        Tensor::new(t.shape().to_vec(), t.data().iter().map(|v| f(*v)).collect())
            .expect("same shape")
    }

    // ---- linear algebra --------------------------------------------------

    pub fn matmul(&self, a: Var, b: Var) -> Result<Var> {
        let value = {
            let nodes = self.nodes.borrow();
            let (ta, tb) = (&nodes[a.0].value, &nodes[b.0].value);
            let (sa, sb) = (ta.shape(), tb.shape());
            if sa.len() != 2 || sb.len() != 2 || sa[1] != sb[0] {
                return Err(Error::dim(format!("matmul {sa:?} x {sb:?}")));
            }
            let (m, k, n) = (sa[0], sa[1], sb[1]);
            let mut out = vec![0.0; m * n];
            gemm(
                m,
                k,
                n,
                1.0,
                ta.data(),
                Layout::row_major(k),
                tb.data(),
                Layout::row_major(n),
                0.0,
                &mut out,
                Layout::row_major(n),
            );
            Tensor::new(vec![m, n], out)?
        };
        let rg = self.rg(&[a, b]);
        Ok(self.push(value, Op::MatMul { a, b }, rg))
    }

    pub fn transpose(&self, x: Var) -> Result<Var> {
        let value = {
            let nodes = self.nodes.borrow();
            let t = &nodes[x.0].value;
            if t.ndim() != 2 {
                return Err(Error::dim(format!("transpose of {:?}", t.shape())));
            }
            let (r, c) = (t.shape()[0], t.shape()[1]);
            let d = t.data();
            let mut out = vec![0.0; r * c];
            for i in 0..r {
                for j in 0..c {
                    out[j * r + i] = d[i * c + j];
                }
            }
            Tensor::new(vec![c, r], out)?
        };
        let rg = self.rg(&[x]);
        Ok(self.push(value, Op::Transpose { x }, rg))
    }

    pub fn reshape(&self, x: Var, shape: &[usize]) -> Result<Var> {
        let value = self.value(x).reshape(shape)?;
        let rg = self.rg(&[x]);
        Ok(self.push(value, Op::Reshape { x }, rg))
    }

    // ---- normalization ---------------------------------------------------

    /// Softmax along `axis`, computed with max-subtraction.
    pub fn softmax(&self, x: Var, axis: usize) -> Result<Var> {
        self.softmax_impl(x, axis, false)
    }

    pub fn log_softmax(&self, x: Var, axis: usize) -> Result<Var> {
        self.softmax_impl(x, axis, true)
    }

    fn softmax_impl(&self, x: Var, axis: usize, log: bool) -> Result<Var> {
        let value = {
            let nodes = self.nodes.borrow();
            let t = &nodes[x.0].value;
            let (outer, n, inner) = axis_split(t.shape(), axis)?;
            let d = t.data();
            let mut out = vec![0.0; d.len()];
            for o in 0..outer {
                for r in 0..inner {
                    let idx = |i: usize| (o * n + i) * inner + r;
                    let max = (0..n).map(|i| d[idx(i)]).fold(f64::NEG_INFINITY, f64::max);
                    let sum: f64 = (0..n).map(|i| (d[idx(i)] - max).exp()).sum();
                    for i in 0..n {
                        out[idx(i)] = if log {
                            d[idx(i)] - max - sum.ln()
                        } else {
                            (d[idx(i)] - max).exp() / sum
                        };
                    }
                }
            }
            Tensor::new(t.shape().to_vec(), out)?
        };
        let rg = self.rg(&[x]);
        let op = if log {
            Op::LogSoftmax { x, axis }
        } else {
            Op::Softmax { x, axis }
        };
        Ok(self.push(value, op, rg))
    }

    /// Layer normalization over the last axis followed by an affine map.
    pub fn layer_norm(&self, x: Var, gain: Var, bias: Var, eps: f64) -> Result<Var> {
        let (value, xhat, rstd) = {
            let nodes = self.nodes.borrow();
            let t = &nodes[x.0].value;
            let (rows, cols) = rows_cols(t.shape());
            let (g, b) = (&nodes[gain.0].value, &nodes[bias.0].value);
            if g.shape() != [cols] || b.shape() != [cols] {
                return Err(Error::dim(format!(
                    "layer_norm gain {:?} / bias {:?} vs width {cols}",
                    g.shape(),
                    b.shape()
                )));
            }
            let d = t.data();
            let mut out = vec![0.0; d.len()];
            let mut xhat = vec![0.0; d.len()];
            let mut rstd = vec![0.0; rows];
            for r in 0..rows {
                let row = &d[r * cols..(r + 1) * cols];
                let mean = row.iter().sum::<f64>() / cols as f64;
                let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / cols as f64;
                let s = 1.0 / (var + eps).sqrt();
                rstd[r] = s;
                for c in 0..cols {
                    let h = (row[c] - mean) * s;
                    xhat[r * cols + c] = h;
                    out[r * cols + c] = h * g.data()[c] + b.data()[c];
                }
            }
            (Tensor::new(t.shape().to_vec(), out)?, xhat, rstd)
        };
        let rg = self.rg(&[x, gain, bias]);
        Ok(self.push(
            value,
            Op::LayerNorm {
                x,
                gain,
                bias,
                xhat,
                rstd,
            },
            rg,
        ))
    }

    /// L2-normalize along the last axis. A zero row is a domain error.
    pub fn l2_normalize(&self, x: Var) -> Result<Var> {
        let (value, norms) = {
            let nodes = self.nodes.borrow();
            let t = &nodes[x.0].value;
            let (rows, cols) = rows_cols(t.shape());
            let d = t.data();
            let mut out = vec![0.0; d.len()];
            let mut norms = vec![0.0; rows];
            for r in 0..rows {
                let row = &d[r * cols..(r + 1) * cols];
                let norm = row.iter().map(|v| v * v).sum::<f64>().sqrt();
                if norm == 0.0 {
                    return Err(Error::Domain("normalizing a zero vector".into()));
                }
                norms[r] = norm;
                for c in 0..cols {
                    out[r * cols + c] = row[c] / norm;
                }
            }
            (Tensor::new(t.shape().to_vec(), out)?, norms)
        };
        let rg = self.rg(&[x]);
        Ok(self.push(value, Op::Normalize { x, norms }, rg))
    }

    // ---- reductions ------------------------------------------------------

    pub fn sum(&self, x: Var) -> Var {
        let s: f64 = self.nodes.borrow()[x.0].value.data().iter().sum();
        let rg = self.rg(&[x]);
        self.push(Tensor::scalar(s), Op::Sum { x }, rg)
    }

    pub fn mean(&self, x: Var) -> Result<Var> {
        let (s, n) = {
            let nodes = self.nodes.borrow();
            let d = nodes[x.0].value.data();
            (d.iter().sum::<f64>(), d.len())
        };
        if n == 0 {
            return Err(Error::dim("mean of an empty tensor"));
        }
        let rg = self.rg(&[x]);
        Ok(self.push(Tensor::scalar(s / n as f64), Op::Mean { x }, rg))
    }

    /// Sum over `axis`, removing it.
    pub fn sum_axis(&self, x: Var, axis: usize) -> Result<Var> {
        let value = {
            let nodes = self.nodes.borrow();
            let t = &nodes[x.0].value;
            let (outer, n, inner) = axis_split(t.shape(), axis)?;
            let d = t.data();
            let mut out = vec![0.0; outer * inner];
            for o in 0..outer {
                for i in 0..n {
                    for r in 0..inner {
                        out[o * inner + r] += d[(o * n + i) * inner + r];
                    }
                }
            }
            let mut shape = t.shape().to_vec();
            shape.remove(axis);
            Tensor::new(shape, out)?
        };
        let rg = self.rg(&[x]);
        Ok(self.push(value, Op::SumAxis { x, axis }, rg))
    }

    // ---- row assembly ----------------------------------------------------

    /// Concatenate along axis 0; all parts share their trailing shape.
    pub fn concat_rows(&self, parts: &[Var]) -> Result<Var> {
        if parts.is_empty() {
            return Err(Error::dim("concat_rows of nothing"));
        }
        let value = {
            let nodes = self.nodes.borrow();
            let tail = nodes[parts[0].0].value.shape().get(1..).map(<[usize]>::to_vec);
            let tail = tail.ok_or_else(|| Error::dim("concat_rows of a scalar"))?;
            let mut rows = 0;
            let mut data = Vec::new();
            for p in parts {
                let t = &nodes[p.0].value;
                if t.ndim() == 0 || t.shape()[1..] != tail[..] {
                    return Err(Error::dim(format!(
                        "concat_rows: {:?} does not match trailing shape {tail:?}",
                        t.shape()
                    )));
                }
                rows += t.shape()[0];
                data.extend_from_slice(t.data());
            }
            let mut shape = vec![rows];
            shape.extend(tail);
            Tensor::new(shape, data)?
        };
        let rg = self.rg(parts);
        Ok(self.push(
            value,
            Op::ConcatRows {
                parts: parts.to_vec(),
            },
            rg,
        ))
    }

    /// Select rows (axis 0) by index; indices may repeat.
    pub fn gather_rows(&self, x: Var, index: &[usize]) -> Result<Var> {
        let value = {
            let nodes = self.nodes.borrow();
            let t = &nodes[x.0].value;
            if t.ndim() == 0 {
                return Err(Error::dim("gather_rows of a scalar"));
            }
            let rows = t.shape()[0];
            let width = numel(&t.shape()[1..]);
            let mut data = Vec::with_capacity(index.len() * width);
            for &i in index {
                if i >= rows {
                    return Err(Error::dim(format!("row {i} out of range ({rows} rows)")));
                }
                data.extend_from_slice(&t.data()[i * width..(i + 1) * width]);
            }
            let mut shape = t.shape().to_vec();
            shape[0] = index.len();
            Tensor::new(shape, data)?
        };
        let rg = self.rg(&[x]);
        Ok(self.push(
            value,
            Op::GatherRows {
                x,
                index: index.to_vec(),
            },
            rg,
        ))
    }

    pub fn slice_rows(&self, x: Var, start: usize, end: usize) -> Result<Var> {
        let index: Vec<usize> = (start..end).collect();
        self.gather_rows(x, &index)
    }

    // ---- attention -------------------------------------------------------

    /// Multi-head scaled dot-product attention over `q, k, v: N x d`.
    ///
    /// Rows are partitioned into contiguous `(start, len)` segments; each row
    /// attends only within its own segment, so many sequences can share one
    /// matrix. Head `h` uses columns `h*d/heads .. (h+1)*d/heads`.
    pub fn attention(
        &self,
        q: Var,
        k: Var,
        v: Var,
        heads: usize,
        segments: &[(usize, usize)],
    ) -> Result<Var> {
        let (value, probs) = {
            let nodes = self.nodes.borrow();
            let (tq, tk, tv) = (&nodes[q.0].value, &nodes[k.0].value, &nodes[v.0].value);
            let shape = tq.shape().to_vec();
            if shape.len() != 2 || tk.shape() != shape || tv.shape() != shape {
                return Err(Error::dim(format!(
                    "attention q {:?} k {:?} v {:?}",
                    tq.shape(),
                    tk.shape(),
                    tv.shape()
                )));
            }
            let (n, d) = (shape[0], shape[1]);
            if heads == 0 || d % heads != 0 {
                return Err(Error::dim(format!("width {d} not divisible into {heads} heads")));
            }
            check_segments(segments, n)?;
            let dh = d / heads;
            let scale = 1.0 / (dh as f64).sqrt();
            let mut out = vec![0.0; n * d];
            let total: usize = segments.iter().map(|(_, l)| l * l).sum::<usize>() * heads;
            let mut probs = vec![0.0; total];
            let mut off = 0;
            for &(s0, len) in segments {
                for h in 0..heads {
                    let base = s0 * d + h * dh;
                    let p = &mut probs[off..off + len * len];
                    gemm(
                        len,
                        dh,
                        len,
                        scale,
                        tq.data(),
                        Layout::row_major(d).at(base),
                        tk.data(),
                        Layout::transposed(d).at(base),
                        0.0,
                        p,
                        Layout::row_major(len),
                    );
                    for row in p.chunks_mut(len) {
                        let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
                        let mut sum = 0.0;
                        for e in row.iter_mut() {
                            *e = (*e - max).exp();
                            sum += *e;
                        }
                        for e in row.iter_mut() {
                            *e /= sum;
                        }
                    }
                    gemm(
                        len,
                        len,
                        dh,
                        1.0,
                        p,
                        Layout::row_major(len),
                        tv.data(),
                        Layout::row_major(d).at(base),
                        0.0,
                        &mut out,
                        Layout::row_major(d).at(base),
                    );
                    off += len * len;
                }
            }
            (Tensor::new(shape, out)?, probs)
        };
        let rg = self.rg(&[q, k, v]);
        Ok(self.push(
            value,
            Op::Attention {
                q,
                k,
                v,
                heads,
                segments: segments.to_vec(),
                probs,
            },
            rg,
        ))
    }

    // ---- reverse pass ----------------------------------------------------

    /// Populate gradients for every leaf that requires one.
    pub fn backward(&self, loss: Var) -> Result<()> {
        if self.backward_done.get() {
            return Err(Error::BackwardAlreadyRun);
        }
        let nodes = self.nodes.borrow();
        let root = &nodes[loss.0];
        if root.value.len() != 1 {
            return Err(Error::NonScalarLoss(root.value.shape().to_vec()));
        }
        if !root.requires_grad {
            return Err(Error::DetachedGraph);
        }
        self.backward_done.set(true);

        let mut grads: Vec<Option<Vec<f64>>> = (0..nodes.len()).map(|_| None).collect();
        grads[loss.0] = Some(vec![1.0]);
        for id in (0..=loss.0).rev() {
            let node = &nodes[id];
            if !node.requires_grad {
                continue;
            }
            if let Op::Leaf = node.op {
                continue;
            }
            let Some(g) = grads[id].take() else { continue };
            propagate(&nodes, node, &g, &mut grads);
        }
        for (id, node) in nodes.iter().enumerate() {
            let keep = matches!(node.op, Op::Leaf) && node.requires_grad;
            if keep && grads[id].is_none() {
                grads[id] = Some(vec![0.0; node.value.len()]);
            } else if !keep {
                grads[id] = None;
            }
        }
        *self.grads.borrow_mut() = grads;
        Ok(())
    }
}

fn check_segments(segments: &[(usize, usize)], n: usize) -> Result<()> {
    let mut next = 0;
    for &(s, l) in segments {
        if s != next {
            return Err(Error::dim(format!(
                "attention segments must tile the rows contiguously; expected start {next}, got {s}"
            )));
        }
        next = s + l;
    }
    if next != n {
        return Err(Error::dim(format!("attention segments cover {next} of {n} rows")));
    }
    Ok(())
}

fn propagate(nodes: &[Node], node: &Node, g: &[f64], grads: &mut [Option<Vec<f64>>]) {
    let val = |v: Var| &nodes[v.0].value;
    let needs = |v: Var| nodes[v.0].requires_grad;
    let out = node.value.data();
    match &node.op {
        Op::Leaf => {}
        Op::Binary { kind, a, b } => {
            let (da, db) = (val(*a).data(), val(*b).data());
            let (na, nb) = (da.len(), db.len());
            if needs(*a) {
                let mut ga = vec![0.0; na];
                for (i, gi) in g.iter().enumerate() {
                    ga[i % na] += gi
                        * match kind {
                            BinaryKind::Add | BinaryKind::Sub => 1.0,
                            BinaryKind::Mul => db[i % nb],
                            BinaryKind::Div => 1.0 / db[i % nb],
                        };
                }
                accumulate(&mut grads[a.0], ga);
            }
            if needs(*b) {
                let mut gb = vec![0.0; nb];
                for (i, gi) in g.iter().enumerate() {
                    let y = db[i % nb];
                    gb[i % nb] += gi
                        * match kind {
                            BinaryKind::Add => 1.0,
                            BinaryKind::Sub => -1.0,
                            BinaryKind::Mul => da[i % na],
                            BinaryKind::Div => -da[i % na] / (y * y),
                        };
                }
                accumulate(&mut grads[b.0], gb);
            }
        }
        Op::Unary { kind, x } => {
            let dx = val(*x).data();
            let gx = g
                .iter()
                .enumerate()
                .map(|(i, gi)| {
                    gi * match kind {
                        UnaryKind::Exp => out[i],
                        UnaryKind::Log => 1.0 / dx[i],
                        UnaryKind::Sigmoid => out[i] * (1.0 - out[i]),
                        UnaryKind::Gelu => gelu_grad(dx[i]),
                    }
                })
                .collect();
            accumulate(&mut grads[x.0], gx);
        }
        Op::Affine { x, scale } => {
            accumulate(&mut grads[x.0], g.iter().map(|gi| gi * scale).collect());
        }
        Op::Pow { x, exponent } => {
            let dx = val(*x).data();
            let p = *exponent;
            let gx = g
                .iter()
                .zip(dx)
                .map(|(gi, xi)| if p == 0.0 { 0.0 } else { gi * p * xi.powf(p - 1.0) })
                .collect();
            accumulate(&mut grads[x.0], gx);
        }
        Op::ClampMin { x, floor } => {
            let dx = val(*x).data();
            let gx = g
                .iter()
                .zip(dx)
                .map(|(gi, xi)| if xi > floor { *gi } else { 0.0 })
                .collect();
            accumulate(&mut grads[x.0], gx);
        }
        Op::ScaleGrad { x, factor } => {
            accumulate(&mut grads[x.0], g.iter().map(|gi| gi * factor).collect());
        }
        Op::MatMul { a, b } => {
            let (ta, tb) = (val(*a), val(*b));
            let (m, k, n) = (ta.shape()[0], ta.shape()[1], tb.shape()[1]);
            if needs(*a) {
                let mut ga = vec![0.0; m * k];
                gemm(
                    m,
                    n,
                    k,
                    1.0,
                    g,
                    Layout::row_major(n),
                    tb.data(),
                    Layout::transposed(n),
                    0.0,
                    &mut ga,
                    Layout::row_major(k),
                );
                accumulate(&mut grads[a.0], ga);
            }
            if needs(*b) {
                let mut gb = vec![0.0; k * n];
                gemm(
                    k,
                    m,
                    n,
                    1.0,
                    ta.data(),
                    Layout::transposed(k),
                    g,
                    Layout::row_major(n),
                    0.0,
                    &mut gb,
                    Layout::row_major(n),
                );
                accumulate(&mut grads[b.0], gb);
            }
        }
        Op::Transpose { x } => {
            let (r, c) = (val(*x).shape()[0], val(*x).shape()[1]);
            let mut gx = vec![0.0; r * c];
            for i in 0..r {
                for j in 0..c {
                    gx[i * c + j] = g[j * r + i];
                }
            }
            accumulate(&mut grads[x.0], gx);
        }
        Op::Reshape { x } => accumulate(&mut grads[x.0], g.to_vec()),
        Op::Softmax { x, axis } | Op::LogSoftmax { x, axis } => {
            let log = matches!(node.op, Op::LogSoftmax { .. });
            let (outer, n, inner) = axis_split(node.value.shape(), *axis).expect("checked");
            let mut gx = vec![0.0; out.len()];
            for o in 0..outer {
                for r in 0..inner {
                    let idx = |i: usize| (o * n + i) * inner + r;
                    if log {
                        let gsum: f64 = (0..n).map(|i| g[idx(i)]).sum();
                        for i in 0..n {
                            gx[idx(i)] = g[idx(i)] - out[idx(i)].exp() * gsum;
                        }
                    } else {
                        let dot: f64 = (0..n).map(|i| g[idx(i)] * out[idx(i)]).sum();
                        for i in 0..n {
                            gx[idx(i)] = out[idx(i)] * (g[idx(i)] - dot);
                        }
                    }
                }
            }
            accumulate(&mut grads[x.0], gx);
        }
        Op::LayerNorm {
            x,
            gain,
            bias,
            xhat,
            rstd,
        } => {
            let (rows, cols) = rows_cols(node.value.shape());
            let gd = val(*gain).data();
            if needs(*x) {
                let mut gx = vec![0.0; out.len()];
                for r in 0..rows {
                    let span = r * cols..(r + 1) * cols;
                    let (gr, hr) = (&g[span.clone()], &xhat[span]);
                    let dh: Vec<f64> = (0..cols).map(|c| gr[c] * gd[c]).collect();
                    let s1: f64 = dh.iter().sum();
                    let s2: f64 = dh.iter().zip(hr).map(|(a, b)| a * b).sum();
                    let nf = cols as f64;
                    for c in 0..cols {
                        gx[r * cols + c] = rstd[r] / nf * (nf * dh[c] - s1 - hr[c] * s2);
                    }
                }
                accumulate(&mut grads[x.0], gx);
            }
            if needs(*gain) {
                let mut gg = vec![0.0; cols];
                for r in 0..rows {
                    for c in 0..cols {
                        gg[c] += g[r * cols + c] * xhat[r * cols + c];
                    }
                }
                accumulate(&mut grads[gain.0], gg);
            }
            if needs(*bias) {
                let mut gb = vec![0.0; cols];
                for r in 0..rows {
                    for c in 0..cols {
                        gb[c] += g[r * cols + c];
                    }
                }
                accumulate(&mut grads[bias.0], gb);
            }
        }
        Op::Normalize { x, norms } => {
            let (rows, cols) = rows_cols(node.value.shape());
            let mut gx = vec![0.0; out.len()];
            for r in 0..rows {
                let span = r * cols..(r + 1) * cols;
                let dot: f64 = g[span.clone()].iter().zip(&out[span]).map(|(a, b)| a * b).sum();
                for c in 0..cols {
                    let i = r * cols + c;
                    gx[i] = (g[i] - out[i] * dot) / norms[r];
                }
            }
            accumulate(&mut grads[x.0], gx);
        }
        Op::Sum { x } => {
            accumulate(&mut grads[x.0], vec![g[0]; val(*x).len()]);
        }
        Op::Mean { x } => {
            let n = val(*x).len();
            accumulate(&mut grads[x.0], vec![g[0] / n as f64; n]);
        }
        Op::SumAxis { x, axis } => {
            let (outer, n, inner) = axis_split(val(*x).shape(), *axis).expect("checked");
            let mut gx = vec![0.0; outer * n * inner];
            for o in 0..outer {
                for i in 0..n {
                    for r in 0..inner {
                        gx[(o * n + i) * inner + r] = g[o * inner + r];
                    }
                }
            }
            accumulate(&mut grads[x.0], gx);
        }
        Op::ConcatRows { parts } => {
            let mut off = 0;
            for p in parts {
                let len = val(*p).len();
                if needs(*p) {
                    accumulate(&mut grads[p.0], g[off..off + len].to_vec());
                }
                off += len;
            }
        }
        Op::GatherRows { x, index } => {
            let t = val(*x);
            let width = numel(&t.shape()[1..]);
            let mut gx = vec![0.0; t.len()];
            for (o, &i) in index.iter().enumerate() {
                for c in 0..width {
                    gx[i * width + c] += g[o * width + c];
                }
            }
            accumulate(&mut grads[x.0], gx);
        }
        Op::Attention {
            q,
            k,
            v,
            heads,
            segments,
            probs,
        } => {
            let (tq, tk, tv) = (val(*q), val(*k), val(*v));
            let (n, d) = (tq.shape()[0], tq.shape()[1]);
            let dh = d / heads;
            let scale = 1.0 / (dh as f64).sqrt();
            let (mut gq, mut gk, mut gv) = (vec![0.0; n * d], vec![0.0; n * d], vec![0.0; n * d]);
            let mut off = 0;
            for &(s0, len) in segments {
                let mut dp = vec![0.0; len * len];
                for h in 0..*heads {
                    let base = s0 * d + h * dh;
                    let p = &probs[off..off + len * len];
                    // dV = P^T dO
                    gemm(
                        len,
                        len,
                        dh,
                        1.0,
                        p,
                        Layout::transposed(len),
                        g,
                        Layout::row_major(d).at(base),
                        0.0,
                        &mut gv,
                        Layout::row_major(d).at(base),
                    );
                    // dP = dO V^T
                    gemm(
                        len,
                        dh,
                        len,
                        1.0,
                        g,
                        Layout::row_major(d).at(base),
                        tv.data(),
                        Layout::transposed(d).at(base),
                        0.0,
                        &mut dp,
                        Layout::row_major(len),
                    );
                    // dS = P * (dP - rowsum(dP * P)), folded with the score scale
                    for i in 0..len {
                        let row = i * len..(i + 1) * len;
                        let dot: f64 = dp[row.clone()].iter().zip(&p[row.clone()]).map(|(a, b)| a * b).sum();
                        for j in row {
                            dp[j] = scale * p[j] * (dp[j] - dot);
                        }
                    }
                    gemm(
                        len,
                        len,
                        dh,
                        1.0,
                        &dp,
                        Layout::row_major(len),
                        tk.data(),
                        Layout::row_major(d).at(base),
                        0.0,
                        &mut gq,
                        Layout::row_major(d).at(base),
                    );
                    gemm(
                        len,
                        len,
                        dh,
                        1.0,
                        &dp,
                        Layout::transposed(len),
                        tq.data(),
                        Layout::row_major(d).at(base),
                        0.0,
                        &mut gk,
                        Layout::row_major(d).at(base),
                    );
                    off += len * len;
                }
            }
            if needs(*q) {
                accumulate(&mut grads[q.0], gq);
            }
            if needs(*k) {
                accumulate(&mut grads[k.0], gk);
            }
            if needs(*v) {
                accumulate(&mut grads[v.0], gv);
            }
        }
    }
}

//! Reverse-mode differentiation over a linear record of tensor operations.
//!
//! Every op appends one node whose inputs were appended earlier, so the
//! record is already in topological order. [`Tape::backward`] walks it once,
//! from the loss node down to the first node, accumulating gradients for
//! every node that (transitively) depends on a tensor requiring gradients.
//! Tensors used more than once receive the sum of all their gradient paths.

use super::kernels::{self, axis_extents, sigmoid};
use super::tensor::Tensor;
use crate::error::{Error, Result};

/// Handle to a node on a [`Tape`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Debug, Clone)]
enum Op {
    Leaf,
    MatMul(Var, Var),
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Div(Var, Var),
    Scale(Var, f64),
    AddScalar(Var),
    Silu(Var),
    Tanh(Var),
    Square(Var),
    Abs(Var),
    ClampMin(Var, f64),
    Sum(Var),
    Mean(Var),
    SumAxis(Var, usize),
    Concat(Vec<Var>, usize),
    Slice {
        x: Var,
        axis: usize,
        start: usize,
    },
    Transpose(Var),
    RmsNorm {
        x: Var,
        weight: Var,
        eps: f64,
    },
    Softmax(Var, usize),
}

#[derive(Debug)]
struct Node {
    value: Tensor,
    op: Op,
    needs_grad: bool,
}

#[derive(Debug, Default)]
pub struct Tape {
    nodes: Vec<Node>,
}

/// Gradients of one backward pass, indexed by [`Var`].
#[derive(Debug)]
pub struct Gradients {
    grads: Vec<Option<Vec<f64>>>,
}

impl Gradients {
    /// Gradient of the loss w.r.t. `v`; `None` when `v` does not need gradients
    /// or does not influence the loss.
    pub fn get(&self, v: Var) -> Option<&[f64]> {
        self.grads.get(v.0).and_then(|g| g.as_deref())
    }

    pub fn take(&mut self, v: Var) -> Option<Vec<f64>> {
        self.grads.get_mut(v.0).and_then(Option::take)
    }
}

/// Shape of an operand viewed as a matrix for broadcasting.
fn as_matrix(shape: &[usize]) -> (usize, usize) {
    match shape.len() {
        0 => (1, 1),
        1 => (1, shape[0]),
        2 => (shape[0], shape[1]),
        _ => (1, shape.iter().product()),
    }
}

fn numel(shape: &[usize]) -> usize {
    shape.iter().product()
}

/// Output shape for a binary elementwise op.
///
/// Equal shapes always combine; single-element operands broadcast against
/// anything; otherwise both must be at most rank 2 and each dimension must
/// agree or be 1.
fn broadcast_shape(a: &[usize], b: &[usize]) -> Option<Vec<usize>> {
    if a == b {
        return Some(a.to_vec());
    }
    if numel(b) == 1 {
        return Some(a.to_vec());
    }
    if numel(a) == 1 {
        return Some(b.to_vec());
    }
    if a.len() > 2 || b.len() > 2 {
        return None;
    }
    let (ar, ac) = as_matrix(a);
    let (br, bc) = as_matrix(b);
    let dim = |x: usize, y: usize| match (x, y) {
        _ if x == y => Some(x),
        (1, y) => Some(y),
        (x, 1) => Some(x),
        _ => None,
    };
    let r = dim(ar, br)?;
    let c = dim(ac, bc)?;
    if a.len() < 2 && b.len() < 2 {
        Some(vec![c])
    } else {
        Some(vec![r, c])
    }
}

/// Maps an output matrix position onto an operand's flat index.
#[derive(Clone, Copy)]
struct Broadcast {
    rows: usize,
    cols: usize,
}

impl Broadcast {
    fn new(operand: &[usize], out: &[usize]) -> Self {
        if numel(operand) == 1 {
            return Self { rows: 1, cols: 1 };
        }
        let (rows, cols) = if operand == out {
            as_matrix(out)
        } else {
            as_matrix(operand)
        };
        Self { rows, cols }
    }

    #[inline]
    fn index(self, i: usize, j: usize) -> usize {
        let r = if self.rows == 1 { 0 } else { i };
        let c = if self.cols == 1 { 0 } else { j };
        r * self.cols + c
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

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].needs_grad
    }

    /// Records a leaf. It participates in backward iff `t.requires_grad()`.
    pub fn leaf(&mut self, t: Tensor) -> Var {
        let needs_grad = t.requires_grad();
        self.push(t.detached(), Op::Leaf, needs_grad)
    }

    /// Records a leaf that never receives gradients.
    pub fn constant(&mut self, t: Tensor) -> Var {
        self.push(t.detached(), Op::Leaf, false)
    }

    fn push(&mut self, value: Tensor, op: Op, needs_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op,
            needs_grad,
        });
        Var(self.nodes.len() - 1)
    }

    fn any_grad(&self, vars: &[Var]) -> bool {
        vars.iter().any(|v| self.nodes[v.0].needs_grad)
    }

    fn data(&self, v: Var) -> &[f64] {
        self.nodes[v.0].value.data()
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (sa, sb) = (self.shape(a), self.shape(b));
        if sa.len() != 2 || sb.len() != 2 || sa[1] != sb[0] {
            return Err(Error::shape("matmul", sa, sb));
        }
        let (m, k, p) = (sa[0], sa[1], sb[1]);
        let out = kernels::matmul(self.data(a), self.data(b), m, k, p);
        let value = Tensor::new(vec![m, p], out)?;
        let ng = self.any_grad(&[a, b]);
        Ok(self.push(value, Op::MatMul(a, b), ng))
    }

    fn binary(
        &mut self,
        name: &'static str,
        a: Var,
        b: Var,
        f: impl Fn(f64, f64) -> f64,
        op: Op,
    ) -> Result<Var> {
        let (sa, sb) = (self.shape(a).to_vec(), self.shape(b).to_vec());
        let out_shape = broadcast_shape(&sa, &sb).ok_or_else(|| Error::shape(name, &sa, &sb))?;
        let (rows, cols) = as_matrix(&out_shape);
        let (ba, bb) = (Broadcast::new(&sa, &out_shape), Broadcast::new(&sb, &out_shape));
        let (da, db) = (self.data(a), self.data(b));
        let mut out = Vec::with_capacity(rows * cols);
        if sa == sb {
            out.extend(da.iter().zip(db).map(|(&x, &y)| f(x, y)));
        } else {
            for i in 0..rows {
                for j in 0..cols {
                    out.push(f(da[ba.index(i, j)], db[bb.index(i, j)]));
                }
            }
        }
        let value = Tensor::new(out_shape, out)?;
        let ng = self.any_grad(&[a, b]);
        Ok(self.push(value, op, ng))
    }

    /// Elementwise sum with row/column/scalar broadcasting.
    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary("add", a, b, |x, y| x + y, Op::Add(a, b))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary("sub", a, b, |x, y| x - y, Op::Sub(a, b))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary("mul", a, b, |x, y| x * y, Op::Mul(a, b))
    }

    pub fn div(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary("div", a, b, |x, y| x / y, Op::Div(a, b))
    }

    fn unary(&mut self, x: Var, f: impl Fn(f64) -> f64, op: Op) -> Var {
        let src = &self.nodes[x.0].value;
        let data = src.data().iter().map(|&v| f(v)).collect();
        let value = Tensor::new(src.shape().to_vec(), data).expect("same shape");
        let ng = self.nodes[x.0].needs_grad;
        self.push(value, op, ng)
    }

    pub fn scale(&mut self, x: Var, s: f64) -> Var {
        self.unary(x, |v| v * s, Op::Scale(x, s))
    }

    pub fn add_scalar(&mut self, x: Var, s: f64) -> Var {
        self.unary(x, |v| v + s, Op::AddScalar(x))
    }

    pub fn silu(&mut self, x: Var) -> Var {
        self.unary(x, |v| v * sigmoid(v), Op::Silu(x))
    }

    pub fn tanh(&mut self, x: Var) -> Var {
        self.unary(x, f64::tanh, Op::Tanh(x))
    }

    pub fn square(&mut self, x: Var) -> Var {
        self.unary(x, |v| v * v, Op::Square(x))
    }

    pub fn abs(&mut self, x: Var) -> Var {
        self.unary(x, f64::abs, Op::Abs(x))
    }

    /// `max(x, floor)` elementwise; gradient passes only where `x > floor`.
    pub fn clamp_min(&mut self, x: Var, floor: f64) -> Var {
        self.unary(x, |v| v.max(floor), Op::ClampMin(x, floor))
    }

    pub fn sum(&mut self, x: Var) -> Var {
        let s = self.data(x).iter().sum();
        let ng = self.nodes[x.0].needs_grad;
        self.push(Tensor::scalar(s), Op::Sum(x), ng)
    }

    pub fn mean(&mut self, x: Var) -> Var {
        let d = self.data(x);
        let s = d.iter().sum::<f64>() / d.len() as f64;
        let ng = self.nodes[x.0].needs_grad;
        self.push(Tensor::scalar(s), Op::Mean(x), ng)
    }

    /// Sums along `axis`, keeping it as a dimension of length 1.
    pub fn sum_axis(&mut self, x: Var, axis: usize) -> Result<Var> {
        let shape = self.shape(x).to_vec();
        if axis >= shape.len() {
            return Err(Error::Contract(format!("sum_axis: axis {axis} for {shape:?}")));
        }
        let (outer, n, inner) = axis_extents(&shape, axis);
        let d = self.data(x);
        let mut out = vec![0.0; outer * inner];
        for o in 0..outer {
            for k in 0..n {
                for i in 0..inner {
                    out[o * inner + i] += d[(o * n + k) * inner + i];
                }
            }
        }
        let mut out_shape = shape;
        out_shape[axis] = 1;
        let ng = self.nodes[x.0].needs_grad;
        Ok(self.push(Tensor::new(out_shape, out)?, Op::SumAxis(x, axis), ng))
    }

    pub fn concat(&mut self, parts: &[Var], axis: usize) -> Result<Var> {
        let first = parts
            .first()
            .ok_or_else(|| Error::Contract("concat of nothing".into()))?;
        let base = self.shape(*first).to_vec();
        if axis >= base.len() {
            return Err(Error::Contract(format!("concat: axis {axis} for {base:?}")));
        }
        let mut total = 0;
        for p in parts {
            let s = self.shape(*p);
            let compatible = s.len() == base.len()
                && s.iter()
                    .zip(&base)
                    .enumerate()
                    .all(|(d, (x, y))| d == axis || x == y);
            if !compatible {
                return Err(Error::shape("concat", &base, s));
            }
            total += s[axis];
        }
        let mut out_shape = base.clone();
        out_shape[axis] = total;
        let (outer, _, inner) = axis_extents(&out_shape, axis);
        let mut out = Vec::with_capacity(numel(&out_shape));
        for o in 0..outer {
            for p in parts {
                let n = self.shape(*p)[axis];
                let d = self.data(*p);
                out.extend_from_slice(&d[o * n * inner..(o + 1) * n * inner]);
            }
        }
        let ng = self.any_grad(parts);
        Ok(self.push(Tensor::new(out_shape, out)?, Op::Concat(parts.to_vec(), axis), ng))
    }

    /// Copies the index range `[start, end)` along `axis`.
    pub fn slice(&mut self, x: Var, axis: usize, start: usize, end: usize) -> Result<Var> {
        let shape = self.shape(x).to_vec();
        if axis >= shape.len() || start > end || end > shape[axis] {
            return Err(Error::Contract(format!(
                "slice [{start},{end}) on axis {axis} of {shape:?}"
            )));
        }
        let (outer, n, inner) = axis_extents(&shape, axis);
        let d = self.data(x);
        let mut out = Vec::with_capacity(outer * (end - start) * inner);
        for o in 0..outer {
            out.extend_from_slice(&d[(o * n + start) * inner..(o * n + end) * inner]);
        }
        let mut out_shape = shape;
        out_shape[axis] = end - start;
        let ng = self.nodes[x.0].needs_grad;
        Ok(self.push(Tensor::new(out_shape, out)?, Op::Slice { x, axis, start }, ng))
    }

    pub fn transpose(&mut self, x: Var) -> Result<Var> {
        let shape = self.shape(x).to_vec();
        if shape.len() != 2 {
            return Err(Error::Contract(format!("transpose of rank-{} tensor", shape.len())));
        }
        let out = kernels::transpose(self.data(x), shape[0], shape[1]);
        let ng = self.nodes[x.0].needs_grad;
        Ok(self.push(Tensor::new(vec![shape[1], shape[0]], out)?, Op::Transpose(x), ng))
    }

    /// Root-mean-square normalization over the last axis, scaled by `weight`.
    pub fn rmsnorm(&mut self, x: Var, weight: Var, eps: f64) -> Result<Var> {
        let shape = self.shape(x).to_vec();
        let n = *shape.last().ok_or_else(|| Error::Contract("rmsnorm of scalar".into()))?;
        if self.value(weight).len() != n {
            return Err(Error::shape("rmsnorm", &shape, self.shape(weight)));
        }
        let (d, w) = (self.data(x), self.data(weight));
        let mut out = Vec::with_capacity(d.len());
        for row in d.chunks(n) {
            let ms = row.iter().map(|v| v * v).sum::<f64>() / n as f64;
            let inv = 1.0 / (ms + eps).sqrt();
            out.extend(row.iter().zip(w).map(|(v, wv)| v * inv * wv));
        }
        let ng = self.any_grad(&[x, weight]);
        Ok(self.push(Tensor::new(shape, out)?, Op::RmsNorm { x, weight, eps }, ng))
    }

    /// Softmax along `axis`, shifted by the running max for stability.
    pub fn softmax(&mut self, x: Var, axis: usize) -> Result<Var> {
        let shape = self.shape(x).to_vec();
        if axis >= shape.len() {
            return Err(Error::Contract(format!("softmax: axis {axis} for {shape:?}")));
        }
        let out = softmax_along(self.data(x), &shape, axis);
        let ng = self.nodes[x.0].needs_grad;
        Ok(self.push(Tensor::new(shape, out)?, Op::Softmax(x, axis), ng))
    }

    /// Backpropagates from a single-element `loss`.
    pub fn backward(&self, loss: Var) -> Result<Gradients> {
        let lv = &self.nodes[loss.0].value;
        if lv.len() != 1 {
            return Err(Error::Contract(format!(
                "backward needs a scalar loss, got shape {:?}",
                lv.shape()
            )));
        }
        let mut grads: Vec<Option<Vec<f64>>> = vec![None; loss.0 + 1];
        grads[loss.0] = Some(vec![1.0]);
        for idx in (0..=loss.0).rev() {
            let node = &self.nodes[idx];
            if !node.needs_grad {
                continue;
            }
            let Some(g) = grads[idx].take() else { continue };
            self.propagate(node, &g, &mut grads);
            grads[idx] = Some(g);
        }
        Ok(Gradients { grads })
    }

    fn propagate(&self, node: &Node, g: &[f64], grads: &mut [Option<Vec<f64>>]) {
        let out = &node.value;
        match &node.op {
            Op::Leaf => {}
            Op::MatMul(a, b) => {
                let (sa, sb) = (self.shape(*a), self.shape(*b));
                let (m, k, p) = (sa[0], sa[1], sb[1]);
                if self.requires_grad(*a) {
                    let acc = slot(grads, *a, m * k);
                    kernels::matmul_nt_acc(acc, g, self.data(*b), m, k, p);
                }
                if self.requires_grad(*b) {
                    let acc = slot(grads, *b, k * p);
                    kernels::matmul_tn_acc(acc, self.data(*a), g, m, k, p);
                }
            }
            Op::Add(a, b) => {
                self.binary_grads(grads, *a, *b, out.shape(), g, |_, _, gv| gv, |_, _, gv| gv)
            }
            Op::Sub(a, b) => {
                self.binary_grads(grads, *a, *b, out.shape(), g, |_, _, gv| gv, |_, _, gv| -gv)
            }
            Op::Mul(a, b) => self.binary_grads(
                grads,
                *a,
                *b,
                out.shape(),
                g,
                |_, y, gv| gv * y,
                |x, _, gv| gv * x,
            ),
            Op::Div(a, b) => self.binary_grads(
                grads,
                *a,
                *b,
                out.shape(),
                g,
                |_, y, gv| gv / y,
                |x, y, gv| -gv * x / (y * y),
            ),
            Op::Scale(x, s) => self.elementwise(grads, *x, g, |_, _, gv| gv * s, out),
            Op::AddScalar(x) => self.elementwise(grads, *x, g, |_, _, gv| gv, out),
            Op::Silu(x) => self.elementwise(
                grads,
                *x,
                g,
                |xv, _, gv| {
                    let s = sigmoid(xv);
                    gv * s * (1.0 + xv * (1.0 - s))
                },
                out,
            ),
            Op::Tanh(x) => self.elementwise(grads, *x, g, |_, y, gv| gv * (1.0 - y * y), out),
            Op::Square(x) => self.elementwise(grads, *x, g, |xv, _, gv| 2.0 * xv * gv, out),
            Op::Abs(x) => self.elementwise(
                grads,
                *x,
                g,
                |xv, _, gv| {
                    if xv > 0.0 {
                        gv
                    } else if xv < 0.0 {
                        -gv
                    } else {
                        0.0
                    }
                },
                out,
            ),
            Op::ClampMin(x, floor) => self.elementwise(
                grads,
                *x,
                g,
                |xv, _, gv| if xv > *floor { gv } else { 0.0 },
                out,
            ),
            Op::Sum(x) | Op::Mean(x) => {
                if self.requires_grad(*x) {
                    let n = self.value(*x).len();
                    let scale = if matches!(node.op, Op::Mean(_)) {
                        1.0 / n as f64
                    } else {
                        1.0
                    };
                    let acc = slot(grads, *x, n);
                    for a in acc.iter_mut() {
                        *a += g[0] * scale;
                    }
                }
            }
            Op::SumAxis(x, axis) => {
                if self.requires_grad(*x) {
                    let shape = self.shape(*x);
                    let (outer, n, inner) = axis_extents(shape, *axis);
                    let acc = slot(grads, *x, outer * n * inner);
                    for o in 0..outer {
                        for k in 0..n {
                            for i in 0..inner {
                                acc[(o * n + k) * inner + i] += g[o * inner + i];
                            }
                        }
                    }
                }
            }
            Op::Concat(parts, axis) => {
                let (outer, total, inner) = axis_extents(out.shape(), *axis);
                let mut offset = 0;
                for p in parts {
                    let n = self.shape(*p)[*axis];
                    if self.requires_grad(*p) {
                        let acc = slot(grads, *p, outer * n * inner);
                        for o in 0..outer {
                            let src = &g[(o * total + offset) * inner..(o * total + offset + n) * inner];
                            for (a, v) in acc[o * n * inner..(o + 1) * n * inner].iter_mut().zip(src) {
                                *a += v;
                            }
                        }
                    }
                    offset += n;
                }
            }
            Op::Slice { x, axis, start } => {
                if self.requires_grad(*x) {
                    let shape = self.shape(*x);
                    let (outer, n, inner) = axis_extents(shape, *axis);
                    let len = out.shape()[*axis];
                    let acc = slot(grads, *x, outer * n * inner);
                    for o in 0..outer {
                        let dst = &mut acc[(o * n + start) * inner..(o * n + start + len) * inner];
                        for (a, v) in dst.iter_mut().zip(&g[o * len * inner..(o + 1) * len * inner]) {
                            *a += v;
                        }
                    }
                }
            }
            Op::Transpose(x) => {
                if self.requires_grad(*x) {
                    let s = out.shape();
                    let gt = kernels::transpose(g, s[0], s[1]);
                    let acc = slot(grads, *x, gt.len());
                    for (a, v) in acc.iter_mut().zip(&gt) {
                        *a += v;
                    }
                }
            }
            Op::RmsNorm { x, weight, eps } => {
                let xd = self.data(*x);
                let w = self.data(*weight);
                let n = w.len();
                let rows = xd.len() / n;
                let mut gx = vec![0.0; xd.len()];
                let mut gw = vec![0.0; n];
                for r in 0..rows {
                    let xr = &xd[r * n..(r + 1) * n];
                    let gr = &g[r * n..(r + 1) * n];
                    let ms = xr.iter().map(|v| v * v).sum::<f64>() / n as f64;
                    let inv = 1.0 / (ms + eps).sqrt();
                    let mut dot = 0.0;
                    for j in 0..n {
                        let xhat = xr[j] * inv;
                        gw[j] += gr[j] * xhat;
                        dot += gr[j] * w[j] * xhat;
                    }
                    let mean_dot = dot / n as f64;
                    for j in 0..n {
                        let xhat = xr[j] * inv;
                        gx[r * n + j] = inv * (gr[j] * w[j] - xhat * mean_dot);
                    }
                }
                if self.requires_grad(*x) {
                    add_into(slot(grads, *x, gx.len()), &gx);
                }
                if self.requires_grad(*weight) {
                    add_into(slot(grads, *weight, n), &gw);
                }
            }
            Op::Softmax(x, axis) => {
                if self.requires_grad(*x) {
                    let (outer, n, inner) = axis_extents(out.shape(), *axis);
                    let y = out.data();
                    let acc = slot(grads, *x, y.len());
                    for o in 0..outer {
                        for i in 0..inner {
                            let at = |k: usize| (o * n + k) * inner + i;
                            let dot: f64 = (0..n).map(|k| g[at(k)] * y[at(k)]).sum();
                            for k in 0..n {
                                acc[at(k)] += y[at(k)] * (g[at(k)] - dot);
                            }
                        }
                    }
                }
            }
        }
    }

    /// Same-shape unary rule: `f(input, output, upstream)`.
    fn elementwise(
        &self,
        grads: &mut [Option<Vec<f64>>],
        x: Var,
        g: &[f64],
        f: impl Fn(f64, f64, f64) -> f64,
        out: &Tensor,
    ) {
        if !self.requires_grad(x) {
            return;
        }
        let xd = self.data(x);
        let acc = slot(grads, x, xd.len());
        for (((a, &xv), &yv), &gv) in acc.iter_mut().zip(xd).zip(out.data()).zip(g) {
            *a += f(xv, yv, gv);
        }
    }

    /// Gradients of a broadcasting binary op. `da`/`db` map
    /// `(lhs, rhs, upstream)` to each operand's local contribution, which is
    /// summed over broadcast positions.
    #[allow(clippy::too_many_arguments)]
    fn binary_grads(
        &self,
        grads: &mut [Option<Vec<f64>>],
        a: Var,
        b: Var,
        out_shape: &[usize],
        g: &[f64],
        da: impl Fn(f64, f64, f64) -> f64,
        db: impl Fn(f64, f64, f64) -> f64,
    ) {
        let (rows, cols) = as_matrix(out_shape);
        let ba = Broadcast::new(self.shape(a), out_shape);
        let bb = Broadcast::new(self.shape(b), out_shape);
        let (ad, bd) = (self.data(a), self.data(b));
        for (target, bt, rule) in [(a, ba, &da as &dyn Fn(f64, f64, f64) -> f64), (b, bb, &db)] {
            if !self.requires_grad(target) {
                continue;
            }
            let acc = slot(grads, target, self.value(target).len());
            for i in 0..rows {
                for j in 0..cols {
                    let gv = g[i * cols + j];
                    acc[bt.index(i, j)] += rule(ad[ba.index(i, j)], bd[bb.index(i, j)], gv);
                }
            }
        }
    }
}

fn slot<'a>(grads: &'a mut [Option<Vec<f64>>], v: Var, len: usize) -> &'a mut Vec<f64> {
    grads[v.0].get_or_insert_with(|| vec![0.0; len])
}

fn add_into(acc: &mut [f64], g: &[f64]) {
    for (a, v) in acc.iter_mut().zip(g) {
        *a += v;
    }
}

pub(crate) fn softmax_along(data: &[f64], shape: &[usize], axis: usize) -> Vec<f64> {
    let (outer, n, inner) = axis_extents(shape, axis);
    let mut out = vec![0.0; data.len()];
    for o in 0..outer {
        for i in 0..inner {
            let at = |k: usize| (o * n + k) * inner + i;
            let max = (0..n).map(|k| data[at(k)]).fold(f64::NEG_INFINITY, f64::max);
            let mut total = 0.0;
            for k in 0..n {
                let e = (data[at(k)] - max).exp();
                out[at(k)] = e;
                total += e;
            }
            for k in 0..n {
                out[at(k)] /= total;
            }
        }
    }
    out
}

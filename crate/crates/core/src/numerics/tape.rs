//! Reverse-mode differentiation over a linear tape.
//!
//! Every forward op appends a node holding its value and the ids of its
//! inputs. `Tape::backward` walks the nodes in reverse creation order, which
//! is a valid topological order because inputs always precede consumers.

use std::f64::consts::{FRAC_1_SQRT_2, PI};

use super::tensor::{axis_split, gemm, Tensor};
use crate::error::{shape_err, Error, Result};

/// Handle to a node on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Clone, Debug)]
enum Op {
    Leaf,
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Scale(Var, f64),
    Offset(Var),
    AddSuffix(Var, Var),
    Expand(Var, usize),
    MatMul { a: Var, b: Var, ta: bool, tb: bool },
    Reshape(Var),
    Gelu(Var),
    Relu(Var),
    Sqrt(Var),
    RmsNorm { x: Var, eps: f64 },
    Softmax { x: Var, axis: usize },
    LogSoftmax { x: Var, axis: usize },
    Mean { x: Var, axis: usize },
    Sum(Var),
    Concat { parts: Vec<Var>, axis: usize },
    Slice { x: Var, axis: usize, start: usize },
    Select { x: Var, indices: Vec<usize> },
    Gather { x: Var, indices: Vec<usize> },
}

#[derive(Debug)]
struct Node {
    value: Tensor,
    op: Op,
    requires_grad: bool,
}

/// Records a computation for later differentiation.
#[derive(Debug, Default)]
pub struct Tape {
    nodes: Vec<Node>,
}

/// Gradients of a scalar with respect to every node that required them.
#[derive(Debug)]
pub struct Grads {
    grads: Vec<Option<Tensor>>,
}

impl Grads {
    pub fn get(&self, v: Var) -> Option<&Tensor> {
        self.grads.get(v.0).and_then(|g| g.as_ref())
    }

    pub fn take(&mut self, v: Var) -> Option<Tensor> {
        self.grads.get_mut(v.0).and_then(|g| g.take())
    }
}

pub(crate) fn gelu(x: f64) -> f64 {
    0.5 * x * (1.0 + libm::erf(x * FRAC_1_SQRT_2))
}

fn gelu_grad(x: f64) -> f64 {
    let cdf = 0.5 * (1.0 + libm::erf(x * FRAC_1_SQRT_2));
    let pdf = (-0.5 * x * x).exp() / (2.0 * PI).sqrt();
    cdf + x * pdf
}

fn same_shape(a: &Tensor, b: &Tensor, what: &str) -> Result<()> {
    if a.shape() != b.shape() {
        return Err(shape_err!("{what}: shapes {:?} and {:?} differ", a.shape(), b.shape()));
    }
    Ok(())
}

fn zip_map(a: &Tensor, b: &Tensor, f: impl Fn(f64, f64) -> f64) -> Tensor {
    let data: Vec<f64> = a.data().iter().zip(b.data()).map(|(&x, &y)| f(x, y)).collect();
    Tensor::new(a.shape().to_vec(), data).expect("shape preserved")
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

    fn push(&mut self, value: Tensor, op: Op, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    fn rg(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    /// A differentiable leaf (parameter or probe point).
    pub fn leaf(&mut self, t: Tensor) -> Var {
        self.push(t, Op::Leaf, true)
    }

    /// A constant input; no gradient flows into it.
    pub fn constant(&mut self, t: Tensor) -> Var {
        self.push(t, Op::Leaf, false)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        same_shape(self.value(a), self.value(b), "add")?;
        let v = zip_map(self.value(a), self.value(b), |x, y| x + y);
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(v, Op::Add(a, b), rg))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        same_shape(self.value(a), self.value(b), "sub")?;
        let v = zip_map(self.value(a), self.value(b), |x, y| x - y);
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(v, Op::Sub(a, b), rg))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        same_shape(self.value(a), self.value(b), "mul")?;
        let v = zip_map(self.value(a), self.value(b), |x, y| x * y);
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(v, Op::Mul(a, b), rg))
    }

    pub fn scale(&mut self, a: Var, c: f64) -> Var {
        let v = self.value(a).map(|x| x * c);
        let rg = self.rg(a);
        self.push(v, Op::Scale(a, c), rg)
    }

    /// `a + c` elementwise for a constant `c`.
    pub fn offset(&mut self, a: Var, c: f64) -> Var {
        let v = self.value(a).map(|x| x + c);
        let rg = self.rg(a);
        self.push(v, Op::Offset(a), rg)
    }

    /// `a + b` where `b`'s shape is a trailing suffix of `a`'s shape.
    pub fn add_suffix(&mut self, a: Var, b: Var) -> Result<Var> {
        let (sa, sb) = (self.shape(a), self.shape(b));
        if sb.len() > sa.len() || sa[sa.len() - sb.len()..] != *sb {
            return Err(shape_err!("cannot broadcast {sb:?} onto {sa:?}"));
        }
        let inner = self.value(b).numel();
        let bd = self.value(b).data().to_vec();
        let mut v = self.value(a).clone();
        for (i, x) in v.data_mut().iter_mut().enumerate() {
            *x += bd[i % inner];
        }
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(v, Op::AddSuffix(a, b), rg))
    }

    /// Repeat `a` along a new leading axis of extent `reps`.
    pub fn expand(&mut self, a: Var, reps: usize) -> Result<Var> {
        if reps == 0 {
            return Err(shape_err!("expand needs a positive repeat count"));
        }
        let src = self.value(a);
        let mut shape = vec![reps];
        shape.extend_from_slice(src.shape());
        let data = src.data().repeat(reps);
        let v = Tensor::new(shape, data)?;
        let rg = self.rg(a);
        Ok(self.push(v, Op::Expand(a, reps), rg))
    }

    /// Batched `op(a) · op(b)` on rank-3 operands.
    pub fn bmm(&mut self, a: Var, ta: bool, b: Var, tb: bool) -> Result<Var> {
        let v = gemm(self.value(a), ta, self.value(b), tb)?;
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(v, Op::MatMul { a, b, ta, tb }, rg))
    }

    /// Plain 2-D matrix product.
    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (sa, sb) = (self.shape(a).to_vec(), self.shape(b).to_vec());
        if sa.len() != 2 || sb.len() != 2 {
            return Err(shape_err!("matmul needs rank-2 operands, got {sa:?} and {sb:?}"));
        }
        let a3 = self.reshape(a, &[1, sa[0], sa[1]])?;
        let b3 = self.reshape(b, &[1, sb[0], sb[1]])?;
        let c = self.bmm(a3, false, b3, false)?;
        self.reshape(c, &[sa[0], sb[1]])
    }

    /// Affine map over the last axis: `x · w + bias` with `w: [in, out]`.
    pub fn linear(&mut self, x: Var, w: Var, bias: Var) -> Result<Var> {
        let y = self.linear_nobias(x, w)?;
        self.add_suffix(y, bias)
    }

    /// `x · w` over the last axis.
    pub fn linear_nobias(&mut self, x: Var, w: Var) -> Result<Var> {
        let sx = self.shape(x).to_vec();
        let sw = self.shape(w).to_vec();
        let fan_in = *sx.last().ok_or_else(|| shape_err!("linear on scalar"))?;
        if sw.len() != 2 || sw[0] != fan_in {
            return Err(shape_err!("linear: input {sx:?} incompatible with weight {sw:?}"));
        }
        let rows = self.value(x).numel() / fan_in;
        let x3 = self.reshape(x, &[1, rows, fan_in])?;
        let w3 = self.reshape(w, &[1, sw[0], sw[1]])?;
        let y = self.bmm(x3, false, w3, false)?;
        let mut out_shape = sx;
        *out_shape.last_mut().unwrap() = sw[1];
        self.reshape(y, &out_shape)
    }

    pub fn reshape(&mut self, a: Var, shape: &[usize]) -> Result<Var> {
        let v = self.value(a).reshape(shape)?;
        let rg = self.rg(a);
        Ok(self.push(v, Op::Reshape(a), rg))
    }

    pub fn gelu(&mut self, a: Var) -> Var {
        let v = self.value(a).map(gelu);
        let rg = self.rg(a);
        self.push(v, Op::Gelu(a), rg)
    }

    pub fn relu(&mut self, a: Var) -> Var {
        let v = self.value(a).map(|x| x.max(0.0));
        let rg = self.rg(a);
        self.push(v, Op::Relu(a), rg)
    }

    /// Square root; the backward pass uses a zero subgradient at 0.
    pub fn sqrt(&mut self, a: Var) -> Result<Var> {
        if self.value(a).data().iter().any(|&x| x < 0.0) {
            return Err(Error::Invariant("sqrt of a negative value".into()));
        }
        let v = self.value(a).map(f64::sqrt);
        let rg = self.rg(a);
        Ok(self.push(v, Op::Sqrt(a), rg))
    }

    /// `x / sqrt(mean(x²) + eps)` over the last axis.
    pub fn rms_norm(&mut self, x: Var, eps: f64) -> Result<Var> {
        let xv = self.value(x);
        let n = *xv.shape().last().ok_or_else(|| shape_err!("rms_norm of a scalar"))?;
        let mut out = xv.data().to_vec();
        for row in out.chunks_mut(n) {
            let r = (row.iter().map(|a| a * a).sum::<f64>() / n as f64 + eps).sqrt();
            row.iter_mut().for_each(|a| *a /= r);
        }
        let v = Tensor::new(xv.shape().to_vec(), out)?;
        let rg = self.rg(x);
        Ok(self.push(v, Op::RmsNorm { x, eps }, rg))
    }

    pub fn softmax(&mut self, x: Var, axis: usize) -> Result<Var> {
        let v = super::tensor::softmax_axis(self.value(x), axis)?;
        let rg = self.rg(x);
        Ok(self.push(v, Op::Softmax { x, axis }, rg))
    }

    pub fn log_softmax(&mut self, x: Var, axis: usize) -> Result<Var> {
        let src = self.value(x);
        if axis >= src.rank() {
            return Err(shape_err!("log_softmax axis {axis} out of range for {:?}", src.shape()));
        }
        // log-sum-exp form keeps large negative logits finite
        let (outer, n, inner) = axis_split(src.shape(), axis);
        let mut out = vec![0.0; src.numel()];
        for o in 0..outer {
            for i in 0..inner {
                let base = o * n * inner + i;
                let max = (0..n)
                    .map(|a| src.data()[base + a * inner])
                    .fold(f64::NEG_INFINITY, f64::max);
                let lse = max
                    + (0..n)
                        .map(|a| (src.data()[base + a * inner] - max).exp())
                        .sum::<f64>()
                        .ln();
                for a in 0..n {
                    out[base + a * inner] = src.data()[base + a * inner] - lse;
                }
            }
        }
        let v = Tensor::new(src.shape().to_vec(), out)?;
        let rg = self.rg(x);
        Ok(self.push(v, Op::LogSoftmax { x, axis }, rg))
    }

    /// Mean over `axis`, removing it. Reducing a rank-1 tensor yields shape `[1]`.
    pub fn mean(&mut self, x: Var, axis: usize) -> Result<Var> {
        let src = self.value(x);
        if axis >= src.rank() {
            return Err(shape_err!("mean axis {axis} out of range for {:?}", src.shape()));
        }
        let (outer, n, inner) = axis_split(src.shape(), axis);
        let mut out = vec![0.0; outer * inner];
        for o in 0..outer {
            for a in 0..n {
                let row = &src.data()[(o * n + a) * inner..(o * n + a + 1) * inner];
                for (dst, &s) in out[o * inner..(o + 1) * inner].iter_mut().zip(row) {
                    *dst += s;
                }
            }
        }
        let inv = 1.0 / n as f64;
        out.iter_mut().for_each(|v| *v *= inv);
        let mut shape: Vec<usize> = src.shape().to_vec();
        shape.remove(axis);
        if shape.is_empty() {
            shape.push(1);
        }
        let v = Tensor::new(shape, out)?;
        let rg = self.rg(x);
        Ok(self.push(v, Op::Mean { x, axis }, rg))
    }

    /// Sum of all elements, shape `[1]`.
    pub fn sum(&mut self, x: Var) -> Var {
        let s: f64 = self.value(x).data().iter().sum();
        let rg = self.rg(x);
        self.push(Tensor::scalar(s), Op::Sum(x), rg)
    }

    pub fn concat(&mut self, parts: &[Var], axis: usize) -> Result<Var> {
        let first = parts.first().ok_or_else(|| shape_err!("concat of zero tensors"))?;
        let base = self.shape(*first).to_vec();
        if axis >= base.len() {
            return Err(shape_err!("concat axis {axis} out of range for {base:?}"));
        }
        let mut total = 0;
        for &p in parts {
            let s = self.shape(p);
            if s.len() != base.len() || s.iter().zip(&base).enumerate().any(|(i, (x, y))| i != axis && x != y) {
                return Err(shape_err!("concat: {s:?} incompatible with {base:?}"));
            }
            total += s[axis];
        }
        let (outer, _, inner) = axis_split(&base, axis);
        let mut out = Vec::with_capacity(outer * total * inner);
        for o in 0..outer {
            for &p in parts {
                let t = self.value(p);
                let n = t.shape()[axis];
                out.extend_from_slice(&t.data()[o * n * inner..(o + 1) * n * inner]);
            }
        }
        let mut shape = base;
        shape[axis] = total;
        let v = Tensor::new(shape, out)?;
        let rg = parts.iter().any(|&p| self.rg(p));
        Ok(self.push(
            v,
            Op::Concat {
                parts: parts.to_vec(),
                axis,
            },
            rg,
        ))
    }

    pub fn slice(&mut self, x: Var, axis: usize, start: usize, len: usize) -> Result<Var> {
        let src = self.value(x);
        if axis >= src.rank() || len == 0 || start + len > src.shape()[axis] {
            return Err(shape_err!(
                "slice [{start}, {}) on axis {axis} out of range for {:?}",
                start + len,
                src.shape()
            ));
        }
        let (outer, n, inner) = axis_split(src.shape(), axis);
        let mut out = Vec::with_capacity(outer * len * inner);
        for o in 0..outer {
            let from = (o * n + start) * inner;
            out.extend_from_slice(&src.data()[from..from + len * inner]);
        }
        let mut shape = src.shape().to_vec();
        shape[axis] = len;
        let v = Tensor::new(shape, out)?;
        let rg = self.rg(x);
        Ok(self.push(v, Op::Slice { x, axis, start }, rg))
    }

    /// Rows of `x` (axis 0) picked by `indices`, repeats allowed.
    pub fn select(&mut self, x: Var, indices: &[usize]) -> Result<Var> {
        let src = self.value(x);
        let rows = src.shape()[0];
        if indices.is_empty() || indices.iter().any(|&i| i >= rows) {
            return Err(shape_err!("select indices {indices:?} invalid for {rows} rows"));
        }
        let inner = src.numel() / rows;
        let mut out = Vec::with_capacity(indices.len() * inner);
        for &i in indices {
            out.extend_from_slice(&src.data()[i * inner..(i + 1) * inner]);
        }
        let mut shape = src.shape().to_vec();
        shape[0] = indices.len();
        let v = Tensor::new(shape, out)?;
        let rg = self.rg(x);
        Ok(self.push(
            v,
            Op::Select {
                x,
                indices: indices.to_vec(),
            },
            rg,
        ))
    }

    /// `out[b] = x[b, indices[b]]` for `x: [B, N]`.
    pub fn gather(&mut self, x: Var, indices: &[usize]) -> Result<Var> {
        let src = self.value(x);
        if src.rank() != 2 || src.shape()[0] != indices.len() {
            return Err(shape_err!(
                "gather: {:?} needs one index per row, got {}",
                src.shape(),
                indices.len()
            ));
        }
        let n = src.shape()[1];
        if let Some(&bad) = indices.iter().find(|&&i| i >= n) {
            return Err(Error::Label { label: bad, classes: n });
        }
        let out: Vec<f64> = indices
            .iter()
            .enumerate()
            .map(|(b, &i)| src.data()[b * n + i])
            .collect();
        let v = Tensor::vector(out);
        let rg = self.rg(x);
        Ok(self.push(
            v,
            Op::Gather {
                x,
                indices: indices.to_vec(),
            },
            rg,
        ))
    }

    /// Gradients of the one-element node `loss` with respect to every
    /// differentiable node.
    pub fn backward(&self, loss: Var) -> Result<Grads> {
        if self.value(loss).numel() != 1 {
            return Err(shape_err!("backward needs a scalar, got {:?}", self.shape(loss)));
        }
        let mut grads: Vec<Option<Tensor>> = vec![None; self.nodes.len()];
        grads[loss.0] = Some(Tensor::full(self.shape(loss), 1.0));

        for idx in (0..=loss.0).rev() {
            let node = &self.nodes[idx];
            if !node.requires_grad {
                continue;
            }
            let Some(g) = grads[idx].take() else {
                continue;
            };
            self.propagate(node, &g, &mut grads)?;
            grads[idx] = Some(g);
        }
        Ok(Grads { grads })
    }

    fn accumulate(&self, grads: &mut [Option<Tensor>], v: Var, g: Tensor) {
        if !self.rg(v) {
            return;
        }
        match &mut grads[v.0] {
            Some(existing) => existing.add_assign(&g),
            slot @ None => *slot = Some(g),
        }
    }

    fn propagate(&self, node: &Node, g: &Tensor, grads: &mut [Option<Tensor>]) -> Result<()> {
        match &node.op {
            Op::Leaf => {}
            Op::Add(a, b) => {
                self.accumulate(grads, *a, g.clone());
                self.accumulate(grads, *b, g.clone());
            }
            Op::Sub(a, b) => {
                self.accumulate(grads, *a, g.clone());
                self.accumulate(grads, *b, g.map(|x| -x));
            }
            Op::Mul(a, b) => {
                if self.rg(*a) {
                    self.accumulate(grads, *a, zip_map(g, self.value(*b), |x, y| x * y));
                }
                if self.rg(*b) {
                    self.accumulate(grads, *b, zip_map(g, self.value(*a), |x, y| x * y));
                }
            }
            Op::Scale(a, c) => {
                let c = *c;
                self.accumulate(grads, *a, g.map(|x| x * c));
            }
            Op::Offset(a) => self.accumulate(grads, *a, g.clone()),
            Op::AddSuffix(a, b) => {
                self.accumulate(grads, *a, g.clone());
                if self.rg(*b) {
                    let inner = self.value(*b).numel();
                    let mut gb = vec![0.0; inner];
                    for (i, &x) in g.data().iter().enumerate() {
                        gb[i % inner] += x;
                    }
                    let gb = Tensor::new(self.shape(*b).to_vec(), gb)?;
                    self.accumulate(grads, *b, gb);
                }
            }
            Op::Expand(a, reps) => {
                let inner = self.value(*a).numel();
                let mut ga = vec![0.0; inner];
                for r in 0..*reps {
                    for (dst, &x) in ga.iter_mut().zip(&g.data()[r * inner..(r + 1) * inner]) {
                        *dst += x;
                    }
                }
                let ga = Tensor::new(self.shape(*a).to_vec(), ga)?;
                self.accumulate(grads, *a, ga);
            }
            Op::MatMul { a, b, ta, tb } => {
                let (av, bv) = (self.value(*a), self.value(*b));
                if self.rg(*a) {
                    let ga = match (ta, tb) {
                        (false, false) => gemm(g, false, bv, true)?,
                        (false, true) => gemm(g, false, bv, false)?,
                        (true, false) => gemm(bv, false, g, true)?,
                        (true, true) => gemm(bv, true, g, true)?,
                    };
                    self.accumulate(grads, *a, ga);
                }
                if self.rg(*b) {
                    let gb = match (ta, tb) {
                        (false, false) => gemm(av, true, g, false)?,
                        (false, true) => gemm(g, true, av, false)?,
                        (true, false) => gemm(av, false, g, false)?,
                        (true, true) => gemm(g, true, av, true)?,
                    };
                    self.accumulate(grads, *b, gb);
                }
            }
            Op::Reshape(a) => {
                let ga = g.reshape(self.shape(*a))?;
                self.accumulate(grads, *a, ga);
            }
            Op::Gelu(a) => {
                let ga = zip_map(g, self.value(*a), |gy, x| gy * gelu_grad(x));
                self.accumulate(grads, *a, ga);
            }
            Op::Relu(a) => {
                let ga = zip_map(g, self.value(*a), |gy, x| if x > 0.0 { gy } else { 0.0 });
                self.accumulate(grads, *a, ga);
            }
            Op::Sqrt(a) => {
                let ga = zip_map(g, &node.value, |gy, y| if y > 0.0 { gy / (2.0 * y) } else { 0.0 });
                self.accumulate(grads, *a, ga);
            }
            Op::RmsNorm { x, eps } => {
                let (xv, y) = (self.value(*x), &node.value);
                let n = *y.shape().last().unwrap_or(&1);
                let mut gx = vec![0.0; y.numel()];
                for (r, dst) in gx.chunks_mut(n).enumerate() {
                    let span = r * n..(r + 1) * n;
                    let (xr, yr, gr) = (&xv.data()[span.clone()], &y.data()[span.clone()], &g.data()[span]);
                    let rms = (xr.iter().map(|a| a * a).sum::<f64>() / n as f64 + eps).sqrt();
                    let dot: f64 = gr.iter().zip(yr).map(|(a, b)| a * b).sum::<f64>() / n as f64;
                    for i in 0..n {
                        dst[i] = (gr[i] - yr[i] * dot) / rms;
                    }
                }
                self.accumulate(grads, *x, Tensor::new(y.shape().to_vec(), gx)?);
            }
            Op::Softmax { x, axis } => {
                let y = &node.value;
                let (outer, n, inner) = axis_split(y.shape(), *axis);
                let mut gx = vec![0.0; y.numel()];
                for o in 0..outer {
                    for i in 0..inner {
                        let base = o * n * inner + i;
                        let dot: f64 = (0..n)
                            .map(|a| g.data()[base + a * inner] * y.data()[base + a * inner])
                            .sum();
                        for a in 0..n {
                            let k = base + a * inner;
                            gx[k] = y.data()[k] * (g.data()[k] - dot);
                        }
                    }
                }
                self.accumulate(grads, *x, Tensor::new(y.shape().to_vec(), gx)?);
            }
            Op::LogSoftmax { x, axis } => {
                let y = &node.value;
                let (outer, n, inner) = axis_split(y.shape(), *axis);
                let mut gx = vec![0.0; y.numel()];
                for o in 0..outer {
                    for i in 0..inner {
                        let base = o * n * inner + i;
                        let total: f64 = (0..n).map(|a| g.data()[base + a * inner]).sum();
                        for a in 0..n {
                            let k = base + a * inner;
                            gx[k] = g.data()[k] - y.data()[k].exp() * total;
                        }
                    }
                }
                self.accumulate(grads, *x, Tensor::new(y.shape().to_vec(), gx)?);
            }
            Op::Mean { x, axis } => {
                let shape = self.shape(*x).to_vec();
                let (outer, n, inner) = axis_split(&shape, *axis);
                let inv = 1.0 / n as f64;
                let mut gx = vec![0.0; outer * n * inner];
                for o in 0..outer {
                    let src = &g.data()[o * inner..(o + 1) * inner];
                    for a in 0..n {
                        let dst = &mut gx[(o * n + a) * inner..(o * n + a + 1) * inner];
                        for (d, &s) in dst.iter_mut().zip(src) {
                            *d = s * inv;
                        }
                    }
                }
                self.accumulate(grads, *x, Tensor::new(shape, gx)?);
            }
            Op::Sum(x) => {
                let gx = Tensor::full(self.shape(*x), g.item());
                self.accumulate(grads, *x, gx);
            }
            Op::Concat { parts, axis } => {
                let (outer, total, inner) = axis_split(g.shape(), *axis);
                let mut offset = 0;
                for &p in parts {
                    let n = self.shape(p)[*axis];
                    if self.rg(p) {
                        let mut gp = Vec::with_capacity(outer * n * inner);
                        for o in 0..outer {
                            let from = (o * total + offset) * inner;
                            gp.extend_from_slice(&g.data()[from..from + n * inner]);
                        }
                        self.accumulate(grads, p, Tensor::new(self.shape(p).to_vec(), gp)?);
                    }
                    offset += n;
                }
            }
            Op::Slice { x, axis, start } => {
                let shape = self.shape(*x).to_vec();
                let (outer, n, inner) = axis_split(&shape, *axis);
                let len = g.shape()[*axis];
                let mut gx = vec![0.0; outer * n * inner];
                for o in 0..outer {
                    let to = (o * n + start) * inner;
                    gx[to..to + len * inner].copy_from_slice(&g.data()[o * len * inner..(o + 1) * len * inner]);
                }
                self.accumulate(grads, *x, Tensor::new(shape, gx)?);
            }
            Op::Select { x, indices } => {
                let shape = self.shape(*x).to_vec();
                let inner: usize = shape[1..].iter().product();
                let mut gx = vec![0.0; shape[0] * inner];
                for (r, &i) in indices.iter().enumerate() {
                    for (d, &s) in gx[i * inner..(i + 1) * inner]
                        .iter_mut()
                        .zip(&g.data()[r * inner..(r + 1) * inner])
                    {
                        *d += s;
                    }
                }
                self.accumulate(grads, *x, Tensor::new(shape, gx)?);
            }
            Op::Gather { x, indices } => {
                let shape = self.shape(*x).to_vec();
                let n = shape[1];
                let mut gx = vec![0.0; shape[0] * n];
                for (b, &i) in indices.iter().enumerate() {
                    gx[b * n + i] += g.data()[b];
                }
                self.accumulate(grads, *x, Tensor::new(shape, gx)?);
            }
        }
        Ok(())
    }
}

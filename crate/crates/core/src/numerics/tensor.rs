use crate::error::{shape_err, Result};

/// Dense row-major tensor of `f64`.
///
/// Tensors are immutable values once built; the tape clones them rather
/// than sharing mutable storage.
#[derive(Clone, Debug, PartialEq)]
pub struct Tensor {
    shape: Vec<usize>,
    data: Vec<f64>,
}

impl Tensor {
    pub fn new(shape: Vec<usize>, data: Vec<f64>) -> Result<Self> {
        if shape.contains(&0) {
            return Err(shape_err!("extents must be positive, got {shape:?}"));
        }
        let n: usize = shape.iter().product();
        if n != data.len() {
            return Err(shape_err!("shape {shape:?} needs {n} elements, got {}", data.len()));
        }
        Ok(Self { shape, data })
    }

    pub fn zeros(shape: &[usize]) -> Self {
        Self::full(shape, 0.0)
    }

    pub fn full(shape: &[usize], value: f64) -> Self {
        let n = shape.iter().product();
        Self {
            shape: shape.to_vec(),
            data: vec![value; n],
        }
    }

    pub fn scalar(value: f64) -> Self {
        Self {
            shape: vec![1],
            data: vec![value],
        }
    }

    pub fn vector(data: Vec<f64>) -> Self {
        Self {
            shape: vec![data.len()],
            data,
        }
    }

    pub fn from_fn(shape: &[usize], mut f: impl FnMut(usize) -> f64) -> Self {
        let n: usize = shape.iter().product();
        Self {
            shape: shape.to_vec(),
            data: (0..n).map(&mut f).collect(),
        }
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn rank(&self) -> usize {
        self.shape.len()
    }

    pub fn numel(&self) -> usize {
        self.data.len()
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

    /// Value of a one-element tensor.
    pub fn item(&self) -> f64 {
        debug_assert_eq!(self.data.len(), 1);
        self.data[0]
    }

    pub fn reshape(&self, shape: &[usize]) -> Result<Tensor> {
        Tensor::new(shape.to_vec(), self.data.clone())
    }

    pub fn offset(&self, index: &[usize]) -> usize {
        debug_assert_eq!(index.len(), self.shape.len());
        index.iter().zip(&self.shape).fold(0, |acc, (&i, &e)| acc * e + i)
    }

    pub fn get(&self, index: &[usize]) -> f64 {
        self.data[self.offset(index)]
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    pub fn map(&self, f: impl Fn(f64) -> f64) -> Tensor {
        Tensor {
            shape: self.shape.clone(),
            data: self.data.iter().map(|&v| f(v)).collect(),
        }
    }

    pub(crate) fn add_assign(&mut self, other: &Tensor) {
        debug_assert_eq!(self.shape, other.shape);
        for (a, b) in self.data.iter_mut().zip(&other.data) {
            *a += b;
        }
    }

    pub fn max_abs_diff(&self, other: &Tensor) -> f64 {
        self.data
            .iter()
            .zip(&other.data)
            .map(|(a, b)| (a - b).abs())
            .fold(0.0, f64::max)
    }
}

/// Split `shape` around `axis` into (outer, extent, inner) strides.
pub(crate) fn axis_split(shape: &[usize], axis: usize) -> (usize, usize, usize) {
    let outer = shape[..axis].iter().product();
    let inner = shape[axis + 1..].iter().product();
    (outer, shape[axis], inner)
}

/// Exp-normalize along `axis`.
pub fn softmax_axis(x: &Tensor, axis: usize) -> Result<Tensor> {
    if axis >= x.rank() {
        return Err(shape_err!("softmax axis {axis} out of range for rank {}", x.rank()));
    }
    let (outer, n, inner) = axis_split(x.shape(), axis);
    let mut out = vec![0.0; x.numel()];
    let src = x.data();
    for o in 0..outer {
        for i in 0..inner {
            let base = o * n * inner + i;
            let mut max = f64::NEG_INFINITY;
            for a in 0..n {
                max = max.max(src[base + a * inner]);
            }
            let mut sum = 0.0;
            for a in 0..n {
                let e = (src[base + a * inner] - max).exp();
                out[base + a * inner] = e;
                sum += e;
            }
            for a in 0..n {
                out[base + a * inner] /= sum;
            }
        }
    }
    Tensor::new(x.shape().to_vec(), out)
}

/// Batched `op(a) · op(b)` over rank-3 operands `[batch, rows, cols]`.
pub(crate) fn gemm(a: &Tensor, trans_a: bool, b: &Tensor, trans_b: bool) -> Result<Tensor> {
    if a.rank() != 3 || b.rank() != 3 || a.shape()[0] != b.shape()[0] {
        return Err(shape_err!(
            "batched matmul needs rank-3 operands with equal batch, got {:?} and {:?}",
            a.shape(),
            b.shape()
        ));
    }
    let batch = a.shape()[0];
    let (ar, ac) = (a.shape()[1], a.shape()[2]);
    let (br, bc) = (b.shape()[1], b.shape()[2]);
    let (m, k) = if trans_a { (ac, ar) } else { (ar, ac) };
    let (k2, n) = if trans_b { (bc, br) } else { (br, bc) };
    if k != k2 {
        return Err(shape_err!(
            "matmul inner dims differ: {:?}{} x {:?}{}",
            a.shape(),
            if trans_a { "^T" } else { "" },
            b.shape(),
            if trans_b { "^T" } else { "" }
        ));
    }
    let mut out = vec![0.0; batch * m * n];
    let ad = a.data();
    let bd = b.data();
    let mut bt = Vec::new();
    for bi in 0..batch {
        let ao = &ad[bi * ar * ac..(bi + 1) * ar * ac];
        let mut bo = &bd[bi * br * bc..(bi + 1) * br * bc];
        if trans_b {
            // row-major copy of bᵀ keeps the inner loop contiguous
            bt.clear();
            bt.extend(
                (0..bc)
                    .flat_map(|p| (0..br).map(move |j| (p, j)))
                    .map(|(p, j)| bo[j * bc + p]),
            );
            bo = &bt;
        }
        let co = &mut out[bi * m * n..(bi + 1) * m * n];
        let a_at = |i: usize, p: usize| if trans_a { ao[p * ac + i] } else { ao[i * ac + p] };
        for i in 0..m {
            let crow = &mut co[i * n..(i + 1) * n];
            let mut p = 0;
            while p + 4 <= k {
                let (a0, a1, a2, a3) = (a_at(i, p), a_at(i, p + 1), a_at(i, p + 2), a_at(i, p + 3));
                let b0 = &bo[p * n..(p + 1) * n];
                let b1 = &bo[(p + 1) * n..(p + 2) * n];
                let b2 = &bo[(p + 2) * n..(p + 3) * n];
                let b3 = &bo[(p + 3) * n..(p + 4) * n];
                for ((((c, x0), x1), x2), x3) in crow.iter_mut().zip(b0).zip(b1).zip(b2).zip(b3) {
                    *c += a0 * x0 + a1 * x1 + a2 * x2 + a3 * x3;
                }
                p += 4;
            }
            for p in p..k {
                let av = a_at(i, p);
                let brow = &bo[p * n..(p + 1) * n];
                for (c, &bv) in crow.iter_mut().zip(brow) {
                    *c += av * bv;
                }
            }
        }
    }
    Tensor::new(vec![batch, m, n], out)
}

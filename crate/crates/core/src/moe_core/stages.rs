//! Stage-by-stage evaluation on plain tensors, one tracklet at a time.

use super::graph::{Embeddings, Session};
use super::Model;
use crate::error::{shape_err, Error, Result};
use crate::numerics::{tensor::axis_split, Tensor};

/// Tolerance for the sum-to-one checks on gate outputs.
pub const SIMPLEX_TOL: f64 = 1e-6;

/// First-layer gate weights `[T, K, n1, n2]`, a simplex over `n1`.
#[derive(Clone, Debug, PartialEq)]
pub struct GatingTensor1 {
    pub weights: Tensor,
}

/// Per-frame features of one tracklet, each `[T, d]`.
#[derive(Clone, Debug, PartialEq)]
pub struct FrameEmbeddings {
    pub f_l: Tensor,
    pub f_s: Tensor,
    /// Frame tokens entering the temporal decoder.
    pub f_t: Tensor,
}

#[derive(Clone, Debug, PartialEq)]
pub struct BiometricEmbedding {
    pub f_l: Vec<f64>,
    pub f_s: Vec<f64>,
    pub f_t: Vec<f64>,
    pub f: Vec<f64>,
    pub w2: [f64; 3],
}

#[derive(Clone, Debug, PartialEq)]
pub struct ForwardOutput {
    pub embedding: BiometricEmbedding,
    pub frames: FrameEmbeddings,
    pub gating1: GatingTensor1,
}

/// Check that every slice along `axis` is nonnegative and sums to 1 within `tol`.
pub fn check_simplex(t: &Tensor, axis: usize, tol: f64) -> Result<()> {
    if axis >= t.rank() {
        return Err(shape_err!("simplex axis {axis} out of range for {:?}", t.shape()));
    }
    let (outer, n, inner) = axis_split(t.shape(), axis);
    for o in 0..outer {
        for i in 0..inner {
            let mut sum = 0.0;
            for a in 0..n {
                let v = t.data()[(o * n + a) * inner + i];
                if v < -tol || !v.is_finite() {
                    return Err(Error::Invariant(format!("gate weight {v} is not a probability")));
                }
                sum += v;
            }
            if (sum - 1.0).abs() > tol {
                return Err(Error::Invariant(format!(
                    "gate weights sum to {sum}, expected 1 within {tol}"
                )));
            }
        }
    }
    Ok(())
}

fn as_batch(t: &Tensor) -> Result<Tensor> {
    let mut shape = vec![1];
    shape.extend_from_slice(t.shape());
    t.reshape(&shape)
}

fn drop_batch(t: &Tensor) -> Result<Tensor> {
    t.reshape(&t.shape()[1..])
}

/// Outputs of the `n1` first-layer experts, each `[T, K, d]`.
pub fn first_layer_forward(model: &Model, g: &Tensor) -> Result<Vec<Tensor>> {
    let channels = g.shape().last().copied().unwrap_or(0);
    if g.rank() != 3 || channels != model.config.channels() {
        return Err(shape_err!(
            "expected [T, K, {}] input, got {:?}",
            model.config.channels(),
            g.shape()
        ));
    }
    let mut s = Session::new(model, false);
    let gv = s.input(as_batch(g)?);
    let bank = s.experts(gv)?;
    let bank = s.value(bank);
    let [_, t, k, n1, d] = bank.shape()[..] else {
        unreachable!()
    };
    Ok((0..n1)
        .map(|i| {
            Tensor::from_fn(&[t, k, d], |flat| {
                let (row, c) = (flat / d, flat % d);
                bank.data()[(row * n1 + i) * d + c]
            })
        })
        .collect())
}

/// First-layer gate on `[T, K, 4d]` features.
pub fn gate1_forward(model: &Model, g: &Tensor) -> Result<GatingTensor1> {
    if g.rank() != 3 || g.shape()[2] != model.config.channels() {
        return Err(shape_err!("gate input {:?} is not [T, K, 4d]", g.shape()));
    }
    let mut s = Session::new(model, false);
    let gv = s.input(as_batch(g)?);
    let head = model.params.gate1;
    let w = s.gate1(gv, head)?;
    Ok(GatingTensor1 {
        weights: drop_batch(s.value(w))?,
    })
}

/// `F^(j)[t,k,:] = Σ_i W[t,k,i,j] · F_i[t,k,:]`.
pub fn mix_layers(experts: &[Tensor], w: &GatingTensor1) -> Result<Vec<Tensor>> {
    let ws = w.weights.shape();
    let [t, k, n1, n2] = ws[..] else {
        return Err(shape_err!("gating tensor must be [T, K, n1, n2], got {ws:?}"));
    };
    if experts.len() != n1 {
        return Err(shape_err!("{} expert outputs for {n1} gate rows", experts.len()));
    }
    let d = match experts.first().map(Tensor::shape) {
        Some(&[et, ek, d]) if et == t && ek == k => d,
        other => return Err(shape_err!("expert output {other:?} does not match [{t}, {k}, d]")),
    };
    if experts.iter().any(|e| e.shape() != [t, k, d]) {
        return Err(shape_err!("expert outputs differ in shape"));
    }
    check_simplex(&w.weights, 2, SIMPLEX_TOL)?;
    Ok((0..n2)
        .map(|j| {
            Tensor::from_fn(&[t, k, d], |flat| {
                let row = flat / d;
                (0..n1)
                    .map(|i| w.weights.data()[(row * n1 + i) * n2 + j] * experts[i].data()[flat])
                    .sum()
            })
        })
        .collect())
}

fn check_mixed(model: &Model, f: &Tensor) -> Result<()> {
    let c = &model.config;
    if f.shape() != [c.frames, c.tokens, c.d] {
        return Err(shape_err!(
            "mixed volume {:?} does not match [{}, {}, {}]",
            f.shape(),
            c.frames,
            c.tokens,
            c.d
        ));
    }
    Ok(())
}

fn pooled(model: &Model, f: &Tensor, long: bool) -> Result<(Tensor, Vec<f64>)> {
    check_mixed(model, f)?;
    let mut s = Session::new(model, false);
    let fv = s.input(as_batch(f)?);
    let head = if long { model.params.long } else { model.params.short };
    let (frames, pooled) = s.pooled_expert(fv, head)?;
    Ok((drop_batch(s.value(frames))?, s.value(pooled).data().to_vec()))
}

/// Long-term expert on `F^(1)`: (`F_L` `[T, d]`, `f_L`).
pub fn long_term_forward(model: &Model, f1: &Tensor) -> Result<(Tensor, Vec<f64>)> {
    pooled(model, f1, true)
}

/// Short-term expert on `F^(2)`: (`F_S` `[T, d]`, `f_S`).
pub fn short_term_forward(model: &Model, f2: &Tensor) -> Result<(Tensor, Vec<f64>)> {
    pooled(model, f2, false)
}

/// Temporal expert on `F^(3)`: (frame tokens `[T, d]`, `f_T`).
pub fn temporal_forward(model: &Model, f3: &Tensor) -> Result<(Tensor, Vec<f64>)> {
    check_mixed(model, f3)?;
    let mut s = Session::new(model, false);
    let fv = s.input(as_batch(f3)?);
    let (frames, f_t) = s.temporal(fv)?;
    Ok((drop_batch(s.value(frames))?, s.value(f_t).data().to_vec()))
}

/// Second-layer gate weights from the three mixed volumes.
pub fn gate2_forward(model: &Model, mixed: [&Tensor; 3]) -> Result<[f64; 3]> {
    for f in mixed {
        check_mixed(model, f)?;
    }
    let mut s = Session::new(model, false);
    let vars = [
        s.input(as_batch(mixed[0])?),
        s.input(as_batch(mixed[1])?),
        s.input(as_batch(mixed[2])?),
    ];
    let w = s.gate2(vars)?;
    let w = s.value(w).data();
    Ok([w[0], w[1], w[2]])
}

/// `f = w2_L f_L + w2_S f_S + w2_T f_T`.
pub fn fuse_embedding(f_l: &[f64], f_s: &[f64], f_t: &[f64], w2: [f64; 3]) -> Result<Vec<f64>> {
    if f_l.len() != f_s.len() || f_l.len() != f_t.len() {
        return Err(shape_err!(
            "embedding lengths differ: {} {} {}",
            f_l.len(),
            f_s.len(),
            f_t.len()
        ));
    }
    check_simplex(&Tensor::vector(w2.to_vec()), 0, SIMPLEX_TOL)?;
    Ok((0..f_l.len())
        .map(|c| w2[0] * f_l[c] + w2[1] * f_s[c] + w2[2] * f_t[c])
        .collect())
}

/// Split row `b` of batched embeddings into owned values.
pub(crate) fn extract(s: &Session, e: &Embeddings, b: usize) -> Result<ForwardOutput> {
    let row = |v| -> Vec<f64> {
        let t = s.value(v);
        let n = t.numel() / t.shape()[0];
        t.data()[b * n..(b + 1) * n].to_vec()
    };
    let frames = |v| -> Result<Tensor> {
        let t = s.value(v);
        Tensor::new(t.shape()[1..].to_vec(), row(v))
    };
    let w2 = row(e.w2);
    Ok(ForwardOutput {
        embedding: BiometricEmbedding {
            f_l: row(e.f_l),
            f_s: row(e.f_s),
            f_t: row(e.f_t),
            f: row(e.f),
            w2: [w2[0], w2[1], w2[2]],
        },
        frames: FrameEmbeddings {
            f_l: frames(e.frames_l)?,
            f_s: frames(e.frames_s)?,
            f_t: frames(e.frames_t)?,
        },
        gating1: GatingTensor1 { weights: frames(e.w1)? },
    })
}

/// Stack `[T, K, C]` volumes into one `[B, T, K, C]` tensor.
pub fn stack(volumes: &[&Tensor]) -> Result<Tensor> {
    let first = volumes
        .first()
        .ok_or_else(|| Error::EmptyInput("no volumes to stack".into()))?;
    let mut shape = vec![volumes.len()];
    shape.extend_from_slice(first.shape());
    let mut data = Vec::with_capacity(first.numel() * volumes.len());
    for v in volumes {
        if v.shape() != first.shape() {
            return Err(shape_err!("volume {:?} differs from {:?}", v.shape(), first.shape()));
        }
        data.extend_from_slice(v.data());
    }
    Tensor::new(shape, data)
}

impl Model {
    /// Single-input forward of one `[T, K, 4d]` volume.
    pub fn forward(&self, g: &Tensor) -> Result<ForwardOutput> {
        Ok(self.forward_many(&[g])?.remove(0))
    }

    /// Single-input forward of several volumes in one batch.
    pub fn forward_many(&self, volumes: &[&Tensor]) -> Result<Vec<ForwardOutput>> {
        let mut s = Session::new(self, false);
        let g = s.input(stack(volumes)?);
        let (emb, _) = s.forward_single(g)?;
        (0..volumes.len()).map(|b| extract(&s, &emb, b)).collect()
    }
}

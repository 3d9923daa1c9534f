//! Pair-conditioned gating and the central score band used to pick which
//! query/gallery pairs get rescored with it.

use crate::error::{shape_err, Error, Result};
use crate::evaluator::cosine_sim;
use crate::moe_core::{stages_extract, ForwardOutput, GatingTensor1, Model, Session};
use crate::numerics::Tensor;

/// Gate outputs for one side of a pair.
#[derive(Clone, Debug, PartialEq)]
pub struct DualWeights {
    pub w1: GatingTensor1,
    pub w2: [f64; 3],
}

#[derive(Clone, Debug, PartialEq)]
pub struct DualConditioned {
    /// Conditioned features, `[T, K, 4d]`.
    pub g_gallery: Tensor,
    pub g_query: Tensor,
    pub w_gallery: DualWeights,
    pub w_query: DualWeights,
}

fn batch2(a: &Tensor, b: &Tensor) -> Result<Tensor> {
    if a.shape() != b.shape() || a.rank() != 3 {
        return Err(shape_err!(
            "pair volumes must share [T, K, C], got {:?} and {:?}",
            a.shape(),
            b.shape()
        ));
    }
    let mut shape = vec![2];
    shape.extend_from_slice(a.shape());
    let mut data = a.data().to_vec();
    data.extend_from_slice(b.data());
    Tensor::new(shape, data)
}

fn unbatch(t: &Tensor, row: usize) -> Result<Tensor> {
    let n = t.numel() / t.shape()[0];
    Tensor::new(t.shape()[1..].to_vec(), t.data()[row * n..(row + 1) * n].to_vec())
}

/// Concatenate the pair along channels, attend over tokens per frame, split
/// and run the dual gate heads on each side.
pub fn dual_condition(model: &Model, g_gallery: &Tensor, g_query: &Tensor) -> Result<DualConditioned> {
    let both = batch2(g_gallery, g_query)?;
    let mut s = Session::new(model, false);
    let gv = s.input(both);
    let gal = s.tape.slice(gv, 0, 0, 1)?;
    let qry = s.tape.slice(gv, 0, 1, 1)?;
    let gates = s.dual_gates(gal, qry)?;
    let w1 = s.value(gates.w1);
    let w2 = s.value(gates.w2).data();
    let side = |row: usize| -> Result<DualWeights> {
        Ok(DualWeights {
            w1: GatingTensor1 {
                weights: unbatch(w1, row)?,
            },
            w2: [w2[3 * row], w2[3 * row + 1], w2[3 * row + 2]],
        })
    };
    Ok(DualConditioned {
        g_gallery: unbatch(s.value(gates.g_gallery), 0)?,
        g_query: unbatch(s.value(gates.g_query), 0)?,
        w_gallery: side(0)?,
        w_query: side(1)?,
    })
}

impl Model {
    /// Dual-input forward of one pair: (gallery output, query output).
    pub fn forward_dual(&self, g_gallery: &Tensor, g_query: &Tensor) -> Result<(ForwardOutput, ForwardOutput)> {
        let mut s = Session::new(self, false);
        let gv = s.input(batch2(g_gallery, g_query)?);
        let experts = s.experts(gv)?;
        let (emb, _) = s.forward_dual(gv, experts, &[(0, 1)])?;
        Ok((stages_extract(&s, &emb, 0)?, stages_extract(&s, &emb, 1)?))
    }
}

/// Pairs whose score lies in the central `q` percent of all scores.
#[derive(Clone, Debug, PartialEq)]
pub struct ScoreBand {
    pub q: f64,
    pub lower: f64,
    pub upper: f64,
    /// Indices into the score list, ascending.
    pub selected: Vec<usize>,
}

impl ScoreBand {
    pub fn contains(&self, index: usize) -> bool {
        self.selected.binary_search(&index).is_ok()
    }
}

/// Nearest-rank percentile of sorted data: the value at 1-based rank
/// `⌈p N / 100⌉`, with `P_0` the minimum.
pub fn nearest_rank(sorted: &[f64], p: f64) -> f64 {
    let n = sorted.len();
    // p N is exact for integral p; the nudge absorbs round-off otherwise
    let rank = ((p * n as f64) / 100.0 - 1e-9).ceil().max(1.0) as usize;
    sorted[rank.min(n) - 1]
}

/// Select pairs with `P_(50 − q/2) ≤ score ≤ P_(50 + q/2)`.
///
/// A zero-width band (`q = 0`) selects nothing, so `q = 0` is exactly
/// single-input scoring.
pub fn select_band(scores: &[f64], q: f64) -> Result<ScoreBand> {
    if scores.is_empty() {
        return Err(Error::EmptyInput("no scores to band".into()));
    }
    if !(0.0..=100.0).contains(&q) {
        return Err(Error::Config(format!("q must lie in [0, 100], got {q}")));
    }
    if scores.iter().any(|s| !s.is_finite()) {
        return Err(Error::Numeric {
            coordinate: scores.iter().position(|s| !s.is_finite()).unwrap_or(0),
            message: "non-finite similarity score".into(),
        });
    }
    let mut sorted = scores.to_vec();
    sorted.sort_by(f64::total_cmp);
    let lower = nearest_rank(&sorted, 50.0 - q / 2.0);
    let upper = nearest_rank(&sorted, 50.0 + q / 2.0);
    let selected = if q == 0.0 {
        Vec::new()
    } else {
        (0..scores.len())
            .filter(|&i| scores[i] >= lower && scores[i] <= upper)
            .collect()
    };
    Ok(ScoreBand {
        q,
        lower,
        upper,
        selected,
    })
}

/// Pairs per batched dual forward.
const RESCORE_CHUNK: usize = 16;

/// Cosine similarity of dual-conditioned embeddings for each
/// `(gallery, query)` pair.
pub fn dual_rescore(model: &Model, pairs: &[(&Tensor, &Tensor)]) -> Result<Vec<f64>> {
    let mut out = Vec::with_capacity(pairs.len());
    for chunk in pairs.chunks(RESCORE_CHUNK) {
        let p = chunk.len();
        let volumes: Vec<&Tensor> = chunk.iter().map(|c| c.0).chain(chunk.iter().map(|c| c.1)).collect();
        let mut s = Session::new(model, false);
        let gv = s.input(crate::moe_core::stack_volumes(&volumes)?);
        let experts = s.experts(gv)?;
        let idx: Vec<(usize, usize)> = (0..p).map(|i| (i, p + i)).collect();
        let (emb, _) = s.forward_dual(gv, experts, &idx)?;
        let f = s.value(emb.f);
        let d = f.shape()[1];
        for i in 0..p {
            let a = &f.data()[i * d..(i + 1) * d];
            let b = &f.data()[(p + i) * d..(p + i + 1) * d];
            out.push(cosine_sim(a, b)?);
        }
    }
    Ok(out)
}

/// Replace the scores of band members with `rescored` (in band order).
pub fn apply_rescore(scores: &[f64], band: &ScoreBand, rescored: &[f64]) -> Result<Vec<f64>> {
    if rescored.len() != band.selected.len() {
        return Err(shape_err!(
            "{} rescored values for {} band pairs",
            rescored.len(),
            band.selected.len()
        ));
    }
    let mut out = scores.to_vec();
    for (&i, &v) in band.selected.iter().zip(rescored) {
        out[i] = v;
    }
    Ok(out)
}

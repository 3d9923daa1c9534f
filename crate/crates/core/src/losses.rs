//! Training objectives.
//!
//! The `*_var` functions build batch-averaged losses on a tape; the plain
//! functions evaluate one sample or pair on tensors and go through the same
//! code with a batch of one.

use crate::error::{shape_err, Error, Result};
use crate::moe_core::{BiometricEmbedding, FrameEmbeddings};
use crate::numerics::{Tape, Tensor, Var};

/// One tracklet pair with everything the pair losses read.
#[derive(Clone, Debug)]
pub struct PairSample {
    pub embeddings: [BiometricEmbedding; 2],
    pub frames: [FrameEmbeddings; 2],
    pub subjects: [u32; 2],
}

impl PairSample {
    /// 1 for a same-identity pair, else 0.
    pub fn y(&self) -> u8 {
        u8::from(self.subjects[0] == self.subjects[1])
    }
}

/// Unweighted batch-averaged loss components.
#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct LossTerms {
    pub ce: f64,
    pub lts: f64,
    pub sts: f64,
    pub ts: f64,
    pub contrastive: f64,
}

/// `ce + α (lts + sts + ts) + β contrastive`
pub fn total_loss(terms: &LossTerms, alpha: f64, beta: f64) -> f64 {
    terms.ce + alpha * (terms.lts + terms.sts + terms.ts) + beta * terms.contrastive
}

fn batch_of(tape: &Tape, v: Var) -> usize {
    tape.shape(v)[0]
}

/// Mean over rows of `−log softmax(logits)[label]`; logits `[B, N]`.
pub fn ce_var(tape: &mut Tape, logits: Var, labels: &[usize]) -> Result<Var> {
    let lp = tape.log_softmax(logits, 1)?;
    let picked = tape.gather(lp, labels)?;
    let s = tape.sum(picked);
    Ok(tape.scale(s, -1.0 / labels.len() as f64))
}

/// `Σ_{t1≠t2} ‖x_t1 − x_t2‖² / T²` summed over the batch, for `x: [P, T, d]`.
///
/// Uses `Σ_{t1≠t2} ‖x_t1 − x_t2‖² = 2T Σ_t ‖x_t − x̄‖²`.
fn frame_spread_sum(tape: &mut Tape, x: Var) -> Result<Var> {
    let [p, t, _] = tape.shape(x)[..] else {
        return Err(shape_err!("frame features must be [P, T, d], got {:?}", tape.shape(x)));
    };
    let inv = 1.0 / t as f64;
    let centering = Tensor::from_fn(&[t, t], |i| {
        let (r, c) = (i / t, i % t);
        f64::from(u8::from(r == c)) - inv
    });
    let centering = tape.constant(centering);
    let centering = tape.expand(centering, p)?;
    let centered = tape.bmm(centering, false, x, false)?;
    let sq = tape.mul(centered, centered)?;
    let s = tape.sum(sq);
    Ok(tape.scale(s, 2.0 / t as f64))
}

/// `Σ_rows ‖a − b‖²`.
fn sq_dist_sum(tape: &mut Tape, a: Var, b: Var) -> Result<Var> {
    let diff = tape.sub(a, b)?;
    let sq = tape.mul(diff, diff)?;
    Ok(tape.sum(sq))
}

/// Per-row `‖a − b‖²` for `[B, d]` inputs, shape `[B]`.
fn sq_dist_rows(tape: &mut Tape, a: Var, b: Var) -> Result<Var> {
    let d = tape.shape(a)[1];
    let diff = tape.sub(a, b)?;
    let sq = tape.mul(diff, diff)?;
    let m = tape.mean(sq, 1)?;
    Ok(tape.scale(m, d as f64))
}

fn require_positive(subjects: &[(u32, u32)], what: &str) -> Result<()> {
    if let Some((a, b)) = subjects.iter().find(|(a, b)| a != b) {
        return Err(Error::Contract(format!(
            "{what} applies to same-identity pairs only, got subjects {a} and {b}"
        )));
    }
    Ok(())
}

/// Long-term consistency, batch mean over `P` positive pairs.
pub fn lts_var(tape: &mut Tape, frames: [Var; 2], pooled: [Var; 2], subjects: &[(u32, u32)]) -> Result<Var> {
    require_positive(subjects, "long-term consistency")?;
    let p = batch_of(tape, pooled[0]);
    let cross = sq_dist_sum(tape, pooled[0], pooled[1])?;
    let s1 = frame_spread_sum(tape, frames[0])?;
    let s2 = frame_spread_sum(tape, frames[1])?;
    let within = tape.add(s1, s2)?;
    let total = tape.add(cross, within)?;
    Ok(tape.scale(total, 1.0 / p as f64))
}

/// Short-term consistency: within-video frame spread only.
pub fn sts_var(tape: &mut Tape, frames: [Var; 2]) -> Result<Var> {
    let p = batch_of(tape, frames[0]);
    let s1 = frame_spread_sum(tape, frames[0])?;
    let s2 = frame_spread_sum(tape, frames[1])?;
    let total = tape.add(s1, s2)?;
    Ok(tape.scale(total, 1.0 / p as f64))
}

/// Temporal consistency `‖f_T¹ − f_T²‖²`, batch mean.
pub fn ts_var(tape: &mut Tape, pooled: [Var; 2], subjects: &[(u32, u32)]) -> Result<Var> {
    require_positive(subjects, "temporal consistency")?;
    let p = batch_of(tape, pooled[0]);
    let s = sq_dist_sum(tape, pooled[0], pooled[1])?;
    Ok(tape.scale(s, 1.0 / p as f64))
}

/// `½ (y ‖f¹ − f²‖² + (1 − y) max(0, m − ‖f¹ − f²‖)²)`, batch mean.
pub fn contrastive_var(tape: &mut Tape, f: [Var; 2], y: &[u8], margin: f64) -> Result<Var> {
    if margin <= 0.0 {
        return Err(Error::Config(format!("margin must be positive, got {margin}")));
    }
    let p = batch_of(tape, f[0]);
    if y.len() != p {
        return Err(shape_err!("{} labels for {p} pairs", y.len()));
    }
    let d2 = sq_dist_rows(tape, f[0], f[1])?;
    let dist = tape.sqrt(d2)?;
    let neg = tape.scale(dist, -1.0);
    let gap = tape.offset(neg, margin);
    let hinge = tape.relu(gap);
    let hinge2 = tape.mul(hinge, hinge)?;
    let pos_mask = tape.constant(Tensor::vector(y.iter().map(|&v| f64::from(v)).collect()));
    let neg_mask = tape.constant(Tensor::vector(y.iter().map(|&v| 1.0 - f64::from(v)).collect()));
    let pos = tape.mul(pos_mask, d2)?;
    let negt = tape.mul(neg_mask, hinge2)?;
    let both = tape.add(pos, negt)?;
    let s = tape.sum(both);
    Ok(tape.scale(s, 0.5 / p as f64))
}

fn row(tape: &mut Tape, v: &[f64]) -> Result<Var> {
    Ok(tape.constant(Tensor::new(vec![1, v.len()], v.to_vec())?))
}

fn frames_var(tape: &mut Tape, t: &Tensor) -> Result<Var> {
    let mut shape = vec![1];
    shape.extend_from_slice(t.shape());
    Ok(tape.constant(t.reshape(&shape)?))
}

fn check_frames(a: &Tensor, b: &Tensor) -> Result<()> {
    if a.rank() != 2 || a.shape() != b.shape() {
        return Err(shape_err!(
            "frame features {:?} and {:?} must share [T, d]",
            a.shape(),
            b.shape()
        ));
    }
    Ok(())
}

/// Cross-entropy of one set of logits against `label`.
pub fn ce_loss(logits: &[f64], label: usize) -> Result<f64> {
    let mut tape = Tape::new();
    let l = row(&mut tape, logits)?;
    let v = ce_var(&mut tape, l, &[label])?;
    Ok(tape.value(v).item())
}

pub fn lts_loss(pair: &PairSample) -> Result<f64> {
    let [fa, fb] = [&pair.frames[0].f_l, &pair.frames[1].f_l];
    check_frames(fa, fb)?;
    let mut tape = Tape::new();
    let frames = [frames_var(&mut tape, fa)?, frames_var(&mut tape, fb)?];
    let pooled = [
        row(&mut tape, &pair.embeddings[0].f_l)?,
        row(&mut tape, &pair.embeddings[1].f_l)?,
    ];
    let v = lts_var(&mut tape, frames, pooled, &[(pair.subjects[0], pair.subjects[1])])?;
    Ok(tape.value(v).item())
}

pub fn sts_loss(pair: &PairSample) -> Result<f64> {
    let [fa, fb] = [&pair.frames[0].f_s, &pair.frames[1].f_s];
    check_frames(fa, fb)?;
    let mut tape = Tape::new();
    let frames = [frames_var(&mut tape, fa)?, frames_var(&mut tape, fb)?];
    let v = sts_var(&mut tape, frames)?;
    Ok(tape.value(v).item())
}

pub fn ts_loss(pair: &PairSample) -> Result<f64> {
    let mut tape = Tape::new();
    let pooled = [
        row(&mut tape, &pair.embeddings[0].f_t)?,
        row(&mut tape, &pair.embeddings[1].f_t)?,
    ];
    let v = ts_var(&mut tape, pooled, &[(pair.subjects[0], pair.subjects[1])])?;
    Ok(tape.value(v).item())
}

pub fn contrastive_loss(pair: &PairSample, margin: f64) -> Result<f64> {
    contrastive_pair(&pair.embeddings[0].f, &pair.embeddings[1].f, pair.y(), margin)
}

/// Contrastive loss on two raw embeddings.
pub fn contrastive_pair(f1: &[f64], f2: &[f64], y: u8, margin: f64) -> Result<f64> {
    let mut tape = Tape::new();
    let a = row(&mut tape, f1)?;
    let b = row(&mut tape, f2)?;
    let v = contrastive_var(&mut tape, [a, b], &[y], margin)?;
    Ok(tape.value(v).item())
}

//! Scaled dot-product multi-head attention on the tape.

use super::tape::{Tape, Var};
use crate::error::{shape_err, Error, Result};

/// Tape handles for the four projections of one attention block.
/// Weights are `[D, D]` (input-major), biases `[D]`.
#[derive(Clone, Copy, Debug)]
pub struct AttentionVars {
    pub wq: Var,
    pub bq: Var,
    pub wk: Var,
    pub bk: Var,
    pub wv: Var,
    pub bv: Var,
    pub wo: Var,
    pub bo: Var,
}

/// Multi-head attention of `query: [B, Nq, D]` over `key`/`value: [B, Nk, D]`.
/// Returns `[B, Nq, D]`.
pub fn mhsa_forward(tape: &mut Tape, query: Var, key: Var, value: Var, heads: usize, w: &AttentionVars) -> Result<Var> {
    let (sq, sk, sv) = (
        tape.shape(query).to_vec(),
        tape.shape(key).to_vec(),
        tape.shape(value).to_vec(),
    );
    if sq.len() != 3 || sk.len() != 3 || sv.len() != 3 {
        return Err(shape_err!("attention expects rank-3 inputs, got {sq:?} {sk:?} {sv:?}"));
    }
    if sk != sv {
        return Err(shape_err!("key {sk:?} and value {sv:?} must match"));
    }
    if sq[0] != sk[0] || sq[2] != sk[2] {
        return Err(shape_err!("query {sq:?} incompatible with key {sk:?}"));
    }
    let dim = sq[2];
    if heads == 0 || dim % heads != 0 {
        return Err(Error::Config(format!(
            "model dimension {dim} not divisible by {heads} heads"
        )));
    }
    let head_dim = dim / heads;
    let scale = 1.0 / (head_dim as f64).sqrt();

    let q = tape.linear(query, w.wq, w.bq)?;
    let k = tape.linear(key, w.wk, w.bk)?;
    let v = tape.linear(value, w.wv, w.bv)?;

    let mut outs = Vec::with_capacity(heads);
    for h in 0..heads {
        let (qh, kh, vh) = if heads == 1 {
            (q, k, v)
        } else {
            (
                tape.slice(q, 2, h * head_dim, head_dim)?,
                tape.slice(k, 2, h * head_dim, head_dim)?,
                tape.slice(v, 2, h * head_dim, head_dim)?,
            )
        };
        let scores = tape.bmm(qh, false, kh, true)?;
        let scores = tape.scale(scores, scale);
        let attn = tape.softmax(scores, 2)?;
        outs.push(tape.bmm(attn, false, vh, false)?);
    }
    let merged = if heads == 1 { outs[0] } else { tape.concat(&outs, 2)? };
    tape.linear(merged, w.wo, w.bo)
}

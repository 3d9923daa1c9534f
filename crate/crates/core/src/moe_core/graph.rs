//! Batched model forward on a [`Tape`].
//!
//! Shapes use `B` for tracklets in the batch. Inputs are `[B, T, K, 4d]`.

use super::config::TemporalOp;
use super::params::{AttentionP, DualAttentionP, LinearP, MlpP, ParamId, SymAttentionP, SymProjP};
use super::Model;
use crate::error::{shape_err, Result};
use crate::numerics::{mhsa_forward, AttentionVars, Tape, Tensor, Var};

/// Keeps the RMS normalization of an all-zero embedding at zero.
pub const EMBED_NORM_EPS: f64 = 1e-6;

/// A tape with every model parameter bound to a node.
pub struct Session<'m> {
    pub tape: Tape,
    pub model: &'m Model,
    params: Vec<Var>,
}

/// Tape handles for one forward pass over `B` tracklets.
#[derive(Clone, Copy, Debug)]
pub struct Embeddings {
    /// `[B, T, K, n1, n2]`, simplex over the `n1` axis.
    pub w1: Var,
    /// `[B, 3]`
    pub w2: Var,
    /// Per-frame long-term and short-term features and temporal tokens, `[B, T, d]`.
    pub frames_l: Var,
    pub frames_s: Var,
    pub frames_t: Var,
    /// `[B, d]`
    pub f_l: Var,
    pub f_s: Var,
    pub f_t: Var,
    pub f: Var,
}

/// Gating outputs that replace the single-input gates in dual mode.
#[derive(Clone, Copy, Debug)]
pub struct DualGates {
    /// Conditioned features `[P, T, K, 4d]` for the gallery and query sides.
    pub g_gallery: Var,
    pub g_query: Var,
    /// `[2P, T, K, n1, n2]`, gallery rows first.
    pub w1: Var,
    /// `[2P, 3]`, gallery rows first.
    pub w2: Var,
}

impl<'m> Session<'m> {
    /// Bind parameters as differentiable leaves (`trainable`) or constants.
    pub fn new(model: &'m Model, trainable: bool) -> Self {
        let mut tape = Tape::new();
        let params = model
            .store
            .tensors()
            .iter()
            .map(|t| {
                if trainable {
                    tape.leaf(t.clone())
                } else {
                    tape.constant(t.clone())
                }
            })
            .collect();
        Self { tape, model, params }
    }

    pub fn param(&self, id: ParamId) -> Var {
        self.params[id.0]
    }

    pub fn param_vars(&self) -> &[Var] {
        &self.params
    }

    pub fn value(&self, v: Var) -> &Tensor {
        self.tape.value(v)
    }

    pub fn input(&mut self, t: Tensor) -> Var {
        self.tape.constant(t)
    }

    pub fn linear(&mut self, x: Var, l: LinearP) -> Result<Var> {
        let (w, b) = (self.param(l.w), self.param(l.b));
        self.tape.linear(x, w, b)
    }

    fn embed_norm(&mut self, x: Var) -> Result<Var> {
        if self.model.config.embed_norm {
            self.tape.rms_norm(x, EMBED_NORM_EPS)
        } else {
            Ok(x)
        }
    }

    pub fn mlp(&mut self, x: Var, m: MlpP) -> Result<Var> {
        let h = self.linear(x, m.l1)?;
        let h = self.tape.gelu(h);
        self.linear(h, m.l2)
    }

    fn attention_vars(&self, a: &AttentionP) -> AttentionVars {
        AttentionVars {
            wq: self.param(a.q.w),
            bq: self.param(a.q.b),
            wk: self.param(a.k.w),
            bk: self.param(a.k.b),
            wv: self.param(a.v.w),
            bv: self.param(a.v.b),
            wo: self.param(a.o.w),
            bo: self.param(a.o.b),
        }
    }

    fn sym_proj(&mut self, p: &SymProjP) -> Result<(Var, Var)> {
        let (a, b, bias) = (self.param(p.a), self.param(p.b), self.param(p.bias));
        let top = self.tape.concat(&[a, b], 1)?;
        let bottom = self.tape.concat(&[b, a], 1)?;
        let w = self.tape.concat(&[top, bottom], 0)?;
        let bias = self.tape.concat(&[bias, bias], 0)?;
        Ok((w, bias))
    }

    fn sym_attention_vars(&mut self, s: &SymAttentionP) -> Result<AttentionVars> {
        let (wq, bq) = self.sym_proj(&s.q)?;
        let (wk, bk) = self.sym_proj(&s.k)?;
        let (wv, bv) = self.sym_proj(&s.v)?;
        let (wo, bo) = self.sym_proj(&s.o)?;
        Ok(AttentionVars {
            wq,
            bq,
            wk,
            bk,
            wv,
            bv,
            wo,
            bo,
        })
    }

    fn dims(&self, g: Var) -> Result<[usize; 4]> {
        let cfg = &self.model.config;
        match *self.tape.shape(g) {
            [b, t, k, c] if c == cfg.channels() && t == cfg.frames && k == cfg.tokens => Ok([b, t, k, c]),
            ref s => Err(shape_err!(
                "input {s:?} does not match [B, {}, {}, {}]",
                cfg.frames,
                cfg.tokens,
                cfg.channels()
            )),
        }
    }

    /// All first-layer expert outputs, `[B, T, K, n1, d]`.
    pub fn experts(&mut self, g: Var) -> Result<Var> {
        let [b, t, k, _] = self.dims(g)?;
        let (n1, d) = (self.model.config.n1, self.model.config.d);
        // one wide product instead of n1 narrow ones
        let experts = self.model.params.experts1.clone();
        let ws: Vec<Var> = experts.iter().map(|l| self.param(l.w)).collect();
        let bs: Vec<Var> = experts.iter().map(|l| self.param(l.b)).collect();
        let w = self.tape.concat(&ws, 1)?;
        let bias = self.tape.concat(&bs, 0)?;
        let y = self.tape.linear(g, w, bias)?;
        let y = self.tape.gelu(y);
        self.tape.reshape(y, &[b, t, k, n1, d])
    }

    /// First-layer gate on `[B, T, K, 4d]` features with the given head.
    pub fn gate1(&mut self, g: Var, head: MlpP) -> Result<Var> {
        let s = self.tape.shape(g).to_vec();
        let (n1, n2) = (self.model.config.n1, self.model.config.n2);
        let logits = self.mlp(g, head)?;
        let logits = self.tape.reshape(logits, &[s[0], s[1], s[2], n1, n2])?;
        self.tape.softmax(logits, 3)
    }

    /// Mixed volumes `F^(1..3)`, each `[B, T, K, d]`.
    pub fn mix(&mut self, experts: Var, w1: Var) -> Result<[Var; 3]> {
        let s = self.tape.shape(experts).to_vec();
        let [b, t, k, n1, d] = s[..] else {
            return Err(shape_err!("expert bank must be rank 5, got {s:?}"));
        };
        let n2 = self.model.config.n2;
        let rows = b * t * k;
        let fe = self.tape.reshape(experts, &[rows, n1, d])?;
        let w = self.tape.reshape(w1, &[rows, n1, n2])?;
        let mixed = self.tape.bmm(w, true, fe, false)?;
        let mut out = [mixed; 3];
        for (j, slot) in out.iter_mut().enumerate() {
            let m = self.tape.slice(mixed, 1, j, 1)?;
            *slot = self.tape.reshape(m, &[b, t, k, d])?;
        }
        Ok(out)
    }

    /// Token mean-pool, per-frame MLP and frame mean: (`[B, T, d]`, `[B, d]`).
    pub fn pooled_expert(&mut self, f: Var, head: MlpP) -> Result<(Var, Var)> {
        let tokens = self.tape.mean(f, 2)?;
        let mut frames = self.mlp(tokens, head)?;
        if self.model.config.embed_norm {
            frames = self.tape.rms_norm(frames, EMBED_NORM_EPS)?;
        }
        let pooled = self.tape.mean(frames, 1)?;
        Ok((frames, pooled))
    }

    /// Temporal expert: (frame tokens `[B, T, d]`, `f_T` `[B, d]`).
    pub fn temporal(&mut self, f3: Var) -> Result<(Var, Var)> {
        let cfg = &self.model.config;
        let (d, heads, op) = (cfg.d, cfg.heads, cfg.temporal_op);
        let p = self.model.params.temporal.clone();
        let tokens = self.tape.mean(f3, 2)?;
        let x = self.mlp(tokens, p.frame_mlp)?;
        let [b, t, _] = self.tape.shape(x)[..] else {
            unreachable!("frame tokens are rank 3")
        };

        if op == TemporalOp::MeanPool {
            let m = self.tape.mean(x, 1)?;
            let f_t = self.linear(m, p.fc)?;
            return Ok((x, self.embed_norm(f_t)?));
        }

        let shifted = if op == TemporalOp::ShiftProduct {
            let pad = self.tape.constant(Tensor::zeros(&[b, 1, d]));
            Some(if t == 1 {
                pad
            } else {
                let head = self.tape.slice(x, 1, 0, t - 1)?;
                self.tape.concat(&[pad, head], 1)?
            })
        } else {
            None
        };

        let q0 = self.param(p.q0);
        let q = self.tape.expand(q0, b)?;
        let mut q = self.tape.reshape(q, &[b, 1, d])?;
        for block in &p.blocks {
            let pos = self.param(block.pos);
            let xp = self.tape.add_suffix(x, pos)?;
            let mut y = self.linear(xp, block.temp)?;
            if let (Some(prev), Some(u), Some(v)) = (shifted, block.pair_u, block.pair_v) {
                let (u, v) = (self.param(u), self.param(v));
                let xu = self.tape.linear_nobias(x, u)?;
                let pv = self.tape.linear_nobias(prev, v)?;
                let pair = self.tape.mul(xu, pv)?;
                y = self.tape.add(y, pair)?;
            }
            let av = self.attention_vars(&block.attn);
            let attended = mhsa_forward(&mut self.tape, q, y, y, heads, &av)?;
            let q_tilde = self.tape.add(q, attended)?;
            let refined = self.mlp(q_tilde, block.mlp)?;
            q = self.tape.add(q_tilde, refined)?;
        }
        let q = self.tape.reshape(q, &[b, d])?;
        let f_t = self.linear(q, p.fc)?;
        Ok((x, self.embed_norm(f_t)?))
    }

    /// Second-layer gate from the mixed volumes, `[B, 3]`.
    pub fn gate2(&mut self, mixed: [Var; 3]) -> Result<Var> {
        let cat = self.tape.concat(&mixed, 3)?;
        let pooled = self.pool_tokens_frames(cat)?;
        let logits = self.mlp(pooled, self.model.params.gate2)?;
        self.tape.softmax(logits, 1)
    }

    /// Mean over frames and tokens: `[B, T, K, C] → [B, C]`.
    pub fn pool_tokens_frames(&mut self, x: Var) -> Result<Var> {
        let s = self.tape.shape(x).to_vec();
        let flat = self.tape.reshape(x, &[s[0], s[1] * s[2], s[3]])?;
        self.tape.mean(flat, 1)
    }

    /// `f = Σ_j w2_j f_j` row-wise.
    pub fn fuse(&mut self, f_l: Var, f_s: Var, f_t: Var, w2: Var) -> Result<Var> {
        let [b, d] = self.tape.shape(f_l)[..] else {
            return Err(shape_err!("embeddings must be [B, d]"));
        };
        let parts: Vec<Var> = [f_l, f_s, f_t]
            .into_iter()
            .map(|v| self.tape.reshape(v, &[b, 1, d]))
            .collect::<Result<_>>()?;
        let stack = self.tape.concat(&parts, 1)?;
        let w = self.tape.reshape(w2, &[b, 1, 3])?;
        let f = self.tape.bmm(w, false, stack, false)?;
        self.tape.reshape(f, &[b, d])
    }

    /// Everything downstream of the gates.
    pub fn heads(&mut self, experts: Var, w1: Var, w2: Option<Var>) -> Result<Embeddings> {
        let mixed = self.mix(experts, w1)?;
        let p = &self.model.params;
        let (long, short) = (p.long, p.short);
        let (frames_l, f_l) = self.pooled_expert(mixed[0], long)?;
        let (frames_s, f_s) = self.pooled_expert(mixed[1], short)?;
        let (frames_t, f_t) = self.temporal(mixed[2])?;
        let w2 = match w2 {
            Some(w) => w,
            None => self.gate2(mixed)?,
        };
        let f = self.fuse(f_l, f_s, f_t, w2)?;
        Ok(Embeddings {
            w1,
            w2,
            frames_l,
            frames_s,
            frames_t,
            f_l,
            f_s,
            f_t,
            f,
        })
    }

    /// Single-input forward. Returns the embeddings and the expert bank,
    /// which dual-mode passes over the same batch can reuse.
    pub fn forward_single(&mut self, g: Var) -> Result<(Embeddings, Var)> {
        let experts = self.experts(g)?;
        let head = self.model.params.gate1;
        let w1 = self.gate1(g, head)?;
        Ok((self.heads(experts, w1, None)?, experts))
    }

    /// Condition a gallery/query pair batch (`[P, T, K, 4d]` each) on each
    /// other and produce replacement gate outputs for both sides.
    pub fn dual_gates(&mut self, g_gallery: Var, g_query: Var) -> Result<DualGates> {
        let [p, t, k, c] = self.dims(g_gallery)?;
        if self.tape.shape(g_query) != self.tape.shape(g_gallery) {
            return Err(shape_err!(
                "dual inputs differ: {:?} vs {:?}",
                self.tape.shape(g_gallery),
                self.tape.shape(g_query)
            ));
        }
        let dual = self.model.params.dual.clone();
        let av = match &dual.attn {
            DualAttentionP::Free(a) => self.attention_vars(a),
            DualAttentionP::Symmetric(s) => self.sym_attention_vars(s)?,
        };
        let cat = self.tape.concat(&[g_gallery, g_query], 3)?;
        let seq = self.tape.reshape(cat, &[p * t, k, 2 * c])?;
        let heads = self.model.config.heads;
        let mixed = mhsa_forward(&mut self.tape, seq, seq, seq, heads, &av)?;
        let mixed = self.tape.reshape(mixed, &[p, t, k, 2 * c])?;
        let cond_g = self.tape.slice(mixed, 3, 0, c)?;
        let cond_q = self.tape.slice(mixed, 3, c, c)?;

        let w1_g = self.gate1(cond_g, dual.gate1[0])?;
        let w1_q = self.gate1(cond_q, dual.gate1[1])?;
        let w1 = self.tape.concat(&[w1_g, w1_q], 0)?;
        let mut w2s = [w1; 2];
        for (slot, (cond, head)) in w2s.iter_mut().zip([(cond_g, dual.gate2[0]), (cond_q, dual.gate2[1])]) {
            let pooled = self.pool_tokens_frames(cond)?;
            let logits = self.mlp(pooled, head)?;
            *slot = self.tape.softmax(logits, 1)?;
        }
        let w2 = self.tape.concat(&w2s, 0)?;
        Ok(DualGates {
            g_gallery: cond_g,
            g_query: cond_q,
            w1,
            w2,
        })
    }

    /// Dual-input forward for `pairs` of `(gallery, query)` batch rows.
    /// Output rows are the `P` gallery sides followed by the `P` query sides.
    pub fn forward_dual(&mut self, g: Var, experts: Var, pairs: &[(usize, usize)]) -> Result<(Embeddings, DualGates)> {
        let gi: Vec<usize> = pairs.iter().map(|p| p.0).collect();
        let qi: Vec<usize> = pairs.iter().map(|p| p.1).collect();
        let g_gallery = self.tape.select(g, &gi)?;
        let g_query = self.tape.select(g, &qi)?;
        let gates = self.dual_gates(g_gallery, g_query)?;
        let rows: Vec<usize> = gi.iter().chain(&qi).copied().collect();
        let fe = self.tape.select(experts, &rows)?;
        let emb = self.heads(fe, gates.w1, Some(gates.w2))?;
        Ok((emb, gates))
    }

    /// Classifier logits `[B, num_identities]`.
    pub fn logits(&mut self, f: Var) -> Result<Var> {
        let head = self.model.params.classifier;
        self.linear(f, head)
    }
}

#[cfg(test)]
mod tests {
    use super::super::ModelConfig;
    use super::*;

    fn tiny() -> Model {
        Model::new(ModelConfig {
            d: 4,
            tokens: 5,
            frames: 3,
            n1: 2,
            blocks: 1,
            heads: 2,
            num_identities: 3,
            seed: 3,
            ..ModelConfig::default()
        })
        .unwrap()
    }

    #[test]
    fn batched_rows_are_independent() {
        let model = tiny();
        let g = Tensor::from_fn(&[2, 3, 5, 16], |i| ((i * 37 % 23) as f64 / 11.0 - 1.0).sin());
        let mut s = Session::new(&model, false);
        let gv = s.input(g.clone());
        let (emb, _) = s.forward_single(gv).unwrap();
        let both = s.value(emb.f).clone();

        let row1 = Tensor::new(vec![1, 3, 5, 16], g.data()[g.numel() / 2..].to_vec()).unwrap();
        let mut s1 = Session::new(&model, false);
        let gv1 = s1.input(row1);
        let (emb1, _) = s1.forward_single(gv1).unwrap();
        for (a, b) in both.data()[4..].iter().zip(s1.value(emb1.f).data()) {
            assert!((a - b).abs() < 1e-12);
        }
    }

    #[test]
    fn wrong_channels_rejected() {
        let model = tiny();
        let mut s = Session::new(&model, false);
        let gv = s.input(Tensor::zeros(&[1, 3, 5, 12]));
        assert!(s.forward_single(gv).is_err());
    }
}

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::feature_store::check_token_grid;

/// How the temporal expert turns per-frame tokens into decoder memory.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TemporalOp {
    /// Positional embedding + linear map + a bilinear term pairing each
    /// frame with its predecessor.
    ShiftProduct,
    /// Positional embedding + linear map only.
    Linear,
    /// No decoder: `f_T = FC(mean over frames)`.
    MeanPool,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ModelConfig {
    /// Per-layer embedding width; inputs carry `4 * d` channels.
    pub d: usize,
    /// Tokens per frame (CLS + square patch grid).
    pub tokens: usize,
    pub frames: usize,
    pub n1: usize,
    pub n2: usize,
    /// Decoder blocks in the temporal expert.
    pub blocks: usize,
    pub heads: usize,
    pub num_identities: usize,
    pub alpha: f64,
    pub beta: f64,
    pub margin: f64,
    /// Central band width, in percent, for dual-input rescoring.
    pub q: f64,
    pub lr: f64,
    pub seed: u64,
    pub temporal_op: TemporalOp,
    /// Use one gating head for both inputs of a pair and a swap-symmetric
    /// attention block.
    pub share_dual_heads: bool,
    /// RMS-normalize the expert embeddings (per frame for the long- and
    /// short-term experts, `f_T` for the temporal one) so the second gate
    /// compares directions rather than magnitudes.
    pub embed_norm: bool,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            d: 16,
            tokens: 17,
            frames: 16,
            n1: 8,
            n2: 3,
            blocks: 4,
            heads: 2,
            num_identities: 8,
            alpha: 0.5,
            beta: 1.0,
            margin: 4.0,
            q: 20.0,
            lr: 1e-3,
            seed: 0,
            temporal_op: TemporalOp::ShiftProduct,
            share_dual_heads: false,
            embed_norm: true,
        }
    }
}

impl ModelConfig {
    pub fn channels(&self) -> usize {
        4 * self.d
    }

    pub fn validate(&self) -> Result<()> {
        let fail = |m: String| Err(Error::Config(m));
        if self.n2 != 3 {
            return fail(format!("n2 must be 3, got {}", self.n2));
        }
        if self.n1 == 0 {
            return fail("n1 must be at least 1".into());
        }
        if self.blocks == 0 {
            return fail("the temporal decoder needs at least one block".into());
        }
        if self.d == 0 || self.frames == 0 || self.num_identities == 0 {
            return fail("d, frames and num_identities must be positive".into());
        }
        if self.heads == 0 || !self.d.is_multiple_of(self.heads) {
            return fail(format!("d = {} not divisible by heads = {}", self.d, self.heads));
        }
        if self.share_dual_heads && self.heads != 1 && !self.heads.is_multiple_of(2) {
            return fail(format!(
                "shared dual heads need 1 or an even number of heads, got {}",
                self.heads
            ));
        }
        if !(self.alpha >= 0.0 && self.beta >= 0.0 && self.alpha.is_finite() && self.beta.is_finite()) {
            return fail(format!(
                "alpha ({}) and beta ({}) must be finite and >= 0",
                self.alpha, self.beta
            ));
        }
        if !(self.margin > 0.0 && self.margin.is_finite()) {
            return fail(format!("margin must be positive, got {}", self.margin));
        }
        if !(0.0..=100.0).contains(&self.q) {
            return fail(format!("q must lie in [0, 100], got {}", self.q));
        }
        if !(self.lr >= 0.0 && self.lr.is_finite()) {
            return fail(format!("lr must be finite and >= 0, got {}", self.lr));
        }
        check_token_grid(self.tokens).map_err(|e| Error::Config(e.to_string()))?;
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn defaults_are_valid() {
        let c = ModelConfig::default();
        c.validate().unwrap();
        assert_eq!((c.frames, c.n1, c.n2, c.blocks), (16, 8, 3, 4));
        assert_eq!((c.alpha, c.beta, c.margin, c.q), (0.5, 1.0, 4.0, 20.0));
    }

    #[test]
    fn invariants_enforced() {
        let bad = [
            ModelConfig {
                n2: 2,
                ..Default::default()
            },
            ModelConfig {
                n1: 0,
                ..Default::default()
            },
            ModelConfig {
                blocks: 0,
                ..Default::default()
            },
            ModelConfig {
                alpha: -0.1,
                ..Default::default()
            },
            ModelConfig {
                margin: 0.0,
                ..Default::default()
            },
            ModelConfig {
                q: 100.5,
                ..Default::default()
            },
            ModelConfig {
                heads: 3,
                ..Default::default()
            },
            ModelConfig {
                tokens: 11,
                ..Default::default()
            },
        ];
        for c in bad {
            assert!(matches!(c.validate(), Err(Error::Config(_))), "{c:?}");
        }
    }

    #[test]
    fn unknown_keys_rejected() {
        assert!(serde_json::from_str::<ModelConfig>(r#"{"d": 4, "dd": 1}"#).is_err());
        let c: ModelConfig = serde_json::from_str(r#"{"d": 4}"#).unwrap();
        assert_eq!(c.d, 4);
        assert_eq!(c.n1, 8);
    }
}

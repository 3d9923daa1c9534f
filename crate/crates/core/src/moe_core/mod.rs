//! Hierarchical mixture of biometric experts.
//!
//! A `[T, K, 4d]` feature volume passes through `n1` first-layer experts,
//! whose per-token outputs are mixed by a token-wise gate into three volumes.
//! Those feed a long-term (body shape), a short-term (appearance) and a
//! temporal (motion) expert; a second gate weighs the three embeddings into
//! the final one.
//!
//! [`graph::Session`] builds the batched, differentiable version used for
//! training. The free functions in this module evaluate single stages on
//! plain tensors.

pub mod checkpoint;
mod config;
pub mod graph;
mod params;
mod stages;

pub use config::{ModelConfig, TemporalOp};
pub use graph::{DualGates, Embeddings, Session, EMBED_NORM_EPS};
pub use params::{
    AttentionP, DecoderBlockP, DualAttentionP, DualP, LinearP, MlpP, ModelParams, ParamId, ParamStore, SymAttentionP,
    SymProjP, TemporalP,
};
pub use stages::{
    check_simplex, first_layer_forward, fuse_embedding, gate1_forward, gate2_forward, long_term_forward, mix_layers,
    short_term_forward, temporal_forward, BiometricEmbedding, ForwardOutput, FrameEmbeddings, GatingTensor1,
    SIMPLEX_TOL,
};

use crate::error::Result;

#[derive(Clone, Debug)]
pub struct Model {
    pub config: ModelConfig,
    pub store: ParamStore,
    pub params: ModelParams,
}

impl Model {
    /// Validate `config` and initialize parameters from `config.seed`.
    pub fn new(config: ModelConfig) -> Result<Self> {
        let mut store = ParamStore::new();
        let params = ModelParams::init(&config, &mut store)?;
        Ok(Self { config, store, params })
    }
}

pub(crate) use stages::extract as stages_extract;
pub use stages::stack as stack_volumes;

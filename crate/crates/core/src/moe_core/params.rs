//! Named parameter storage and the layer layout of the model.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::config::{ModelConfig, TemporalOp};
use crate::error::{Error, Result};
use crate::numerics::Tensor;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct ParamId(pub(crate) usize);

impl ParamId {
    pub fn index(self) -> usize {
        self.0
    }
}

/// Ordered collection of named tensors.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct ParamStore {
    names: Vec<String>,
    tensors: Vec<Tensor>,
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn push(&mut self, name: impl Into<String>, t: Tensor) -> ParamId {
        self.names.push(name.into());
        self.tensors.push(t);
        ParamId(self.tensors.len() - 1)
    }

    pub fn len(&self) -> usize {
        self.tensors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tensors.is_empty()
    }

    pub fn get(&self, id: ParamId) -> &Tensor {
        &self.tensors[id.0]
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut Tensor {
        &mut self.tensors[id.0]
    }

    pub fn name(&self, id: ParamId) -> &str {
        &self.names[id.0]
    }

    pub fn find(&self, name: &str) -> Option<ParamId> {
        self.names.iter().position(|n| n == name).map(ParamId)
    }

    pub fn ids(&self) -> impl Iterator<Item = ParamId> {
        (0..self.tensors.len()).map(ParamId)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Tensor)> {
        self.names.iter().map(String::as_str).zip(&self.tensors)
    }

    pub fn tensors(&self) -> &[Tensor] {
        &self.tensors
    }

    pub fn tensors_mut(&mut self) -> &mut [Tensor] {
        &mut self.tensors
    }

    pub fn num_scalars(&self) -> usize {
        self.tensors.iter().map(Tensor::numel).sum()
    }

    pub fn all_finite(&self) -> bool {
        self.tensors.iter().all(Tensor::is_finite)
    }

    /// Overwrite every tensor from `other`, which must hold the same names
    /// and shapes.
    pub fn load_from(&mut self, other: &[(String, Tensor)]) -> Result<()> {
        for (i, name) in self.names.iter().enumerate() {
            let (_, t) = other
                .iter()
                .find(|(n, _)| n == name)
                .ok_or_else(|| Error::Config(format!("checkpoint lacks parameter {name:?}")))?;
            if t.shape() != self.tensors[i].shape() {
                return Err(Error::Shape(format!(
                    "parameter {name:?}: checkpoint shape {:?}, model shape {:?}",
                    t.shape(),
                    self.tensors[i].shape()
                )));
            }
            self.tensors[i] = t.clone();
        }
        Ok(())
    }

    /// Set every parameter to zero.
    pub fn zero_all(&mut self) {
        for t in &mut self.tensors {
            t.data_mut().iter_mut().for_each(|v| *v = 0.0);
        }
    }
}

#[derive(Clone, Copy, Debug)]
pub struct LinearP {
    /// `[in, out]`
    pub w: ParamId,
    /// `[out]`
    pub b: ParamId,
}

/// `Linear → GELU → Linear`.
#[derive(Clone, Copy, Debug)]
pub struct MlpP {
    pub l1: LinearP,
    pub l2: LinearP,
}

#[derive(Clone, Copy, Debug)]
pub struct AttentionP {
    pub q: LinearP,
    pub k: LinearP,
    pub v: LinearP,
    pub o: LinearP,
}

/// Swap-symmetric attention over `[x_a, x_b]`: every projection is
/// `[[A, B], [B, A]]` with bias `[b, b]`.
#[derive(Clone, Copy, Debug)]
pub struct SymProjP {
    pub a: ParamId,
    pub b: ParamId,
    pub bias: ParamId,
}

#[derive(Clone, Copy, Debug)]
pub struct SymAttentionP {
    pub q: SymProjP,
    pub k: SymProjP,
    pub v: SymProjP,
    pub o: SymProjP,
}

#[derive(Clone, Copy, Debug)]
pub enum DualAttentionP {
    Free(AttentionP),
    Symmetric(SymAttentionP),
}

#[derive(Clone, Debug)]
pub struct DecoderBlockP {
    /// Temporal positional embedding `[T, d]`.
    pub pos: ParamId,
    pub temp: LinearP,
    /// Bilinear pairing of frame t with frame t−1 (shift-product only).
    pub pair_u: Option<ParamId>,
    pub pair_v: Option<ParamId>,
    pub attn: AttentionP,
    pub mlp: MlpP,
}

#[derive(Clone, Debug)]
pub struct TemporalP {
    pub frame_mlp: MlpP,
    /// Learned initial query `q_0`, `[d]`.
    pub q0: ParamId,
    pub blocks: Vec<DecoderBlockP>,
    pub fc: LinearP,
}

#[derive(Clone, Debug)]
pub struct DualP {
    pub attn: DualAttentionP,
    /// Gate heads for the gallery and query inputs (the same ids when shared).
    pub gate1: [MlpP; 2],
    pub gate2: [MlpP; 2],
}

#[derive(Clone, Debug)]
pub struct ModelParams {
    /// First-layer experts, each `Linear(4d → d)` followed by GELU.
    pub experts1: Vec<LinearP>,
    pub gate1: MlpP,
    pub long: MlpP,
    pub short: MlpP,
    pub temporal: TemporalP,
    pub gate2: MlpP,
    pub classifier: LinearP,
    pub dual: DualP,
}

struct Init<'a> {
    store: &'a mut ParamStore,
    rng: ChaCha8Rng,
}

impl Init<'_> {
    fn uniform(&mut self, name: String, shape: &[usize], bound: f64) -> ParamId {
        let rng = &mut self.rng;
        let t = Tensor::from_fn(shape, |_| rng.random_range(-bound..=bound));
        self.store.push(name, t)
    }

    fn linear(&mut self, name: &str, fan_in: usize, fan_out: usize) -> LinearP {
        let bound = 1.0 / (fan_in as f64).sqrt();
        LinearP {
            w: self.uniform(format!("{name}.w"), &[fan_in, fan_out], bound),
            b: self.uniform(format!("{name}.b"), &[fan_out], bound),
        }
    }

    fn mlp(&mut self, name: &str, fan_in: usize, hidden: usize, fan_out: usize) -> MlpP {
        MlpP {
            l1: self.linear(&format!("{name}.l1"), fan_in, hidden),
            l2: self.linear(&format!("{name}.l2"), hidden, fan_out),
        }
    }

    /// Gate MLPs start with a zero output layer, so every gate is uniform at
    /// initialization.
    fn gate(&mut self, name: &str, fan_in: usize, hidden: usize, fan_out: usize) -> MlpP {
        let l1 = self.linear(&format!("{name}.l1"), fan_in, hidden);
        let zero = |store: &mut ParamStore, suffix: &str, shape: &[usize]| {
            store.push(format!("{name}.l2.{suffix}"), Tensor::zeros(shape))
        };
        let l2 = LinearP {
            w: zero(self.store, "w", &[hidden, fan_out]),
            b: zero(self.store, "b", &[fan_out]),
        };
        MlpP { l1, l2 }
    }

    fn attention(&mut self, name: &str, dim: usize) -> AttentionP {
        AttentionP {
            q: self.linear(&format!("{name}.q"), dim, dim),
            k: self.linear(&format!("{name}.k"), dim, dim),
            v: self.linear(&format!("{name}.v"), dim, dim),
            o: self.linear(&format!("{name}.o"), dim, dim),
        }
    }

    fn sym_proj(&mut self, name: &str, half: usize) -> SymProjP {
        let bound = 1.0 / ((2 * half) as f64).sqrt();
        SymProjP {
            a: self.uniform(format!("{name}.a"), &[half, half], bound),
            b: self.uniform(format!("{name}.b"), &[half, half], bound),
            bias: self.uniform(format!("{name}.bias"), &[half], bound),
        }
    }
}

impl ModelParams {
    /// Allocate and initialize every parameter into `store`.
    /// Weights and biases are drawn from `U(-1/√fan_in, 1/√fan_in)`, except
    /// the gate output layers, which start at zero.
    pub fn init(config: &ModelConfig, store: &mut ParamStore) -> Result<Self> {
        config.validate()?;
        let d = config.d;
        let c = config.channels();
        let routes = config.n1 * config.n2;
        let mut init = Init {
            store,
            rng: ChaCha8Rng::seed_from_u64(config.seed),
        };

        let experts1 = (0..config.n1)
            .map(|i| init.linear(&format!("expert1.{i}"), c, d))
            .collect();
        let gate1 = init.gate("gate1", c, d, routes);
        let long = init.mlp("long", d, d, d);
        let short = init.mlp("short", d, d, d);

        let frame_mlp = init.mlp("temporal.frame", d, d, d);
        let q0 = init.uniform("temporal.q0".into(), &[d], 1.0 / (d as f64).sqrt());
        let mut blocks = Vec::new();
        if config.temporal_op != TemporalOp::MeanPool {
            for i in 0..config.blocks {
                let name = format!("temporal.block{i}");
                let pos = init.uniform(format!("{name}.pos"), &[config.frames, d], 1.0 / (d as f64).sqrt());
                let temp = init.linear(&format!("{name}.temp"), d, d);
                let (pair_u, pair_v) = if config.temporal_op == TemporalOp::ShiftProduct {
                    let bound = 1.0 / (d as f64).sqrt();
                    (
                        Some(init.uniform(format!("{name}.pair_u"), &[d, d], bound)),
                        Some(init.uniform(format!("{name}.pair_v"), &[d, d], bound)),
                    )
                } else {
                    (None, None)
                };
                let attn = init.attention(&format!("{name}.attn"), d);
                let mlp = init.mlp(&format!("{name}.mlp"), d, d, d);
                blocks.push(DecoderBlockP {
                    pos,
                    temp,
                    pair_u,
                    pair_v,
                    attn,
                    mlp,
                });
            }
        }
        let fc = init.linear("temporal.fc", d, d);
        let temporal = TemporalP {
            frame_mlp,
            q0,
            blocks,
            fc,
        };

        let gate2 = init.gate("gate2", 3 * d, d, 3);
        let classifier = init.linear("classifier", d, config.num_identities);

        let dual = if config.share_dual_heads {
            let attn = DualAttentionP::Symmetric(SymAttentionP {
                q: init.sym_proj("dual.attn.q", c),
                k: init.sym_proj("dual.attn.k", c),
                v: init.sym_proj("dual.attn.v", c),
                o: init.sym_proj("dual.attn.o", c),
            });
            let g1 = init.gate("dual.gate1", c, d, routes);
            let g2 = init.gate("dual.gate2", c, d, 3);
            DualP {
                attn,
                gate1: [g1, g1],
                gate2: [g2, g2],
            }
        } else {
            DualP {
                attn: DualAttentionP::Free(init.attention("dual.attn", 2 * c)),
                gate1: [
                    init.gate("dual.gate1.gallery", c, d, routes),
                    init.gate("dual.gate1.query", c, d, routes),
                ],
                gate2: [
                    init.gate("dual.gate2.gallery", c, d, 3),
                    init.gate("dual.gate2.query", c, d, 3),
                ],
            }
        };

        Ok(Self {
            experts1,
            gate1,
            long,
            short,
            temporal,
            gate2,
            classifier,
            dual,
        })
    }
}

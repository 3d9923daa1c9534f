#![allow(dead_code)]

use biomoe::evaluator::{cmc_curve, map_score, rank_relevance, Relevance};
use biomoe::losses::{ce_loss, contrastive_loss, lts_loss, sts_loss, total_loss, ts_loss, LossTerms, PairSample};
use biomoe::moe_core::{BiometricEmbedding, FrameEmbeddings};
use biomoe::numerics::Tensor;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

pub fn uniform(rng: &mut ChaCha8Rng, shape: &[usize], scale: f64) -> Tensor {
    Tensor::from_fn(shape, |_| rng.random_range(-scale..scale))
}

pub fn assert_close(a: &[f64], b: &[f64], tol: f64, what: &str) {
    assert_eq!(a.len(), b.len(), "{what}: length");
    for (i, (x, y)) in a.iter().zip(b).enumerate() {
        assert!((x - y).abs() <= tol, "{what}[{i}]: {x} vs {y} (tol {tol})");
    }
}

/// `x · w + b` over rows of length `w.len() / b.len()`.
pub fn affine(x: &[f64], w: &Tensor, b: &Tensor) -> Vec<f64> {
    let (fan_in, fan_out) = (w.shape()[0], w.shape()[1]);
    (0..fan_out)
        .map(|o| b.data()[o] + (0..fan_in).map(|i| x[i] * w.data()[i * fan_out + o]).sum::<f64>())
        .collect()
}

pub fn gelu(x: f64) -> f64 {
    0.5 * x * (1.0 + libm::erf(x / std::f64::consts::SQRT_2))
}

pub fn softmax(x: &[f64]) -> Vec<f64> {
    let m = x.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let e: Vec<f64> = x.iter().map(|v| (v - m).exp()).collect();
    let s: f64 = e.iter().sum();
    e.iter().map(|v| v / s).collect()
}

use biomoe::moe_core::{AttentionP, LinearP, MlpP, Model, ModelConfig};

pub fn lin(model: &Model, x: &[f64], l: LinearP) -> Vec<f64> {
    affine(x, model.store.get(l.w), model.store.get(l.b))
}

pub fn mlp(model: &Model, x: &[f64], m: MlpP) -> Vec<f64> {
    let h: Vec<f64> = lin(model, x, m.l1).into_iter().map(gelu).collect();
    lin(model, &h, m.l2)
}

/// Loop-based attention of `queries` over `keys` (used as values too).
pub fn attention(
    model: &Model,
    queries: &[Vec<f64>],
    keys: &[Vec<f64>],
    heads: usize,
    a: &AttentionP,
) -> Vec<Vec<f64>> {
    let dim = queries[0].len();
    let hd = dim / heads;
    let qs: Vec<Vec<f64>> = queries.iter().map(|x| lin(model, x, a.q)).collect();
    let ks: Vec<Vec<f64>> = keys.iter().map(|x| lin(model, x, a.k)).collect();
    let vs: Vec<Vec<f64>> = keys.iter().map(|x| lin(model, x, a.v)).collect();
    qs.iter()
        .map(|q| {
            let mut merged = vec![0.0; dim];
            for h in 0..heads {
                let r = h * hd..(h + 1) * hd;
                let scores: Vec<f64> = ks
                    .iter()
                    .map(|k| r.clone().map(|c| q[c] * k[c]).sum::<f64>() / (hd as f64).sqrt())
                    .collect();
                let w = softmax(&scores);
                for c in r {
                    merged[c] = (0..ks.len()).map(|j| w[j] * vs[j][c]).sum();
                }
            }
            lin(model, &merged, a.o)
        })
        .collect()
}

/// Overwrite every parameter with uniform draws in `[-scale, scale)`.
pub fn randomize(model: &mut Model, seed: u64, scale: f64) {
    let mut r = rng(seed);
    for t in model.store.tensors_mut() {
        *t = uniform(&mut r, t.shape(), scale);
    }
}

pub fn tiny(seed: u64) -> ModelConfig {
    ModelConfig {
        d: 4,
        tokens: 5,
        frames: 3,
        n1: 3,
        blocks: 2,
        heads: 2,
        num_identities: 4,
        seed,
        ..ModelConfig::default()
    }
}

/// Token `k` of frame `t` in a `[T, K, C]` tensor.
pub fn token(x: &Tensor, t: usize, k: usize) -> Vec<f64> {
    let (kk, c) = (x.shape()[1], x.shape()[2]);
    x.data()[(t * kk + k) * c..(t * kk + k + 1) * c].to_vec()
}

/// Mean over tokens of frame `t`.
pub fn token_mean(x: &Tensor, t: usize) -> Vec<f64> {
    let (kk, c) = (x.shape()[1], x.shape()[2]);
    let mut m = vec![0.0; c];
    for k in 0..kk {
        for (a, v) in m.iter_mut().zip(token(x, t, k)) {
            *a += v / kk as f64;
        }
    }
    m
}

pub fn rms_normalize(x: &[f64], eps: f64) -> Vec<f64> {
    let ms = x.iter().map(|v| v * v).sum::<f64>() / x.len() as f64;
    let r = (ms + eps).sqrt();
    x.iter().map(|v| v / r).collect()
}

/// Pair with every expert embedding set to `f` and every frame matrix to `fr`.
pub fn pair_sample(f: [&[f64]; 2], fr: [&[f64]; 2], d: usize, subjects: [u32; 2]) -> PairSample {
    let emb = |v: &[f64]| BiometricEmbedding {
        f_l: v.to_vec(),
        f_s: v.to_vec(),
        f_t: v.to_vec(),
        f: v.to_vec(),
        w2: [1.0 / 3.0; 3],
    };
    let frames = |rows: &[f64]| {
        let t = Tensor::new(vec![rows.len() / d, d], rows.to_vec()).unwrap();
        FrameEmbeddings {
            f_l: t.clone(),
            f_s: t.clone(),
            f_t: t,
        }
    };
    PairSample {
        embeddings: [emb(f[0]), emb(f[1])],
        frames: [frames(fr[0]), frames(fr[1])],
        subjects,
    }
}

/// Worked loss examples as `(name, computed, expected)`.
pub fn loss_hand_values() -> Vec<(&'static str, f64, f64)> {
    let lts = pair_sample([&[1.0], &[1.0]], [&[0.0, 2.0], &[1.0, 1.0]], 1, [0, 0]);
    let sts = pair_sample([&[0.0], &[0.0]], [&[0.0, 1.0], &[0.0, 3.0]], 1, [0, 0]);
    let ts = pair_sample([&[1.0, 0.0], &[0.0, 1.0]], [&[0.0, 0.0], &[0.0, 0.0]], 2, [0, 0]);
    let same = pair_sample([&[1.0, 2.0], &[1.0, 2.0]], [&[0.0, 0.0], &[0.0, 0.0]], 2, [0, 1]);
    let far = pair_sample([&[0.0, 0.0], &[3.0, 4.0]], [&[0.0, 0.0], &[0.0, 0.0]], 2, [0, 1]);
    let ones = LossTerms {
        ce: 1.0,
        lts: 1.0,
        sts: 1.0,
        ts: 1.0,
        contrastive: 1.0,
    };
    vec![
        ("ce", ce_loss(&[1.0, 0.0], 0).unwrap(), (1.0 + (-1f64).exp()).ln()),
        ("ce_uniform", ce_loss(&[0.3; 5], 4).unwrap(), 5f64.ln()),
        ("lts", lts_loss(&lts).unwrap(), 2.0),
        ("sts", sts_loss(&sts).unwrap(), 5.0),
        ("ts", ts_loss(&ts).unwrap(), 2.0),
        ("contrastive_margin", contrastive_loss(&same, 4.0).unwrap(), 8.0),
        ("contrastive_saturated", contrastive_loss(&far, 4.0).unwrap(), 0.0),
        ("total", total_loss(&ones, 0.5, 1.0), 3.5),
        (
            "total_ablation",
            total_loss(&LossTerms { ce: 0.7, ..ones }, 0.0, 0.0),
            0.7,
        ),
    ]
}

/// CMC and mAP straight from scores by counting, without sorting. Queries
/// with no relevant entry are skipped.
pub fn brute_force_metrics(scores: &[Vec<f64>], relevance: &[Vec<Relevance>]) -> (Vec<f64>, f64) {
    let mut firsts = Vec::new();
    let mut aps = Vec::new();
    let mut len = 0;
    for (s, rel) in scores.iter().zip(relevance) {
        let kept: Vec<usize> = (0..s.len()).filter(|&i| rel[i] != Relevance::Excluded).collect();
        let rank = |i: usize| 1 + kept.iter().filter(|&&j| s[j] > s[i] || (s[j] == s[i] && j < i)).count();
        let mut hit_ranks: Vec<usize> = kept
            .iter()
            .filter(|&&i| rel[i] == Relevance::Relevant)
            .map(|&i| rank(i))
            .collect();
        if hit_ranks.is_empty() {
            continue;
        }
        hit_ranks.sort_unstable();
        len = len.max(kept.len());
        firsts.push(hit_ranks[0]);
        let mut sum = 0.0;
        for (n, &r) in hit_ranks.iter().enumerate() {
            sum += (n + 1) as f64 / r as f64;
        }
        aps.push(sum / hit_ranks.len() as f64);
    }
    if firsts.is_empty() {
        return (vec![0.0; len], 0.0);
    }
    let cmc = (1..=len)
        .map(|k| firsts.iter().filter(|&&f| f <= k).count() as f64 / firsts.len() as f64)
        .collect();
    (cmc, aps.iter().sum::<f64>() / aps.len() as f64)
}

/// Random retrieval instance with tied integer scores: up to 4 queries and
/// 8 gallery entries.
pub fn random_instance(rng: &mut ChaCha8Rng) -> (Vec<Vec<f64>>, Vec<Vec<Relevance>>) {
    let nq = rng.random_range(1..=4);
    let ng = rng.random_range(1..=8);
    let scores = (0..nq)
        .map(|_| (0..ng).map(|_| rng.random_range(-3i32..=3) as f64 / 3.0).collect())
        .collect();
    let rel = (0..nq)
        .map(|_| {
            (0..ng)
                .map(|_| match rng.random_range(0..3) {
                    0 => Relevance::Relevant,
                    1 => Relevance::Irrelevant,
                    _ => Relevance::Excluded,
                })
                .collect()
        })
        .collect();
    (scores, rel)
}

/// CMC and mAP through the library ranking path.
pub fn library_metrics(scores: &[Vec<f64>], relevance: &[Vec<Relevance>]) -> (Vec<f64>, f64) {
    let lists: Vec<Vec<bool>> = scores
        .iter()
        .zip(relevance)
        .map(|(s, r)| rank_relevance(s, r).unwrap())
        .filter(|l| l.iter().any(|&x| x))
        .collect();
    (cmc_curve(&lists), map_score(&lists))
}

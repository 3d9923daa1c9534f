mod common;

use biomoe::numerics::{grad_check, grad_check_many, mhsa_forward, softmax_axis, AttentionVars, Tape, Tensor, Var};
use biomoe::Error;
use common::{affine, assert_close, rng, softmax, uniform};
use proptest::prelude::*;

#[test]
fn softmax_examples() {
    let s = softmax_axis(&Tensor::vector(vec![0.0, 0.0]), 0).unwrap();
    assert_eq!(s.data(), &[0.5, 0.5]);
    let s = softmax_axis(&Tensor::vector(vec![10.0, 0.0]), 0).unwrap();
    let e = (-10f64).exp();
    assert_close(s.data(), &[1.0 / (1.0 + e), e / (1.0 + e)], 1e-15, "oracle");
    assert_close(s.data(), &[0.9999546, 0.0000454], 1e-6, "rounded");
    assert!(matches!(softmax_axis(&Tensor::zeros(&[2, 2]), 2), Err(Error::Shape(_))));
}

struct Attn {
    w: Vec<Tensor>,
}

impl Attn {
    fn random(dim: usize, seed: u64) -> Self {
        let mut r = rng(seed);
        let w = (0..4)
            .flat_map(|_| [uniform(&mut r, &[dim, dim], 0.8), uniform(&mut r, &[dim], 0.8)])
            .collect();
        Self { w }
    }

    fn run(&self, q: &Tensor, kv: &Tensor, heads: usize) -> Result<Tensor, Error> {
        let mut tape = Tape::new();
        let v: Vec<Var> = self.w.iter().map(|t| tape.constant(t.clone())).collect();
        let av = AttentionVars {
            wq: v[0],
            bq: v[1],
            wk: v[2],
            bk: v[3],
            wv: v[4],
            bv: v[5],
            wo: v[6],
            bo: v[7],
        };
        let qv = tape.constant(q.clone());
        let kvv = tape.constant(kv.clone());
        let out = mhsa_forward(&mut tape, qv, kvv, kvv, heads, &av)?;
        Ok(tape.value(out).clone())
    }

    /// Loop-based single-batch reference.
    fn oracle(&self, q: &Tensor, kv: &Tensor, heads: usize) -> Vec<f64> {
        let d = q.shape()[2];
        let (nq, nk) = (q.shape()[1], kv.shape()[1]);
        let hd = d / heads;
        let row = |t: &Tensor, i: usize| t.data()[i * d..(i + 1) * d].to_vec();
        let qs: Vec<Vec<f64>> = (0..nq).map(|i| affine(&row(q, i), &self.w[0], &self.w[1])).collect();
        let ks: Vec<Vec<f64>> = (0..nk).map(|i| affine(&row(kv, i), &self.w[2], &self.w[3])).collect();
        let vs: Vec<Vec<f64>> = (0..nk).map(|i| affine(&row(kv, i), &self.w[4], &self.w[5])).collect();
        let mut out = Vec::new();
        for qi in &qs {
            let mut merged = vec![0.0; d];
            for h in 0..heads {
                let r = h * hd..(h + 1) * hd;
                let scores: Vec<f64> = ks
                    .iter()
                    .map(|k| r.clone().map(|c| qi[c] * k[c]).sum::<f64>() / (hd as f64).sqrt())
                    .collect();
                let a = softmax(&scores);
                for c in r {
                    merged[c] = (0..nk).map(|j| a[j] * vs[j][c]).sum();
                }
            }
            out.extend(affine(&merged, &self.w[6], &self.w[7]));
        }
        out
    }
}

#[test]
fn attention_matches_loop_oracle() {
    let mut r = rng(1);
    let q = uniform(&mut r, &[1, 2, 3], 1.0);
    let kv = uniform(&mut r, &[1, 2, 3], 1.0);
    let attn = Attn::random(3, 2);
    assert_close(
        attn.run(&q, &kv, 1).unwrap().data(),
        &attn.oracle(&q, &kv, 1),
        1e-10,
        "1 head",
    );

    let q = uniform(&mut r, &[1, 3, 4], 1.0);
    let kv = uniform(&mut r, &[1, 5, 4], 1.0);
    let attn = Attn::random(4, 3);
    assert_close(
        attn.run(&q, &kv, 2).unwrap().data(),
        &attn.oracle(&q, &kv, 2),
        1e-10,
        "2 heads",
    );
}

#[test]
fn attention_degenerate_cases() {
    let mut r = rng(4);
    let q = uniform(&mut r, &[1, 2, 4], 1.0);
    let kv = uniform(&mut r, &[1, 3, 4], 1.0);

    let mut zero_v = Attn::random(4, 5);
    for i in [4, 5, 6, 7] {
        zero_v.w[i] = Tensor::zeros(zero_v.w[i].shape());
    }
    assert!(zero_v.run(&q, &kv, 2).unwrap().data().iter().all(|&x| x == 0.0));

    let eye = Tensor::from_fn(&[4, 4], |i| f64::from(i / 4 == i % 4));
    let mut identity = Attn::random(4, 6);
    for i in [4, 6] {
        identity.w[i] = eye.clone();
    }
    for i in [5, 7] {
        identity.w[i] = Tensor::zeros(&[4]);
    }
    let one = uniform(&mut r, &[1, 1, 4], 1.0);
    let out = identity.run(&q, &one, 2).unwrap();
    for row in out.data().chunks(4) {
        assert_close(row, one.data(), 1e-12, "single token");
    }

    assert!(matches!(Attn::random(4, 7).run(&q, &kv, 3), Err(Error::Config(_))));
}

#[test]
fn gradient_check_examples() {
    let x = Tensor::from_fn(&[6], |i| i as f64 * 0.3 - 1.0);
    let r = grad_check(|t, v| Ok(t.sum(v)), &x, 1e-5, 1e-10).unwrap();
    assert!(r.passed && r.max_abs_error < 1e-10, "{r:?}");
    let r = grad_check(
        |t, v| {
            let s = t.softmax(v, 0)?;
            Ok(t.sum(s))
        },
        &x,
        1e-5,
        1e-4,
    )
    .unwrap();
    assert!(r.max_abs_error < 1e-8, "{r:?}");
}

#[test]
fn rms_norm_unit_rms_and_gradient() {
    let mut r = rng(8);
    let x = uniform(&mut r, &[3, 5], 2.0);
    let mut tape = Tape::new();
    let v = tape.constant(x.clone());
    let y = tape.rms_norm(v, 0.0).unwrap();
    for row in tape.value(y).data().chunks(5) {
        let ms: f64 = row.iter().map(|a| a * a).sum::<f64>() / 5.0;
        assert!((ms - 1.0).abs() < 1e-12);
    }
    let w = uniform(&mut r, &[3, 5], 1.0);
    let rep = grad_check_many(
        |t, v| {
            let y = t.rms_norm(v[0], 1e-6)?;
            let p = t.mul(y, v[1])?;
            Ok(t.sum(p))
        },
        &[x, w],
        1e-5,
        1e-5,
    )
    .unwrap();
    assert!(rep.passed, "{rep:?}");
}

fn forward_once(x: &Tensor) -> Vec<f64> {
    let mut tape = Tape::new();
    let v = tape.constant(x.clone());
    let s = tape.softmax(v, 1).unwrap();
    let g = tape.gelu(s);
    tape.value(g).data().to_vec()
}

proptest! {
    #[test]
    fn softmax_slices_sum_to_one(data in prop::collection::vec(-50.0f64..50.0, 12), axis in 0usize..3) {
        let x = Tensor::new(vec![2, 3, 2], data).unwrap();
        let s = softmax_axis(&x, axis).unwrap();
        let shape = x.shape();
        let outer: usize = shape[..axis].iter().product();
        let inner: usize = shape[axis + 1..].iter().product();
        for o in 0..outer {
            for i in 0..inner {
                let sum: f64 = (0..shape[axis]).map(|a| s.data()[(o * shape[axis] + a) * inner + i]).sum();
                prop_assert!((sum - 1.0).abs() <= 1e-12);
            }
        }
        prop_assert!(s.data().iter().all(|&p| p >= 0.0));
    }

    #[test]
    fn softmax_shift_invariant(data in prop::collection::vec(-20.0f64..20.0, 5), c in -30.0f64..30.0) {
        let a = softmax_axis(&Tensor::vector(data.clone()), 0).unwrap();
        let b = softmax_axis(&Tensor::vector(data.iter().map(|v| v + c).collect()), 0).unwrap();
        for (x, y) in a.data().iter().zip(b.data()) {
            prop_assert!((x - y).abs() <= 1e-12);
        }
    }

    #[test]
    fn attention_is_key_permutation_invariant(seed in 0u64..1000, perm in Just([2usize, 0, 3, 1]).prop_shuffle()) {
        let mut r = rng(seed);
        let q = uniform(&mut r, &[1, 2, 4], 1.0);
        let kv = uniform(&mut r, &[1, 4, 4], 1.0);
        let permuted = Tensor::from_fn(&[1, 4, 4], |i| kv.data()[perm[i / 4] * 4 + i % 4]);
        let attn = Attn::random(4, seed + 1);
        let a = attn.run(&q, &kv, 2).unwrap();
        let b = attn.run(&q, &permuted, 2).unwrap();
        for (x, y) in a.data().iter().zip(b.data()) {
            prop_assert!((x - y).abs() <= 1e-12);
        }
    }

    #[test]
    fn ops_are_pure(data in prop::collection::vec(-5.0f64..5.0, 6)) {
        let x = Tensor::new(vec![2, 3], data).unwrap();
        prop_assert_eq!(forward_once(&x), forward_once(&x));
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(100))]

    #[test]
    fn composite_gradient_matches_differences(seed in 0u64..u64::MAX) {
        let mut r = rng(seed);
        let points = [uniform(&mut r, &[2, 3, 4], 1.0), uniform(&mut r, &[4, 3], 1.0), uniform(&mut r, &[3], 1.0)];
        let rep = grad_check_many(
            |t, v| {
                let h = t.linear(v[0], v[1], v[2])?;
                let h = t.gelu(h);
                let s = t.log_softmax(h, 2)?;
                let m = t.mean(s, 1)?;
                let sq = t.mul(m, m)?;
                Ok(t.sum(sq))
            },
            &points,
            1e-5,
            1e-5,
        )
        .unwrap();
        prop_assert!(rep.passed, "{:?}", rep);
    }
}

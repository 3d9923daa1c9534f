use std::f64::consts::{FRAC_PI_2, PI, TAU};
use std::path::Path;

use biomoe::feature_store::hfv1::{decode, encode, read_tensor, write_tensor};
use biomoe::feature_store::{
    gen_synthetic, load_dataset, stream_seed, write_dataset, Cue, Split, Stream, SyntheticSpec,
};
use biomoe::numerics::Tensor;
use biomoe::Error;
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn spec(cue: Cue, sigma: f64) -> SyntheticSpec {
    SyntheticSpec {
        num_subjects: 4,
        tracklets_per_subject: 5,
        frames: 6,
        tokens: 5,
        channels: 16,
        cue,
        noise_sigma: sigma,
        seed: 21,
        same_clothes: true,
    }
}

fn header(t: u32, k: u32, c: u32) -> Vec<u8> {
    let mut b = b"HFV1".to_vec();
    for v in [1, t, k, c] {
        b.extend_from_slice(&v.to_le_bytes());
    }
    b.extend_from_slice(&[0, 0, 0, 0]);
    b
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(100))]

    #[test]
    fn hfv1_roundtrip_is_exact(t in 1usize..4, k in 1usize..5, c in 1usize..6, seed in any::<u64>()) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let x = Tensor::from_fn(&[t, k, c], |_| rng.random_range(-1e3f32..1e3) as f64);
        let dir = tempfile::tempdir().unwrap();
        let a = dir.path().join("a.hfv1");
        let b = dir.path().join("b.hfv1");
        write_tensor(&x, &a).unwrap();
        let y = read_tensor(&a).unwrap();
        prop_assert_eq!(&y, &x);
        write_tensor(&y, &b).unwrap();
        prop_assert_eq!(std::fs::read(&a).unwrap(), std::fs::read(&b).unwrap());
    }
}

#[test]
fn hfv1_layout_is_little_endian_f32() {
    let x = Tensor::new(vec![1, 1, 2], vec![1.0, -2.5]).unwrap();
    let mut want = header(1, 1, 2);
    want.extend_from_slice(&1.0f32.to_le_bytes());
    want.extend_from_slice(&(-2.5f32).to_le_bytes());
    assert_eq!(encode(&x).unwrap(), want);
}

#[test]
fn hfv1_rejects_bad_files() {
    let p = Path::new("x.hfv1");
    let mut bad = header(1, 1, 1);
    bad[..4].copy_from_slice(b"XXXX");
    bad.extend_from_slice(&[0; 4]);
    assert!(matches!(decode(&bad, p), Err(Error::Format { .. })));

    let mut short = header(2, 3, 4);
    short.extend(std::iter::repeat_n(0u8, 23 * 4));
    match decode(&short, p) {
        Err(Error::Truncated { expected, found, .. }) => assert_eq!((expected, found), (24, 23)),
        other => panic!("expected truncation, got {other:?}"),
    }

    let mut dtype = header(1, 1, 1);
    dtype[20] = 7;
    dtype.extend_from_slice(&[0; 4]);
    assert!(matches!(decode(&dtype, p), Err(Error::UnsupportedDtype(7))));
    assert!(matches!(decode(&header(1, 1, 1)[..10], p), Err(Error::Format { .. })));
}

#[test]
fn synthetic_generation_is_seeded() {
    let s = spec(Cue::Mixed, 0.1);
    let (m1, v1) = gen_synthetic(&s).unwrap();
    let (m2, v2) = gen_synthetic(&s).unwrap();
    assert_eq!(m1, m2);
    assert_eq!(v1, v2);
    let (_, v3) = gen_synthetic(&SyntheticSpec { seed: 22, ..s }).unwrap();
    assert_ne!(v1, v3);
}

#[test]
fn long_term_block_is_subject_constant() {
    let s = spec(Cue::LongTerm, 0.0);
    let (m, v) = gen_synthetic(&s).unwrap();
    let w = s.block_width();
    let block_mean = |i: usize| -> Vec<f64> {
        let x = &v[i].data;
        (0..w)
            .map(|c| {
                let mut acc = 0.0;
                for t in 0..s.frames {
                    for k in 0..s.tokens {
                        acc += x.get(&[t, k, c]);
                    }
                }
                acc / (s.frames * s.tokens) as f64
            })
            .collect()
    };
    for (i, r) in m.records.iter().enumerate() {
        let first = m.records.iter().position(|q| q.subject_id == r.subject_id).unwrap();
        for (a, b) in block_mean(i).iter().zip(block_mean(first)) {
            assert!((a - b).abs() < 1e-12);
        }
        assert!(v[i]
            .data
            .data()
            .iter()
            .enumerate()
            .all(|(n, &x)| n % s.channels < w || x == 0.0));
    }
}

#[test]
fn temporal_block_matches_sinusoid_oracle() {
    let s = spec(Cue::Temporal, 0.0);
    let (m, v) = gen_synthetic(&s).unwrap();
    let w = s.block_width();
    for (i, r) in m.records.iter().enumerate() {
        let subject = r.subject_id as u64;
        let j = i as u64 - subject * s.tracklets_per_subject as u64;
        let phase: f64 =
            ChaCha8Rng::seed_from_u64(stream_seed(s.seed, Stream::Phase, subject, j)).random_range(0.0..TAU);
        let omega = PI * (subject + 1) as f64 / (s.num_subjects + 1) as f64;
        for t in 0..s.frames {
            for k in 0..s.tokens {
                for c in 2 * w..3 * w {
                    let quad = ((c - 2 * w) % 2) as f64 * FRAC_PI_2;
                    let want = (omega * t as f64 + phase + quad).sin() as f32 as f64;
                    assert_eq!(v[i].data.get(&[t, k, c]), want);
                }
            }
        }
    }
}

#[test]
fn long_term_centroids_identify_every_held_out_tracklet() {
    let s = spec(Cue::Mixed, 0.1);
    let (m, v) = gen_synthetic(&s).unwrap();
    let w = s.block_width();
    let feat = |i: usize| -> Vec<f64> {
        let x = &v[i].data;
        let n = (s.frames * s.tokens) as f64;
        (0..w)
            .map(|c| {
                (0..s.frames)
                    .flat_map(|t| (0..s.tokens).map(move |k| (t, k)))
                    .map(|(t, k)| x.get(&[t, k, c]))
                    .sum::<f64>()
                    / n
            })
            .collect()
    };
    let centroids: Vec<(u32, Vec<f64>)> = m
        .train_by_subject()
        .into_iter()
        .map(|(subject, idx)| {
            let mut c = vec![0.0; w];
            for &i in &idx {
                for (a, b) in c.iter_mut().zip(feat(i)) {
                    *a += b / idx.len() as f64;
                }
            }
            (subject, c)
        })
        .collect();
    let dist = |a: &[f64], b: &[f64]| a.iter().zip(b).map(|(x, y)| (x - y).powi(2)).sum::<f64>();
    let held_out: Vec<usize> = m
        .split(Split::Query)
        .chain(m.split(Split::Gallery))
        .map(|(i, _)| i)
        .collect();
    assert_eq!(held_out.len(), 2 * s.num_subjects);
    for i in held_out {
        let f = feat(i);
        let best = centroids
            .iter()
            .min_by(|a, b| dist(&a.1, &f).total_cmp(&dist(&b.1, &f)))
            .unwrap();
        assert_eq!(best.0, m.records[i].subject_id);
    }
}

#[test]
fn dataset_survives_disk_roundtrip() {
    let s = spec(Cue::Mixed, 0.1);
    let (m, v) = gen_synthetic(&s).unwrap();
    let dir = tempfile::tempdir().unwrap();
    write_dataset(dir.path(), &m, &v).unwrap();
    let (m2, v2) = load_dataset(&dir.path().join("manifest.jsonl")).unwrap();
    assert_eq!(m2.records, m.records);
    assert_eq!(v2, v);
}

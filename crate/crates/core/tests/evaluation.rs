mod common;

use biomoe::evaluator::{
    average_precision, cmc_curve, cosine_sim, evaluate, export_heatmap, protocol_filter, Protocol, Relevance,
};
use biomoe::feature_store::{gen_synthetic, Cue, FeatureVolume, Manifest, Record, Split, SyntheticSpec, TrackletMeta};
use biomoe::moe_core::{Model, ModelConfig};
use biomoe::Error;
use common::*;
use proptest::prelude::*;

use Relevance::{Excluded as Ex, Irrelevant as Irr, Relevant as Rel};

fn meta(tracklet: u32, subject: u32, clothes: u32, camera: u32) -> TrackletMeta {
    TrackletMeta {
        subject_id: subject,
        tracklet_id: tracklet,
        clothes_id: Some(clothes),
        camera_id: camera,
    }
}

#[test]
fn protocol_truth_table() {
    let query = meta(0, 0, 0, 0);
    let gallery = [
        meta(0, 0, 0, 0),
        meta(1, 0, 0, 0),
        meta(2, 0, 0, 1),
        meta(3, 0, 1, 1),
        meta(4, 0, 1, 0),
        meta(5, 1, 0, 1),
        meta(6, 1, 1, 0),
    ];
    let table = [
        (Protocol::General, [Ex, Ex, Rel, Rel, Ex, Irr, Irr]),
        (Protocol::Sc, [Ex, Ex, Rel, Ex, Ex, Irr, Irr]),
        (Protocol::Dc, [Ex, Ex, Ex, Rel, Ex, Irr, Irr]),
    ];
    for (p, want) in table {
        assert_eq!(protocol_filter(&query, &gallery, p).unwrap(), want, "{p}");
    }

    let bare = TrackletMeta {
        clothes_id: None,
        ..meta(9, 1, 0, 1)
    };
    assert!(protocol_filter(&query, &[bare], Protocol::General).is_ok());
    assert!(matches!(
        protocol_filter(&query, &[bare], Protocol::Sc),
        Err(Error::Metadata(_))
    ));
}

#[test]
fn metric_examples() {
    let lists = vec![
        vec![true, false, false],
        vec![false, false, true],
        vec![false, true, false],
    ];
    let cmc = cmc_curve(&lists);
    assert_close(&cmc, &[1.0 / 3.0, 2.0 / 3.0, 1.0], 1e-15, "cmc");
    assert!((average_precision(&[true, false, true, false]).unwrap() - 5.0 / 6.0).abs() < 1e-15);
    assert_eq!(cmc_curve(&[vec![true, false], vec![true]]), vec![1.0, 1.0]);
    assert!((cosine_sim(&[1.0, 0.0], &[0.0, 2.0]).unwrap()).abs() < 1e-15);
    assert!((cosine_sim(&[1.0, -2.0], &[-1.0, 2.0]).unwrap() + 1.0).abs() < 1e-15);
    assert!(matches!(
        cosine_sim(&[0.0, 0.0], &[1.0, 0.0]),
        Err(Error::Degenerate(_))
    ));
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(200))]

    #[test]
    fn metrics_match_brute_force(seed in any::<u64>()) {
        let (scores, rel) = random_instance(&mut rng(seed));
        let (cmc, map) = library_metrics(&scores, &rel);
        let (want_cmc, want_map) = brute_force_metrics(&scores, &rel);
        prop_assert_eq!(&cmc, &want_cmc);
        prop_assert_eq!(map, want_map);
        prop_assert!(cmc.windows(2).all(|w| w[0] <= w[1]));
        prop_assert!((0.0..=1.0).contains(&map));
        if let Some(last) = cmc.last() {
            prop_assert_eq!(*last, 1.0);
        }
    }

    #[test]
    fn metrics_are_rank_invariant(seed in any::<u64>(), a in 0.1f64..5.0, b in -3.0f64..3.0) {
        let (scores, rel) = random_instance(&mut rng(seed));
        let moved: Vec<Vec<f64>> = scores.iter().map(|s| s.iter().map(|v| a * v.powi(3) + b).collect()).collect();
        prop_assert_eq!(library_metrics(&scores, &rel), library_metrics(&moved, &rel));
    }
}

fn model_and_data(same_clothes: bool) -> (Model, Manifest, Vec<FeatureVolume>) {
    let cfg = ModelConfig {
        num_identities: 4,
        ..tiny(3)
    };
    let mut model = Model::new(cfg.clone()).unwrap();
    randomize(&mut model, 4, 0.5);
    let spec = SyntheticSpec {
        num_subjects: 5,
        tracklets_per_subject: 4,
        frames: cfg.frames,
        tokens: cfg.tokens,
        channels: cfg.channels(),
        cue: Cue::Mixed,
        noise_sigma: 0.1,
        seed: 5,
        same_clothes,
    };
    let (m, v) = gen_synthetic(&spec).unwrap();
    (model, m, v)
}

#[test]
fn empty_band_is_single_input_evaluation() {
    let (model, m, v) = model_and_data(true);
    let r = evaluate(&model, &m, &v, Protocol::General, 0.0).unwrap();
    assert_eq!(r.band.selected, 0);
    assert_eq!((r.map, &r.cmc), (r.single_input.map, &r.single_input.cmc));
    assert!(r
        .pairs
        .iter()
        .all(|p| p.final_score.to_bits() == p.single.to_bits() && !p.in_band));
    assert!((r.mean_w2.iter().sum::<f64>() - 1.0).abs() < 1e-9);
}

#[test]
fn rescoring_touches_only_the_band() {
    let (model, m, v) = model_and_data(true);
    let r = evaluate(&model, &m, &v, Protocol::General, 20.0).unwrap();
    assert!(r.band.selected > 0);
    assert_eq!(r.pairs.iter().filter(|p| p.in_band).count(), r.band.selected);
    for p in &r.pairs {
        if p.in_band {
            assert!(p.single >= r.band.lower && p.single <= r.band.upper);
        } else {
            assert_eq!(p.final_score.to_bits(), p.single.to_bits());
        }
    }
}

#[test]
fn self_retrieval_ranks_the_copy_first() {
    let (model, m, v) = model_and_data(true);
    let mut records = Vec::new();
    let mut volumes = Vec::new();
    for (i, r) in m.split(Split::Query) {
        records.push(r.clone());
        volumes.push(v[i].clone());
        let copy = Record {
            tracklet_id: r.tracklet_id + 1000,
            camera_id: r.camera_id + 100,
            split: Split::Gallery,
            path: format!("copy_{}.hfv1", r.tracklet_id).into(),
            ..r.clone()
        };
        let mut cv = v[i].clone();
        cv.meta = (&copy).into();
        records.push(copy);
        volumes.push(cv);
    }
    let r = evaluate(&model, &Manifest::new(records, ""), &volumes, Protocol::General, 0.0).unwrap();
    assert_eq!(r.top1(), 1.0);
    assert_eq!(r.queries_dropped, 0);
}

#[test]
fn dc_drops_queries_whose_matches_share_clothes() {
    let (model, m, v) = model_and_data(true);
    let r = evaluate(&model, &m, &v, Protocol::Dc, 0.0).unwrap();
    assert_eq!((r.queries_evaluated, r.queries_dropped), (0, 5));
    let (model, m, v) = model_and_data(false);
    let r = evaluate(&model, &m, &v, Protocol::Dc, 0.0).unwrap();
    assert_eq!((r.queries_evaluated, r.queries_dropped), (5, 0));
    let r = evaluate(&model, &m, &v, Protocol::Sc, 0.0).unwrap();
    assert_eq!(r.queries_evaluated, 0);
}

#[test]
fn heatmap_is_the_frame_mean_of_the_gate_slice() {
    let cfg = ModelConfig { tokens: 17, ..tiny(6) };
    let mut model = Model::new(cfg.clone()).unwrap();
    let g = uniform(&mut rng(7), &[cfg.frames, 17, cfg.channels()], 1.0);
    let dir = tempfile::tempdir().unwrap();

    let stem = dir.path().join("flat");
    let grid = export_heatmap(&model, &g, 1, 2, &stem).unwrap();
    assert_eq!(grid.shape(), &[4, 4]);
    let pgm = std::fs::read(stem.with_extension("pgm")).unwrap();
    let pixels = &pgm[pgm.len() - 16..];
    assert!(pixels.iter().all(|&p| p == pixels[0]));

    randomize(&mut model, 8, 0.5);
    let stem = dir.path().join("trained");
    export_heatmap(&model, &g, 1, 2, &stem).unwrap();
    let csv: Vec<f64> = std::fs::read_to_string(stem.with_extension("csv"))
        .unwrap()
        .split([',', '\n'])
        .filter(|s| !s.is_empty())
        .map(|s| s.parse().unwrap())
        .collect();
    let w1 = model.forward(&g).unwrap().gating1.weights;
    let want: Vec<f64> = (1..17)
        .map(|k| (0..cfg.frames).map(|t| w1.get(&[t, k, 1, 2])).sum::<f64>() / cfg.frames as f64)
        .collect();
    assert_close(&csv, &want, 1e-9, "heatmap");
    let pgm = std::fs::read(stem.with_extension("pgm")).unwrap();
    assert!(pgm.starts_with(b"P5\n4 4\n255\n"));
    let pixels = &pgm[pgm.len() - 16..];
    assert!(pixels.contains(&0) && pixels.contains(&255));

    let bad = uniform(&mut rng(9), &[cfg.frames, 6, cfg.channels()], 1.0);
    assert!(matches!(
        export_heatmap(&model, &bad, 0, 0, &stem),
        Err(Error::Shape(_))
    ));
}

use std::collections::BTreeMap;

use biomoe::feature_store::{gen_synthetic, Cue, FeatureVolume, Manifest, SyntheticSpec};
use biomoe::moe_core::checkpoint;
use biomoe::moe_core::{Model, ModelConfig};
use biomoe::trainer::{
    batch_objective, fit, fit_from, label_map, sample_batch, train_accuracy, train_step, Mode, TrainConfig, TrainState,
};
use biomoe::Error;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn config(seed: u64) -> ModelConfig {
    ModelConfig {
        d: 4,
        tokens: 5,
        frames: 4,
        n1: 2,
        blocks: 1,
        heads: 2,
        num_identities: 4,
        lr: 3e-3,
        seed,
        ..ModelConfig::default()
    }
}

fn data(cfg: &ModelConfig, cue: Cue, sigma: f64, seed: u64) -> (Manifest, Vec<FeatureVolume>) {
    gen_synthetic(&SyntheticSpec {
        num_subjects: 4,
        tracklets_per_subject: 6,
        frames: cfg.frames,
        tokens: cfg.tokens,
        channels: cfg.channels(),
        cue,
        noise_sigma: sigma,
        seed,
        same_clothes: true,
    })
    .unwrap()
}

fn train(steps: u64) -> TrainConfig {
    TrainConfig {
        steps,
        ..TrainConfig::default()
    }
}

#[test]
fn batches_are_exhaustive_deterministic_and_uniform() {
    let cfg = config(0);
    let (m, _) = data(&cfg, Cue::Mixed, 0.1, 1);
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let full = sample_batch(&m, 4, &mut rng).unwrap();
    let mut subjects = full.subjects.clone();
    subjects.sort_unstable();
    assert_eq!(subjects, vec![0, 1, 2, 3]);
    for pair in full.tracklets.chunks(2) {
        assert_ne!(pair[0], pair[1]);
        assert_eq!(m.records[pair[0]].subject_id, m.records[pair[1]].subject_id);
    }

    let mut a = ChaCha8Rng::seed_from_u64(3);
    let mut b = a.clone();
    assert_eq!(
        sample_batch(&m, 2, &mut a).unwrap(),
        sample_batch(&m, 2, &mut b).unwrap()
    );

    // P = 2 of 4: each identity appears with probability 1/2, σ = 50
    let mut counts = BTreeMap::new();
    for _ in 0..10_000 {
        for s in sample_batch(&m, 2, &mut a).unwrap().subjects {
            *counts.entry(s).or_insert(0i64) += 1;
        }
    }
    for (s, c) in counts {
        assert!((c - 5000).abs() <= 150, "subject {s}: {c}");
    }

    assert!(matches!(sample_batch(&m, 5, &mut a), Err(Error::Sampling(_))));
    assert!(matches!(sample_batch(&m, 1, &mut a), Err(Error::Sampling(_))));
}

fn one_step(lr: f64, mode: Mode) -> (TrainState, Vec<biomoe::numerics::Tensor>, f64) {
    let cfg = ModelConfig { lr, ..config(4) };
    let (m, v) = data(&cfg, Cue::Mixed, 0.1, 5);
    let mut state = TrainState::new(cfg, train(1)).unwrap();
    let before = state.model.store.tensors().to_vec();
    let batch = sample_batch(&m, 2, &mut state.rng).unwrap();
    let out = train_step(&mut state, &batch, &v, &label_map(&m), mode).unwrap();
    (state, before, out.loss)
}

#[test]
fn zero_learning_rate_leaves_parameters_bit_exact() {
    for mode in [Mode::Single, Mode::Dual] {
        let (state, before, loss) = one_step(0.0, mode);
        assert_eq!(state.model.store.tensors(), &before[..]);
        assert!(loss.is_finite());
    }
}

#[test]
fn one_step_records_a_finite_loss() {
    let (state, before, loss) = one_step(1e-3, Mode::Dual);
    assert!(loss.is_finite() && loss > 0.0);
    assert_eq!(state.step, 1);
    assert_eq!(state.history.len(), 1);
    assert_eq!(state.history[0].loss, loss);
    assert_ne!(state.model.store.tensors(), &before[..]);
}

fn mean_objective(model: &Model, m: &Manifest, v: &[FeatureVolume], seed: u64) -> f64 {
    let labels = label_map(m);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut total = 0.0;
    for i in 0..8 {
        let batch = sample_batch(m, 4, &mut rng).unwrap();
        let mode = if i % 2 == 0 { Mode::Single } else { Mode::Dual };
        total += batch_objective(model, &batch, v, &labels, mode, false).unwrap().0;
    }
    total / 8.0
}

#[test]
fn two_hundred_steps_reduce_the_loss() {
    for seed in 0..10 {
        let cfg = config(seed);
        let (m, v) = data(&cfg, Cue::Mixed, 0.0, 100 + seed);
        let init = Model::new(cfg.clone()).unwrap();
        let state = fit(cfg, train(200), &m, &v, None).unwrap();
        let (a, b) = (
            mean_objective(&init, &m, &v, 9),
            mean_objective(&state.model, &m, &v, 9),
        );
        assert!(b < a, "seed {seed}: {a} -> {b}");
        assert!(state.model.store.all_finite());
    }
}

#[test]
fn zero_steps_checkpoint_is_the_initialization() {
    let cfg = config(6);
    let (m, v) = data(&cfg, Cue::Mixed, 0.1, 7);
    let dir = tempfile::tempdir().unwrap();
    fit(cfg.clone(), train(0), &m, &v, Some(dir.path())).unwrap();
    let loaded = Model::load(&dir.path().join("ckpt.hpk1")).unwrap();
    assert_eq!(loaded.store.tensors(), Model::new(cfg).unwrap().store.tensors());
    let log = std::fs::read_to_string(dir.path().join("train_log.csv")).unwrap();
    assert_eq!(log, "step,mode,loss\n");
}

#[test]
fn resume_reproduces_the_next_steps_bit_exactly() {
    let cfg = config(8);
    let (m, v) = data(&cfg, Cue::Mixed, 0.1, 9);
    let straight = fit(cfg.clone(), train(7), &m, &v, None).unwrap();

    let dir = tempfile::tempdir().unwrap();
    fit(cfg, train(4), &m, &v, Some(dir.path())).unwrap();
    let ck = checkpoint::read(&dir.path().join("ckpt.hpk1")).unwrap();
    let mut resumed = TrainState::from_checkpoint(&ck).unwrap();
    resumed.train.steps = 7;
    fit_from(&mut resumed, &m, &v, None).unwrap();

    let bits = |s: &TrainState| s.history.iter().map(|r| r.loss.to_bits()).collect::<Vec<_>>();
    assert_eq!(bits(&resumed), bits(&straight));
    assert_eq!(resumed.model.store.tensors(), straight.model.store.tensors());
    assert_eq!(resumed.log_csv(), straight.log_csv());
}

#[test]
fn training_never_mutates_inputs() {
    let cfg = config(10);
    let (m, v) = data(&cfg, Cue::Mixed, 0.1, 11);
    let copy = v.clone();
    fit(cfg, train(6), &m, &v, None).unwrap();
    assert_eq!(v, copy);
}

#[test]
fn modes_alternate() {
    let cfg = config(12);
    let (m, v) = data(&cfg, Cue::Mixed, 0.1, 13);
    let s = fit(cfg.clone(), train(4), &m, &v, None).unwrap();
    let modes: Vec<Mode> = s.history.iter().map(|r| r.mode).collect();
    assert_eq!(modes, [Mode::Single, Mode::Dual, Mode::Single, Mode::Dual]);
    let t = TrainConfig {
        dual_steps: false,
        ..train(2)
    };
    let s = fit(cfg, t, &m, &v, None).unwrap();
    assert!(s.history.iter().all(|r| r.mode == Mode::Single));
}

#[test]
fn long_term_cue_is_learned_on_the_training_split() {
    let cfg = ModelConfig { d: 8, ..config(14) };
    let (m, v) = data(&cfg, Cue::LongTerm, 0.1, 15);
    let s = fit(cfg, train(300), &m, &v, None).unwrap();
    let acc = train_accuracy(&s.model, &m, &v).unwrap();
    assert!(acc >= 0.9, "train top-1 {acc}");
}

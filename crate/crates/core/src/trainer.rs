//! Identity-balanced pair training with alternating single/dual gating.
//!
//! A batch holds `P` identities with two tracklets each, ordered
//! `a_0, b_0, a_1, b_1, …`. Positive pairs are `(a_i, b_i)`; negative pairs
//! are `(b_i, a_{i+1 mod P})`.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use rand::seq::index::sample;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use serde_json::json;

use crate::error::{Error, Result};
use crate::feature_store::{FeatureVolume, Manifest, Split};
use crate::losses::{ce_var, contrastive_var, lts_var, sts_var, ts_var, LossTerms};
use crate::moe_core::checkpoint::{self, Checkpoint};
use crate::moe_core::{check_simplex, stack_volumes, Embeddings, Model, ModelConfig, Session, SIMPLEX_TOL};
use crate::numerics::{Tape, Tensor, Var};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    pub steps: u64,
    /// Identities per batch; each contributes two tracklets.
    pub identities_per_batch: usize,
    /// Write `ckpt.hpk1` every this many steps (0: only at the end).
    pub checkpoint_every: u64,
    /// Alternate single (even steps) and dual (odd steps) gating; when
    /// false every step is single-input.
    pub dual_steps: bool,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            steps: 200,
            identities_per_batch: 4,
            checkpoint_every: 0,
            dual_steps: true,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Mode {
    Single,
    Dual,
}

impl Mode {
    pub fn for_step(step: u64, dual_steps: bool) -> Mode {
        if dual_steps && step % 2 == 1 {
            Mode::Dual
        } else {
            Mode::Single
        }
    }

    pub fn as_str(self) -> &'static str {
        match self {
            Mode::Single => "single",
            Mode::Dual => "dual",
        }
    }
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Batch {
    /// Subject id of each identity slot.
    pub subjects: Vec<u32>,
    /// Record indices, two per identity, `[a_0, b_0, a_1, b_1, …]`.
    pub tracklets: Vec<usize>,
}

/// Draw `p` training identities without replacement and two distinct
/// tracklets of each.
pub fn sample_batch(manifest: &Manifest, p: usize, rng: &mut ChaCha8Rng) -> Result<Batch> {
    if p < 2 {
        return Err(Error::Sampling(format!(
            "a batch needs at least 2 identities for negative pairs, got {p}"
        )));
    }
    let pool: Vec<(u32, Vec<usize>)> = manifest
        .train_by_subject()
        .into_iter()
        .filter(|(_, t)| t.len() >= 2)
        .collect();
    if pool.len() < p {
        return Err(Error::Sampling(format!(
            "{p} identities requested, {} training identities have two or more tracklets",
            pool.len()
        )));
    }
    let mut batch = Batch {
        subjects: Vec::with_capacity(p),
        tracklets: Vec::with_capacity(2 * p),
    };
    for i in sample(rng, pool.len(), p) {
        let (subject, tracklets) = &pool[i];
        let pick = sample(rng, tracklets.len(), 2);
        batch.subjects.push(*subject);
        batch.tracklets.push(tracklets[pick.index(0)]);
        batch.tracklets.push(tracklets[pick.index(1)]);
    }
    Ok(batch)
}

/// Class index of each training subject, in ascending subject order.
pub fn label_map(manifest: &Manifest) -> BTreeMap<u32, usize> {
    manifest
        .train_by_subject()
        .keys()
        .enumerate()
        .map(|(i, &s)| (s, i))
        .collect()
}

#[derive(Clone, Debug, PartialEq)]
pub struct Adam {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub m: Vec<Tensor>,
    pub v: Vec<Tensor>,
    pub t: u64,
}

impl Adam {
    pub fn new(params: &[Tensor], lr: f64) -> Self {
        let zeros: Vec<Tensor> = params.iter().map(|p| Tensor::zeros(p.shape())).collect();
        Self {
            lr,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            m: zeros.clone(),
            v: zeros,
            t: 0,
        }
    }

    pub fn update(&mut self, params: &mut [Tensor], grads: &[Option<Tensor>]) {
        self.t += 1;
        let c1 = 1.0 - self.beta1.powi(self.t as i32);
        let c2 = 1.0 - self.beta2.powi(self.t as i32);
        for (i, p) in params.iter_mut().enumerate() {
            let Some(g) = &grads[i] else { continue };
            let (m, v) = (self.m[i].data_mut(), self.v[i].data_mut());
            for (k, x) in p.data_mut().iter_mut().enumerate() {
                let gk = g.data()[k];
                m[k] = self.beta1 * m[k] + (1.0 - self.beta1) * gk;
                v[k] = self.beta2 * v[k] + (1.0 - self.beta2) * gk * gk;
                let mh = m[k] / c1;
                let vh = v[k] / c2;
                *x -= self.lr * mh / (vh.sqrt() + self.eps);
            }
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LogRow {
    pub step: u64,
    pub mode: Mode,
    pub loss: f64,
}

#[derive(Clone, Debug)]
pub struct TrainState {
    pub model: Model,
    pub train: TrainConfig,
    pub adam: Adam,
    pub step: u64,
    pub rng: ChaCha8Rng,
    pub history: Vec<LogRow>,
}

/// Seed of the sampling stream, kept apart from parameter initialization.
fn sampler_seed(seed: u64) -> u64 {
    seed ^ 0x5EED_BA7C_0000_0001
}

impl TrainState {
    pub fn new(config: ModelConfig, train: TrainConfig) -> Result<Self> {
        let model = Model::new(config)?;
        let adam = Adam::new(model.store.tensors(), model.config.lr);
        let rng = ChaCha8Rng::seed_from_u64(sampler_seed(model.config.seed));
        Ok(Self {
            model,
            train,
            adam,
            step: 0,
            rng,
            history: Vec::new(),
        })
    }

    pub fn to_checkpoint(&self) -> Result<Checkpoint> {
        let mut ck = self.model.to_checkpoint(json!({
            "train": self.train,
            "step": self.step,
            "rng_word_pos": self.rng.get_word_pos().to_string(),
            "history": self.history,
        }))?;
        for (prefix, moments) in [("adam.m.", &self.adam.m), ("adam.v.", &self.adam.v)] {
            for (id, t) in self.model.store.ids().zip(moments) {
                ck.tensors
                    .push((format!("{prefix}{}", self.model.store.name(id)), t.clone()));
            }
        }
        Ok(ck)
    }

    pub fn from_checkpoint(ck: &Checkpoint) -> Result<Self> {
        let model = Model::from_checkpoint(ck)?;
        let meta = &ck.metadata;
        let field = |k: &str| {
            meta.get(k)
                .cloned()
                .ok_or_else(|| Error::Config(format!("checkpoint has no training field {k:?}")))
        };
        let train: TrainConfig = serde_json::from_value(field("train")?)?;
        let step: u64 = serde_json::from_value(field("step")?)?;
        let history: Vec<LogRow> = serde_json::from_value(field("history")?)?;
        let word_pos: u128 = field("rng_word_pos")?
            .as_str()
            .and_then(|s| s.parse().ok())
            .ok_or_else(|| Error::Config("bad rng_word_pos".into()))?;
        let mut rng = ChaCha8Rng::seed_from_u64(sampler_seed(model.config.seed));
        rng.set_word_pos(word_pos);

        let mut adam = Adam::new(model.store.tensors(), model.config.lr);
        adam.t = step;
        for (prefix, moments) in [("adam.m.", &mut adam.m), ("adam.v.", &mut adam.v)] {
            for (id, slot) in model.store.ids().zip(moments.iter_mut()) {
                let name = format!("{prefix}{}", model.store.name(id));
                let (_, t) = ck
                    .tensors
                    .iter()
                    .find(|(n, _)| *n == name)
                    .ok_or_else(|| Error::Config(format!("checkpoint lacks {name:?}")))?;
                *slot = t.clone();
            }
        }
        Ok(Self {
            model,
            train,
            adam,
            step,
            rng,
            history,
        })
    }

    pub fn log_csv(&self) -> String {
        let mut out = String::from("step,mode,loss\n");
        for r in &self.history {
            let _ = writeln!(out, "{},{},{}", r.step, r.mode.as_str(), r.loss);
        }
        out
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct StepOutcome {
    pub mode: Mode,
    pub loss: f64,
    pub terms: LossTerms,
}

fn take_rows(tape: &mut Tape, v: Var, rows: &[usize]) -> Result<Var> {
    tape.select(v, rows)
}

struct PairRows {
    /// Row pairs fed to the consistency losses.
    positive: Vec<(usize, usize)>,
    /// Row pairs fed to the contrastive loss, with labels.
    contrastive: Vec<(usize, usize)>,
    y: Vec<u8>,
}

/// Build the loss graph for `emb` rows and return the total and its parts.
fn losses(
    s: &mut Session,
    emb: &Embeddings,
    labels: &[usize],
    rows: &PairRows,
    subjects_of_row: &[u32],
) -> Result<(Var, LossTerms)> {
    let cfg = s.model.config.clone();
    let logits = s.logits(emb.f)?;
    let tape = &mut s.tape;
    let ce = ce_var(tape, logits, labels)?;

    let (pa, pb): (Vec<usize>, Vec<usize>) = rows.positive.iter().copied().unzip();
    let subjects: Vec<(u32, u32)> = rows
        .positive
        .iter()
        .map(|&(a, b)| (subjects_of_row[a], subjects_of_row[b]))
        .collect();
    let fl = [take_rows(tape, emb.frames_l, &pa)?, take_rows(tape, emb.frames_l, &pb)?];
    let pl = [take_rows(tape, emb.f_l, &pa)?, take_rows(tape, emb.f_l, &pb)?];
    let lts = lts_var(tape, fl, pl, &subjects)?;
    let fs = [take_rows(tape, emb.frames_s, &pa)?, take_rows(tape, emb.frames_s, &pb)?];
    let sts = sts_var(tape, fs)?;
    let pt = [take_rows(tape, emb.f_t, &pa)?, take_rows(tape, emb.f_t, &pb)?];
    let ts = ts_var(tape, pt, &subjects)?;

    let (ca, cb): (Vec<usize>, Vec<usize>) = rows.contrastive.iter().copied().unzip();
    let f = [take_rows(tape, emb.f, &ca)?, take_rows(tape, emb.f, &cb)?];
    let con = contrastive_var(tape, f, &rows.y, cfg.margin)?;

    let consistency = tape.add(lts, sts)?;
    let consistency = tape.add(consistency, ts)?;
    let consistency = tape.scale(consistency, cfg.alpha);
    let con_w = tape.scale(con, cfg.beta);
    let total = tape.add(ce, consistency)?;
    let total = tape.add(total, con_w)?;
    let terms = LossTerms {
        ce: tape.value(ce).item(),
        lts: tape.value(lts).item(),
        sts: tape.value(sts).item(),
        ts: tape.value(ts).item(),
        contrastive: tape.value(con).item(),
    };
    Ok((total, terms))
}

/// Loss of `model` on `batch`, with parameter gradients when `with_grads`.
/// Gate outputs are checked against the simplex invariant on the way.
pub fn batch_objective(
    model: &Model,
    batch: &Batch,
    volumes: &[FeatureVolume],
    labels: &BTreeMap<u32, usize>,
    mode: Mode,
    with_grads: bool,
) -> Result<(f64, LossTerms, Option<Vec<Option<Tensor>>>)> {
    let p = batch.subjects.len();
    let label_of = |s: u32| -> Result<usize> {
        labels.get(&s).copied().ok_or(Error::Label {
            label: s as usize,
            classes: labels.len(),
        })
    };
    let batch_volumes: Vec<&Tensor> = batch.tracklets.iter().map(|&i| &volumes[i].data).collect();
    let row_subjects: Vec<u32> = batch.subjects.iter().flat_map(|&s| [s, s]).collect();

    let positives: Vec<(usize, usize)> = (0..p).map(|i| (2 * i, 2 * i + 1)).collect();
    let negatives: Vec<(usize, usize)> = (0..p).map(|i| (2 * i + 1, 2 * ((i + 1) % p))).collect();

    let mut s = Session::new(model, with_grads);
    let g = s.input(stack_volumes(&batch_volumes)?);
    let (single, experts) = s.forward_single(g)?;
    let (emb, rows, subjects) = match mode {
        Mode::Single => {
            let contrastive: Vec<_> = positives.iter().chain(&negatives).copied().collect();
            let rows = PairRows {
                positive: positives.clone(),
                y: contrastive
                    .iter()
                    .map(|&(a, b)| u8::from(row_subjects[a] == row_subjects[b]))
                    .collect(),
                contrastive,
            };
            (single, rows, row_subjects.clone())
        }
        Mode::Dual => {
            let pairs: Vec<(usize, usize)> = positives.iter().chain(&negatives).copied().collect();
            let (dual, _) = s.forward_dual(g, experts, &pairs)?;
            let n = pairs.len();
            let subjects: Vec<u32> = pairs
                .iter()
                .map(|p| row_subjects[p.0])
                .chain(pairs.iter().map(|p| row_subjects[p.1]))
                .collect();
            let contrastive: Vec<(usize, usize)> = (0..n).map(|i| (i, n + i)).collect();
            let rows = PairRows {
                positive: (0..p).map(|i| (i, n + i)).collect(),
                y: contrastive
                    .iter()
                    .map(|&(a, b)| u8::from(subjects[a] == subjects[b]))
                    .collect(),
                contrastive,
            };
            (dual, rows, subjects)
        }
    };
    check_simplex(s.value(emb.w1), 3, SIMPLEX_TOL)?;
    check_simplex(s.value(emb.w2), 1, SIMPLEX_TOL)?;
    let labels = subjects.iter().map(|&x| label_of(x)).collect::<Result<Vec<_>>>()?;
    let (total, terms) = losses(&mut s, &emb, &labels, &rows, &subjects)?;
    let loss = s.value(total).item();
    if !with_grads {
        return Ok((loss, terms, None));
    }
    let mut grads = s.tape.backward(total)?;
    let g = s.param_vars().iter().map(|&v| grads.take(v)).collect();
    Ok((loss, terms, Some(g)))
}

/// Forward, loss, backward and one Adam update on `batch`.
pub fn train_step(
    state: &mut TrainState,
    batch: &Batch,
    volumes: &[FeatureVolume],
    labels: &BTreeMap<u32, usize>,
    mode: Mode,
) -> Result<StepOutcome> {
    let step = state.step;
    let (loss, terms, grads) = batch_objective(&state.model, batch, volumes, labels, mode, true)?;
    if !loss.is_finite() {
        return Err(Error::Divergence { step, loss });
    }
    let grads = grads.unwrap_or_default();
    state.adam.update(state.model.store.tensors_mut(), &grads);
    if !state.model.store.all_finite() {
        return Err(Error::Divergence { step, loss: f64::NAN });
    }
    state.step += 1;
    state.history.push(LogRow { step, mode, loss });
    Ok(StepOutcome { mode, loss, terms })
}

fn write_outputs(state: &TrainState, out: &Path) -> Result<()> {
    let log = out.join("train_log.csv");
    fs::write(&log, state.log_csv()).map_err(|e| Error::io(&log, e))?;
    checkpoint::write(&state.to_checkpoint()?, &out.join("ckpt.hpk1"))
}

/// Train until `state.train.steps` steps have run, writing the log and
/// checkpoint under `out` when given.
pub fn fit_from(
    state: &mut TrainState,
    manifest: &Manifest,
    volumes: &[FeatureVolume],
    out: Option<&Path>,
) -> Result<()> {
    manifest.validate_records()?;
    if manifest.split(Split::Train).next().is_none() {
        return Err(Error::EmptyInput("manifest has no training tracklets".into()));
    }
    let labels = label_map(manifest);
    if labels.len() > state.model.config.num_identities {
        return Err(Error::Config(format!(
            "{} training identities but the classifier has {} outputs",
            labels.len(),
            state.model.config.num_identities
        )));
    }
    if let Some(dir) = out {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }
    while state.step < state.train.steps {
        let batch = sample_batch(manifest, state.train.identities_per_batch, &mut state.rng)?;
        let mode = Mode::for_step(state.step, state.train.dual_steps);
        train_step(state, &batch, volumes, &labels, mode)?;
        if let Some(dir) = out {
            let every = state.train.checkpoint_every;
            if every > 0 && state.step.is_multiple_of(every) {
                write_outputs(state, dir)?;
            }
        }
    }
    if let Some(dir) = out {
        write_outputs(state, dir)?;
    }
    Ok(())
}

pub fn fit(
    config: ModelConfig,
    train: TrainConfig,
    manifest: &Manifest,
    volumes: &[FeatureVolume],
    out: Option<&Path>,
) -> Result<TrainState> {
    let mut state = TrainState::new(config, train)?;
    fit_from(&mut state, manifest, volumes, out)?;
    Ok(state)
}

/// Classifier top-1 accuracy on the training split.
pub fn train_accuracy(model: &Model, manifest: &Manifest, volumes: &[FeatureVolume]) -> Result<f64> {
    let labels = label_map(manifest);
    let train: Vec<(usize, u32)> = manifest.split(Split::Train).map(|(i, r)| (i, r.subject_id)).collect();
    if train.is_empty() {
        return Err(Error::EmptyInput("no training tracklets".into()));
    }
    let mut correct = 0;
    for chunk in train.chunks(32) {
        let data: Vec<&Tensor> = chunk.iter().map(|&(i, _)| &volumes[i].data).collect();
        let mut s = Session::new(model, false);
        let g = s.input(stack_volumes(&data)?);
        let (emb, _) = s.forward_single(g)?;
        let logits = s.logits(emb.f)?;
        let l = s.value(logits);
        let n = l.shape()[1];
        for (r, &(_, subject)) in chunk.iter().enumerate() {
            let row = &l.data()[r * n..(r + 1) * n];
            let best = (0..n)
                .max_by(|&a, &b| row[a].total_cmp(&row[b]).then(b.cmp(&a)))
                .unwrap_or(0);
            if labels.get(&subject) == Some(&best) {
                correct += 1;
            }
        }
    }
    Ok(correct as f64 / train.len() as f64)
}

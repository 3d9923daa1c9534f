//! Finite-difference checks for every differentiable tape op and for the
//! full training objective.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::Result;
use crate::feature_store::{gen_synthetic, Cue, SyntheticSpec};
use crate::moe_core::{Model, ModelConfig};
use crate::numerics::{
    grad_check_many, mhsa_forward, relative_error, AttentionVars, GradCheckReport, Tape, Tensor, Var,
};
use crate::trainer::{batch_objective, label_map, sample_batch, Mode};

/// Central-difference step.
pub const EPS: f64 = 1e-5;
/// Pass threshold for single ops.
pub const OP_TOL: f64 = 1e-5;
/// Pass threshold for the full objective.
pub const OBJECTIVE_TOL: f64 = 1e-4;

#[derive(Clone, Debug)]
pub struct SuiteEntry {
    pub name: String,
    pub report: GradCheckReport,
}

type OpFn = fn(&mut Tape, &[Var]) -> Result<Var>;

struct OpCase {
    name: &'static str,
    shapes: &'static [&'static [usize]],
    /// Map raw uniform draws into the op's domain.
    domain: fn(f64) -> f64,
    f: OpFn,
}

fn any(x: f64) -> f64 {
    x
}

fn away_from_zero(x: f64) -> f64 {
    x.signum() * (0.1 + x.abs())
}

fn positive(x: f64) -> f64 {
    0.5 + x.abs()
}

/// Contract an arbitrary output with a fixed non-uniform weight so every
/// output element reaches the scalar with a distinct coefficient.
fn contract(tape: &mut Tape, y: Var) -> Result<Var> {
    let shape = tape.shape(y).to_vec();
    let w = tape.constant(Tensor::from_fn(&shape, |i| ((i as f64) * 0.7 + 0.3).sin() + 0.1));
    let p = tape.mul(y, w)?;
    Ok(tape.sum(p))
}

fn cases() -> Vec<OpCase> {
    macro_rules! case {
        ($name:expr, [$($s:expr),*], $dom:expr, |$t:ident, $v:ident| $body:expr) => {
            OpCase {
                name: $name,
                shapes: &[$(&$s),*],
                domain: $dom,
                f: |$t: &mut Tape, $v: &[Var]| -> Result<Var> {
                    let y = $body;
                    contract($t, y)
                },
            }
        };
    }
    vec![
        case!("add", [[3, 4], [3, 4]], any, |t, v| t.add(v[0], v[1])?),
        case!("sub", [[3, 4], [3, 4]], any, |t, v| t.sub(v[0], v[1])?),
        case!("mul", [[3, 4], [3, 4]], any, |t, v| t.mul(v[0], v[1])?),
        case!("scale", [[3, 4]], any, |t, v| t.scale(v[0], -1.7)),
        case!("offset", [[3, 4]], any, |t, v| {
            let o = t.offset(v[0], 0.4);
            t.mul(o, o)?
        }),
        case!("add_suffix", [[2, 3, 4], [3, 4]], any, |t, v| t
            .add_suffix(v[0], v[1])?),
        case!("expand", [[4]], any, |t, v| t.expand(v[0], 3)?),
        case!("bmm", [[2, 3, 4], [2, 4, 5]], any, |t, v| t
            .bmm(v[0], false, v[1], false)?),
        case!("bmm_ta", [[2, 4, 3], [2, 4, 5]], any, |t, v| t
            .bmm(v[0], true, v[1], false)?),
        case!("bmm_tb", [[2, 3, 4], [2, 5, 4]], any, |t, v| t
            .bmm(v[0], false, v[1], true)?),
        case!("bmm_ta_tb", [[2, 4, 3], [2, 5, 4]], any, |t, v| t
            .bmm(v[0], true, v[1], true)?),
        case!("matmul", [[3, 4], [4, 2]], any, |t, v| t.matmul(v[0], v[1])?),
        case!("linear", [[2, 3, 4], [4, 5], [5]], any, |t, v| t
            .linear(v[0], v[1], v[2])?),
        case!("linear_nobias", [[3, 4], [4, 5]], any, |t, v| t
            .linear_nobias(v[0], v[1])?),
        case!("reshape", [[2, 6]], any, |t, v| t.reshape(v[0], &[3, 4])?),
        case!("gelu", [[3, 4]], |x| 3.0 * x, |t, v| t.gelu(v[0])),
        case!("relu", [[3, 4]], away_from_zero, |t, v| t.relu(v[0])),
        case!("sqrt", [[3, 4]], positive, |t, v| t.sqrt(v[0])?),
        case!("rms_norm", [[3, 5]], away_from_zero, |t, v| t.rms_norm(v[0], 1e-6)?),
        case!("softmax_0", [[3, 4]], |x| 4.0 * x, |t, v| t.softmax(v[0], 0)?),
        case!("softmax_1", [[2, 3, 4]], |x| 4.0 * x, |t, v| t.softmax(v[0], 1)?),
        case!("log_softmax", [[3, 4]], |x| 4.0 * x, |t, v| t.log_softmax(v[0], 1)?),
        case!("mean", [[2, 3, 4]], any, |t, v| t.mean(v[0], 1)?),
        case!("sum", [[3, 4]], any, |t, v| {
            let s = t.sum(v[0]);
            t.mul(s, s)?
        }),
        case!("concat", [[2, 3], [2, 2]], any, |t, v| t
            .concat(&[v[0], v[1], v[0]], 1)?),
        case!("slice", [[2, 5, 3]], any, |t, v| t.slice(v[0], 1, 1, 3)?),
        case!("select", [[4, 3]], any, |t, v| t.select(v[0], &[2, 0, 2, 3])?),
        case!("gather", [[3, 5]], any, |t, v| t.gather(v[0], &[4, 0, 2])?),
        case!(
            "mhsa",
            [[2, 3, 4], [2, 5, 4], [4, 4], [4], [4, 4], [4], [4, 4], [4], [4, 4], [4]],
            any,
            |t, v| {
                let w = AttentionVars {
                    wq: v[2],
                    bq: v[3],
                    wk: v[4],
                    bk: v[5],
                    wv: v[6],
                    bv: v[7],
                    wo: v[8],
                    bo: v[9],
                };
                mhsa_forward(t, v[0], v[1], v[1], 2, &w)?
            }
        ),
    ]
}

/// Check every op at `points` random inputs; each entry keeps the worst point.
pub fn op_suite(points: usize, seed: u64) -> Result<Vec<SuiteEntry>> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut out = Vec::new();
    for case in cases() {
        let mut worst: Option<GradCheckReport> = None;
        for _ in 0..points {
            let inputs: Vec<Tensor> = case
                .shapes
                .iter()
                .map(|s| Tensor::from_fn(s, |_| (case.domain)(rng.random_range(-1.0..1.0))))
                .collect();
            let r = grad_check_many(case.f, &inputs, EPS, OP_TOL)?;
            if worst.as_ref().is_none_or(|w| r.max_rel_error > w.max_rel_error) {
                worst = Some(r);
            }
        }
        if let Some(report) = worst {
            out.push(SuiteEntry {
                name: case.name.to_string(),
                report,
            });
        }
    }
    Ok(out)
}

/// The smallest configuration that exercises every part of the model.
pub fn tiny_config(seed: u64) -> ModelConfig {
    ModelConfig {
        d: 4,
        tokens: 5,
        frames: 2,
        n1: 2,
        blocks: 1,
        heads: 2,
        num_identities: 3,
        seed,
        ..ModelConfig::default()
    }
}

/// Compare the gradient of the training loss with respect to every model
/// parameter against central differences, on one sampled batch.
pub fn objective_check(config: &ModelConfig, mode: Mode, eps: f64, tol: f64) -> Result<GradCheckReport> {
    let spec = SyntheticSpec {
        num_subjects: config.num_identities,
        tracklets_per_subject: 4,
        frames: config.frames,
        tokens: config.tokens,
        channels: config.channels(),
        cue: Cue::Mixed,
        noise_sigma: 0.1,
        seed: config.seed,
        same_clothes: true,
    };
    let (manifest, volumes) = gen_synthetic(&spec)?;
    let labels = label_map(&manifest);
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let batch = sample_batch(&manifest, 2, &mut rng)?;

    let model = Model::new(config.clone())?;
    let (_, _, grads) = batch_objective(&model, &batch, &volumes, &labels, mode, true)?;
    let grads = grads.unwrap_or_default();

    let mut probe = model.clone();
    let mut report = GradCheckReport {
        max_rel_error: 0.0,
        max_abs_error: 0.0,
        worst_coordinate: 0,
        coordinates: 0,
        tol,
        passed: true,
    };
    let mut flat = 0;
    for (pi, g) in grads.iter().enumerate() {
        let n = model.store.tensors()[pi].numel();
        for c in 0..n {
            let x0 = model.store.tensors()[pi].data()[c];
            let mut at = |x: f64| -> Result<f64> {
                probe.store.tensors_mut()[pi].data_mut()[c] = x;
                Ok(batch_objective(&probe, &batch, &volumes, &labels, mode, false)?.0)
            };
            let numeric = (at(x0 + eps)? - at(x0 - eps)?) / (2.0 * eps);
            at(x0)?;
            let analytic = g.as_ref().map_or(0.0, |g| g.data()[c]);
            report.max_abs_error = report.max_abs_error.max((analytic - numeric).abs());
            let rel = relative_error(analytic, numeric);
            if rel > report.max_rel_error {
                report.max_rel_error = rel;
                report.worst_coordinate = flat;
            }
            flat += 1;
        }
    }
    report.coordinates = flat;
    report.passed = report.max_rel_error <= tol;
    Ok(report)
}

/// Every op plus the objective in both gating modes.
pub fn run_suite(config: &ModelConfig, points: usize, seed: u64) -> Result<Vec<SuiteEntry>> {
    let mut out = op_suite(points, seed)?;
    for mode in [Mode::Single, Mode::Dual] {
        out.push(SuiteEntry {
            name: format!("objective_{}", mode.as_str()),
            report: objective_check(config, mode, EPS, OBJECTIVE_TOL)?,
        });
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn every_op_passes() {
        for e in op_suite(3, 11).unwrap() {
            assert!(e.report.passed, "{}: {:?}", e.name, e.report);
        }
    }
}

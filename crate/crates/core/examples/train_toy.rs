//! Train on a small mixed-cue dataset, checkpoint, reload and resume.
//!
//! cargo run --release --example train_toy -- 400

use biomoe::feature_store::{gen_synthetic, SyntheticSpec};
use biomoe::moe_core::{checkpoint, ModelConfig};
use biomoe::trainer::{fit, fit_from, train_accuracy, TrainConfig, TrainState};

fn main() -> biomoe::Result<()> {
    let steps: u64 = std::env::args().nth(1).and_then(|s| s.parse().ok()).unwrap_or(300);
    let spec = SyntheticSpec {
        channels: 32,
        tokens: 5,
        ..SyntheticSpec::default()
    };
    let (manifest, volumes) = gen_synthetic(&spec)?;
    let config = ModelConfig {
        d: 8,
        tokens: 5,
        frames: spec.frames,
        n1: 4,
        blocks: 1,
        num_identities: spec.num_subjects,
        lr: 3e-3,
        ..ModelConfig::default()
    };
    let dir = std::env::temp_dir().join("biomoe_train_toy");
    let half = TrainConfig {
        steps: steps / 2,
        ..TrainConfig::default()
    };
    let state = fit(config, half, &manifest, &volumes, Some(&dir))?;
    println!(
        "step {}: loss {:.4}",
        state.step,
        state.history.last().map_or(f64::NAN, |r| r.loss)
    );

    let mut resumed = TrainState::from_checkpoint(&checkpoint::read(&dir.join("ckpt.hpk1"))?)?;
    resumed.train.steps = steps;
    fit_from(&mut resumed, &manifest, &volumes, Some(&dir))?;
    for row in resumed.history.iter().step_by((steps as usize / 10).max(1)) {
        println!("step {:>4} {:<6} loss {:.4}", row.step, row.mode.as_str(), row.loss);
    }
    println!(
        "train top-1 {:.3}; log and checkpoint in {}",
        train_accuracy(&resumed.model, &manifest, &volumes)?,
        dir.display()
    );
    Ok(())
}

//! Rescore the central band of single-input similarities with dual-input
//! gating and compare rankings for several band widths.

use biomoe::evaluator::{evaluate, Protocol};
use biomoe::feature_store::{gen_synthetic, SyntheticSpec};
use biomoe::moe_core::ModelConfig;
use biomoe::trainer::{fit, TrainConfig};

fn main() -> biomoe::Result<()> {
    let seed = std::env::args().nth(1).and_then(|s| s.parse().ok()).unwrap_or(1);
    let spec = SyntheticSpec {
        channels: 32,
        tokens: 5,
        seed,
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
        seed,
        ..ModelConfig::default()
    };
    let train = TrainConfig {
        steps: 600,
        ..TrainConfig::default()
    };
    let state = fit(config, train, &manifest, &volumes, None)?;

    for q in [0.0, 10.0, 20.0, 50.0, 100.0] {
        let r = evaluate(&state.model, &manifest, &volumes, Protocol::General, q)?;
        let moved = r
            .pairs
            .iter()
            .filter(|p| p.in_band && p.final_score != p.single)
            .count();
        println!(
            "q={q:>5}: band [{:+.3}, {:+.3}] holds {:>2} pairs ({moved} moved)  top-1 {:.3} -> {:.3}  mAP {:.3} -> {:.3}",
            r.band.lower,
            r.band.upper,
            r.band.selected,
            r.single_input.top1(),
            r.top1(),
            r.single_input.map,
            r.map
        );
    }
    Ok(())
}

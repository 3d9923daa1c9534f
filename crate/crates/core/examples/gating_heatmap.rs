//! Export first-layer gate heatmaps (CSV and PGM) for one tracklet before
//! and after training.

use biomoe::evaluator::export_heatmap;
use biomoe::feature_store::{gen_synthetic, SyntheticSpec};
use biomoe::moe_core::{Model, ModelConfig};
use biomoe::trainer::{fit, TrainConfig};

fn main() -> biomoe::Result<()> {
    // 17 tokens: CLS plus a 4x4 patch grid
    let spec = SyntheticSpec {
        channels: 32,
        ..SyntheticSpec::default()
    };
    let (manifest, volumes) = gen_synthetic(&spec)?;
    let config = ModelConfig {
        d: 8,
        frames: spec.frames,
        n1: 4,
        blocks: 1,
        num_identities: spec.num_subjects,
        lr: 3e-3,
        ..ModelConfig::default()
    };
    let dir = std::env::temp_dir().join("biomoe_heatmaps");
    std::fs::create_dir_all(&dir).map_err(|e| biomoe::Error::io(&dir, e))?;
    let g = &volumes[0].data;

    let init = Model::new(config.clone())?;
    let flat = export_heatmap(&init, g, 0, 0, &dir.join("init_e0_j0"))?;
    println!("at initialization every cell is {:.4}", flat.data()[0]);

    let train = TrainConfig {
        steps: 300,
        ..TrainConfig::default()
    };
    let state = fit(config, train, &manifest, &volumes, None)?;
    for (i, j) in [(0, 0), (1, 2)] {
        let grid = export_heatmap(&state.model, g, i, j, &dir.join(format!("trained_e{i}_j{j}")))?;
        println!("expert {i} -> target {j}:");
        for row in grid.data().chunks(grid.shape()[1]) {
            let cells: Vec<String> = row.iter().map(|v| format!("{v:.3}")).collect();
            println!("  {}", cells.join(" "));
        }
    }
    println!("CSV and PGM files in {}", dir.display());
    Ok(())
}

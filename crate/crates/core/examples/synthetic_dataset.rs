//! Generate a synthetic dataset with planted cues and write it to disk.
//!
//! cargo run --example synthetic_dataset -- /tmp/biomoe_data mixed

use std::path::PathBuf;

use biomoe::feature_store::{gen_synthetic, write_dataset, Cue, Split, SyntheticSpec};

fn main() -> biomoe::Result<()> {
    let mut args = std::env::args().skip(1);
    let dir = PathBuf::from(args.next().unwrap_or_else(|| "synthetic_data".into()));
    let cue: Cue = args.next().as_deref().unwrap_or("mixed").parse()?;

    let spec = SyntheticSpec {
        cue,
        ..SyntheticSpec::default()
    };
    let (manifest, volumes) = gen_synthetic(&spec)?;
    let placed = write_dataset(&dir, &manifest, &volumes)?;
    for split in [Split::Train, Split::Query, Split::Gallery] {
        println!("{split:?}: {} tracklets", placed.split(split).count());
    }
    let w = spec.block_width();
    let v = &volumes[0];
    println!(
        "volume [T, K, C] = {:?}; first long-term channel at t=0: {:.4}; temporal block [{}, {})",
        v.data.shape(),
        v.data.get(&[0, 0, 0]),
        2 * w,
        3 * w
    );
    println!("wrote {}", dir.join("manifest.jsonl").display());
    Ok(())
}

//! Round-trip a feature volume through the HFV1 format and show the header.

use biomoe::feature_store::hfv1;
use biomoe::numerics::Tensor;

fn main() -> biomoe::Result<()> {
    let dir = std::env::temp_dir().join("biomoe_feature_file_io");
    std::fs::create_dir_all(&dir).map_err(|e| biomoe::Error::io(&dir, e))?;
    let path = dir.join("volume.hfv1");

    // T = 2 frames, K = 5 tokens (CLS + 2x2 grid), C = 8 channels
    let x = Tensor::from_fn(&[2, 5, 8], |i| (i as f64 * 0.37).sin());
    hfv1::write_tensor(&x, &path)?;

    let header = hfv1::read_header(&path)?;
    let y = hfv1::read_tensor(&path)?;
    let bytes = std::fs::metadata(&path).map_err(|e| biomoe::Error::io(&path, e))?.len();
    println!("{}: {header:?}, {bytes} bytes", path.display());
    let max_err = x
        .data()
        .iter()
        .zip(y.data())
        .map(|(a, b)| (a - b).abs())
        .fold(0.0, f64::max);
    println!("max f32 rounding error after round trip: {max_err:.2e}");

    let mut broken = std::fs::read(&path).map_err(|e| biomoe::Error::io(&path, e))?;
    broken.truncate(broken.len() - 4);
    match hfv1::decode(&broken, &path) {
        Err(e) => println!("truncated copy rejected: {e}"),
        Ok(_) => println!("truncated copy unexpectedly decoded"),
    }
    Ok(())
}

//! Finite-difference check of every tape op and of the full training
//! objective in single and dual gating modes.
//!
//! cargo run --release --example gradient_check -- 20

use biomoe::gradsuite::{run_suite, tiny_config};

fn main() -> biomoe::Result<()> {
    let points = std::env::args().nth(1).and_then(|s| s.parse().ok()).unwrap_or(10);
    let entries = run_suite(&tiny_config(0), points, 0)?;
    for e in &entries {
        println!(
            "{:<18} max_rel {:.2e}  coords {:>5}  {}",
            e.name,
            e.report.max_rel_error,
            e.report.coordinates,
            if e.report.passed { "ok" } else { "FAIL" }
        );
    }
    let failed = entries.iter().filter(|e| !e.report.passed).count();
    println!("{} checks, {failed} failed", entries.len());
    Ok(())
}

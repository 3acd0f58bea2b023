//! Time the main kernels on synthetic 960x540 inputs.
//!
//! cargo run --release --example bench

use marvis::bench::{run_bench, BenchConfig};

fn main() -> marvis::Result<()> {
    let report = run_bench(&BenchConfig::default())?;
    for t in &report.timings {
        println!(
            "{:<15} median {:>9.2} ms  {:>8.1} fps{}",
            t.kernel.name(),
            t.median_ns as f64 / 1e6,
            t.throughput_fps,
            if t.low_confidence { "  (low confidence)" } else { "" }
        );
    }
    if let Some(s) = report.lme_speedup {
        println!("LME fast kernel speedup: {s:.2}x");
    }
    Ok(())
}

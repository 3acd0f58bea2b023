//! Generate a small procedural stereo dataset and write it to disk.
//!
//! cargo run --example toy_dataset -- /tmp/toy 20

use marvis::imageio::Split;
use marvis::toyscene::{export_dataset, generate_dataset, SceneConfig};

fn main() -> marvis::Result<()> {
    let mut args = std::env::args().skip(1);
    let out = args.next().unwrap_or_else(|| "toy_dataset".into());
    let sequences: usize = args.next().and_then(|s| s.parse().ok()).unwrap_or(20);

    let samples = generate_dataset(&SceneConfig::default(), sequences)?;
    let manifest = export_dataset(&samples, &out, 0)?;
    for split in [Split::Train, Split::Val, Split::Test] {
        println!("{split:?}: {} samples", manifest.split(split).count());
    }
    let virt: f64 = samples.iter().map(|s| s.mask.count_ones() as f64 / s.mask.data.len() as f64).sum::<f64>()
        / samples.len() as f64;
    println!("mean virtual fraction {virt:.3}");
    println!("manifest at {out}/manifest.json");
    Ok(())
}

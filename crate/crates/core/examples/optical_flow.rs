//! Estimate flow between two toy frames and compare with the exact flow.

use marvis::flow::{estimate_flow, FlowConfig};
use marvis::toyscene::{generate_sequence, SceneConfig};

fn main() -> marvis::Result<()> {
    let scene = SceneConfig::default();
    let sample = &generate_sequence(&scene)?[0];
    let est = estimate_flow(&sample.prev, &sample.curr, &FlowConfig::default())?;

    let (mut real, mut virt) = ((0.0, 0usize), (0.0, 0usize));
    for ((e, g), &m) in est.vectors.iter().zip(&sample.flow.vectors).zip(&sample.mask.data) {
        let epe = ((e[0] - g[0]).powi(2) + (e[1] - g[1]).powi(2)).sqrt() as f64;
        let acc = if m == 1 { &mut virt } else { &mut real };
        acc.0 += epe;
        acc.1 += 1;
    }
    println!("{}x{} frames", est.width, est.height);
    println!("mean end-point error, real region:    {:.3} px", real.0 / real.1 as f64);
    println!("mean end-point error, virtual region: {:.3} px", virt.0 / virt.1 as f64);
    Ok(())
}

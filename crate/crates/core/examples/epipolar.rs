//! Epipolar error of stereo matches on a toy frame, with the calibrated and
//! the robustly estimated fundamental matrix.

use marvis::epipolar::{egc_error_map, EgcConfig, FundamentalSource, RansacConfig};
use marvis::toyscene::{generate_sequence, SceneConfig};

fn main() -> marvis::Result<()> {
    let scene = SceneConfig::default();
    let sample = &generate_sequence(&scene)?[0];
    let cfg = EgcConfig::default();
    let calib = egc_error_map(&sample.curr, &sample.right, &FundamentalSource::Calibration(&sample.calibration), &cfg)?;
    let est = egc_error_map(&sample.curr, &sample.right, &FundamentalSource::Estimate(RansacConfig::default()), &cfg)?;
    println!("{} matches", calib.matches.len());
    println!("calibrated F vs estimated F: max abs diff {:.2e}", calib.fundamental.max_abs_diff(&est.fundamental));

    let (mut real, mut virt) = (Vec::new(), Vec::new());
    for (l, _) in &calib.matches {
        let i = (l.y.round() as usize).min(scene.height - 1) * scene.width + (l.x.round() as usize).min(scene.width - 1);
        let bucket = if sample.mask.data[i] == 1 { &mut virt } else { &mut real };
        bucket.push(calib.map.values[i]);
    }
    let mean = |v: &[f64]| v.iter().sum::<f64>() / v.len().max(1) as f64;
    println!("real keypoints:    {:>3}, mean normalized error {:.4}", real.len(), mean(&real));
    println!("virtual keypoints: {:>3}, mean normalized error {:.4}", virt.len(), mean(&virt));
    Ok(())
}

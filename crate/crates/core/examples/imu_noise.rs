//! Corrupt a smooth angular-rate trace with the IMU noise presets.

use marvis::toyscene::{simulate_imu, ImuModel, NoisePreset, Vibration};

fn main() -> marvis::Result<()> {
    let truth: Vec<[f64; 3]> = (0..1000)
        .map(|i| {
            let t = i as f64 * 0.01;
            [0.2 * t.sin(), 0.1 * (0.5 * t).cos(), 0.05]
        })
        .collect();
    let rms = |est: &[[f64; 3]]| {
        let s: f64 = est.iter().zip(&truth).flat_map(|(e, g)| (0..3).map(move |a| (e[a] - g[a]).powi(2))).sum();
        (s / (3 * truth.len()) as f64).sqrt()
    };
    for preset in [NoisePreset::Low, NoisePreset::Medium, NoisePreset::High] {
        let noisy = simulate_imu(&truth, &ImuModel::preset(preset), 1)?;
        println!("{preset:?}: rms error {:.4}", rms(&noisy));
    }
    let shaky = ImuModel {
        vibration: Some(Vibration { amplitude: 0.02, frequency: 0.05 }),
        ..ImuModel::preset(NoisePreset::Low)
    };
    println!("Low + vibration: rms error {:.4}", rms(&simulate_imu(&truth, &shaky, 1)?));
    Ok(())
}

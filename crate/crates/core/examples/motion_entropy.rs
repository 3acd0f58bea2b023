//! Local motion entropy on a toy frame: fast vs brute-force kernels and the
//! contrast between real and virtual regions.

use std::time::Instant;

use marvis::lme::{lme_brute, lme_fast, normalize_flow_channels, LmeConfig};
use marvis::toyscene::{generate_sequence, SceneConfig};

fn main() -> marvis::Result<()> {
    let sample = &generate_sequence(&SceneConfig::default())?[0];
    let cfg = LmeConfig::default();
    let (m, a) = normalize_flow_channels(&sample.flow);

    let t = Instant::now();
    let fast = lme_fast(&m, &a, &cfg)?;
    let t_fast = t.elapsed();
    let t = Instant::now();
    let brute = lme_brute(&m, &a, &cfg)?;
    let t_brute = t.elapsed();
    assert_eq!(fast, brute);
    println!("fast {t_fast:?}, brute {t_brute:?}, identical output");

    let mean = |want: u8| {
        let v: Vec<f64> = fast.values.iter().zip(&sample.mask.data).filter(|(_, &m)| m == want).map(|(v, _)| *v).collect();
        v.iter().sum::<f64>() / v.len() as f64
    };
    println!("mean LME real {:.4}, virtual {:.4}", mean(0), mean(1));
    Ok(())
}

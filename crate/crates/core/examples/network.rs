//! Build the segmentation network, report its size and run a forward pass.

use marvis::model::{count_parameters, Marvis, ModelConfig};
use marvis::tensor::Tensor;

fn main() -> marvis::Result<()> {
    for (name, cfg) in [("default", ModelConfig::default()), ("tiny", ModelConfig::tiny())] {
        println!("{name:>8}: {:?} -> {} parameters", cfg.stage_channels, count_parameters(&cfg)?);
    }
    let model = Marvis::<f32>::new(ModelConfig::tiny())?;
    let x = Tensor::from_fn(&[2, 2, 96, 128], |i| ((i * 37) % 101) as f32 / 100.0);
    let y = model.predict(x)?;
    let (lo, hi) = y.data().iter().fold((f32::MAX, f32::MIN), |(a, b), &v| (a.min(v), b.max(v)));
    println!("output shape {:?}, range [{lo:.3}, {hi:.3}]", y.shape());
    Ok(())
}

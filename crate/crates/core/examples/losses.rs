//! Composite segmentation loss with gradients, and the evaluation metrics.

use marvis::imageio::BinaryMask;
use marvis::objective::{composite_loss, evaluate_mask, LossWeights};
use marvis::tensor::{Graph, Tensor};

fn main() -> marvis::Result<()> {
    let target: Vec<f64> = (0..16).map(|i| (i >= 8) as u8 as f64).collect();
    let pred: Vec<f64> = (0..16).map(|i| if i >= 8 { 0.8 } else { 0.3 }).collect();
    // epipolar error at two keypoints, zero elsewhere
    let mut egc = vec![0.0; 16];
    egc[2] = 0.4;
    egc[12] = 0.9;

    let mut g = Graph::<f64>::new();
    let p = g.leaf(Tensor::new(vec![1, 1, 4, 4], pred.clone())?, true);
    let terms = composite_loss(&mut g, p, &target, Some(&egc), &LossWeights::default())?;
    g.backward(terms.total)?;
    println!(
        "total {:.4} = 0.8 * bce {:.4} + 0.1 * dice {:.4} + 0.1 * egc {:.4}",
        g.item(terms.total),
        g.item(terms.bce),
        g.item(terms.dice),
        g.item(terms.egc.expect("egc map given"))
    );
    println!("d loss / d pred at the keypoints: {:.4} {:.4}", g.grad(p).unwrap()[2], g.grad(p).unwrap()[12]);

    let to_mask = |v: &[f64]| BinaryMask::new(4, 4, v.iter().map(|&x| (x >= 0.5) as u8).collect());
    let report = evaluate_mask(&to_mask(&pred)?, &to_mask(&target)?)?;
    println!("IoU {:.3}, F1 {:.3}", report.iou, report.f1);
    Ok(())
}

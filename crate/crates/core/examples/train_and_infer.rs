//! Train the tiny network on a small toy dataset, then segment a held-out
//! frame and score it.
//!
//! cargo run --release --example train_and_infer -- 24 5

use marvis::flow::FlowConfig;
use marvis::imageio::{read_mask, read_pgm, Split};
use marvis::lme::FlowSource;
use marvis::objective::evaluate_mask;
use marvis::toyscene::{export_dataset, generate_dataset, SceneConfig};
use marvis::trainer::{evaluate_prepared, infer, prepare_split, train, TrainConfig};

fn main() -> marvis::Result<()> {
    let mut args = std::env::args().skip(1);
    let sequences: usize = args.next().and_then(|s| s.parse().ok()).unwrap_or(24);
    let epochs: usize = args.next().and_then(|s| s.parse().ok()).unwrap_or(5);

    let dir = std::env::temp_dir().join("marvis_train_example");
    let samples = generate_dataset(&SceneConfig::default(), sequences)?;
    let manifest = export_dataset(&samples, dir.join("data"), 0)?;
    let cfg = TrainConfig { epochs, ..TrainConfig::default() };
    let out = train(&manifest, &cfg, dir.join("run"))?;
    for e in &out.history {
        println!("epoch {:>2} loss {:.4} val IoU {:.4}", e.epoch, e.loss, e.val_iou);
    }

    let test = prepare_split(&manifest, Split::Test, &cfg)?;
    let (agg, _) = evaluate_prepared(&out.model, &test, cfg.threshold)?;
    println!("test: {} images, mean IoU {:.4}, mean F1 {:.4}", agg.images, agg.mean_iou, agg.mean_f1);

    // the same model on raw frames, with flow estimated from the images
    let entry = manifest.split(Split::Test).next().expect("test split is non-empty");
    let prev = read_pgm(manifest.resolve(&entry.frame_prev_path))?;
    let curr = read_pgm(manifest.resolve(&entry.frame_curr_path))?;
    let gt = read_mask(manifest.resolve(&entry.mask_path))?;
    let (mask, _) = infer(&out.model, &prev, &curr, &cfg.lme, &FlowSource::Internal(FlowConfig::default()), cfg.threshold)?;
    println!("estimated-flow inference on {}: IoU {:.4}", entry.frame_curr_path.display(), evaluate_mask(&mask, &gt)?.iou);
    println!("best checkpoint {}", out.best_checkpoint.display());
    Ok(())
}

//! End-to-end acceptance suite. Each criterion prints one PASS/FAIL line;
//! the test fails if any criterion fails.

mod common;

use std::io::Write;
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::path::Path;
use std::process::Command;
use std::time::{Duration, Instant};

use nalgebra::{Matrix3, Point2, Rotation3, Vector3};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use marvis::bench::{run_bench, BenchConfig, Kernel};
use marvis::epipolar::{
    egc_error_map, estimate_fundamental, fundamental_from_calibration, EgcConfig, FundamentalSource,
    RansacConfig,
};
use marvis::flow::{FlowConfig, FlowField};
use marvis::imageio::{
    decode_checkpoint, decode_flo, decode_floatmap, decode_mask, decode_pgm, encode_checkpoint, encode_flo,
    encode_floatmap, encode_mask, encode_pgm, BinaryMask, FloatMap, GrayImage, Split,
};
use marvis::lme::{lme_brute, lme_fast, lme_from_flow, lme_from_frames, normalize_flow_channels, FlowSource, LmeConfig};
use marvis::model::{count_parameters, ModelConfig};
use marvis::objective::{bce_loss, composite_loss, dice_loss, egc_loss, evaluate_mask, LossWeights};
use marvis::tensor::{Graph, Tensor};
use marvis::toyscene::{export_dataset, generate_dataset, generate_sequence, SceneConfig};
use marvis::trainer::{evaluate_prepared, prepare_split, train, TrainConfig};

use common::{gradcheck_config, model_gradient_check, op_gradient_error, op_suite};

struct Outcome {
    pass: bool,
    detail: String,
}

fn outcome(pass: bool, detail: impl Into<String>) -> Outcome {
    Outcome {
        pass,
        detail: detail.into(),
    }
}

fn within(elapsed: Duration, limit_s: u64) -> bool {
    elapsed <= Duration::from_secs(limit_s)
}

fn random_flow(rng: &mut ChaCha8Rng, w: usize, h: usize) -> FlowField {
    let scale = rng.random_range(0.5..6.0);
    FlowField {
        width: w,
        height: h,
        vectors: (0..w * h)
            .map(|_| [rng.random_range(-scale..scale), rng.random_range(-scale..scale)])
            .collect(),
    }
}

fn lme_oracle_equivalence() -> Outcome {
    let t = Instant::now();
    let mut rng = ChaCha8Rng::seed_from_u64(2024);
    let mut mismatches = 0;
    for case in 0..200 {
        let k = [3, 5, 7, 9][case % 4];
        let bins = [4, 8, 16, 32][(case / 4) % 4];
        let (w, h) = if case % 20 == 0 {
            (256, 256)
        } else {
            (rng.random_range(k..=96), rng.random_range(k..=96))
        };
        let flow = random_flow(&mut rng, w, h);
        let (m, a) = normalize_flow_channels(&flow);
        let cfg = LmeConfig {
            receptive_field: k,
            bins,
            ..LmeConfig::default()
        };
        let fast = lme_fast(&m, &a, &cfg).unwrap();
        let brute = lme_brute(&m, &a, &cfg).unwrap();
        let same = fast
            .values
            .iter()
            .zip(&brute.values)
            .all(|(x, y)| x.to_bits() == y.to_bits());
        if !same {
            mismatches += 1;
        }
    }
    let el = t.elapsed();
    outcome(
        mismatches == 0 && within(el, 60),
        format!("200 fields, {mismatches} mismatching, {:.1}s", el.as_secs_f64()),
    )
}

fn lme_analytics() -> Outcome {
    let raw = |k: usize, bins: usize| LmeConfig {
        receptive_field: k,
        bins,
        normalize_output: false,
        ..LmeConfig::default()
    };
    // constant flow: every histogram is a single spike
    let constant = FlowField {
        width: 40,
        height: 30,
        vectors: vec![[1.5, -0.7]; 1200],
    };
    let zero_max = lme_from_flow(&constant, &raw(7, 16))
        .unwrap()
        .values
        .iter()
        .fold(0.0f64, |m, v| m.max(v.abs()));

    // k*k window whose magnitudes fill every bin equally, angles constant
    let mut worst: f64 = 0.0;
    for (k, bins) in [(3, 9), (5, 25), (3, 3), (7, 7)] {
        let n = k * k;
        let m = FloatMap {
            width: k,
            height: k,
            data: (0..n).map(|i| ((i % bins) as f32 + 0.5) / bins as f32).collect(),
        };
        let a = FloatMap {
            width: k,
            height: k,
            data: vec![0.3; n],
        };
        let centre = (k / 2) * k + k / 2;
        let one = lme_brute(&m, &a, &raw(k, bins)).unwrap().values[centre];
        let both = lme_brute(&m, &m, &raw(k, bins)).unwrap().values[centre];
        let expect = 0.5 * (bins as f64).log2();
        worst = worst.max((one - expect).abs()).max((both - 2.0 * expect).abs());
    }
    outcome(
        zero_max == 0.0 && worst <= 1e-9,
        format!("constant max {zero_max:e}, uniform max err {worst:e}"),
    )
}

fn lme_performance() -> Outcome {
    let t = Instant::now();
    let cfg = BenchConfig {
        width: 960,
        height: 540,
        repeats: 5,
        warmup: 1,
        kernels: vec![Kernel::LmeBrute, Kernel::LmeFast],
        lme: LmeConfig {
            receptive_field: 7,
            bins: 16,
            ..LmeConfig::default()
        },
        ..BenchConfig::default()
    };
    let report = run_bench(&cfg).unwrap();
    let speedup = report.lme_speedup.unwrap();
    let el = t.elapsed();
    outcome(
        speedup >= 3.0 && within(el, 30),
        format!(
            "brute {:.1} ms, fast {:.1} ms, speedup {speedup:.2}x, {:.1}s",
            report.timing(Kernel::LmeBrute).unwrap().median_ns as f64 / 1e6,
            report.timing(Kernel::LmeFast).unwrap().median_ns as f64 / 1e6,
            el.as_secs_f64()
        ),
    )
}

fn gradient_verification() -> Outcome {
    let t = Instant::now();
    let mut op_worst = (0.0, "");
    for (name, shapes, f) in op_suite() {
        let err = op_gradient_error(&shapes, &f);
        if err > op_worst.0 {
            op_worst = (err, name);
        }
    }
    let net = model_gradient_check(gradcheck_config(), 2, 32);
    let el = t.elapsed();
    outcome(
        op_worst.0 < 1e-4 && net.max_rel_err < 1e-3 && within(el, 300),
        format!(
            "ops worst {:.2e} ({}), network {:.2e} over {} params, {:.0}s",
            op_worst.0,
            op_worst.1,
            net.max_rel_err,
            net.checked,
            el.as_secs_f64()
        ),
    )
}

fn loss_analytics() -> Outcome {
    let n = 64;
    let mut g = Graph::<f64>::new();
    let half = g.leaf(Tensor::full(&[1, 1, 8, 8], 0.5), true);
    let target: Vec<f64> = (0..n).map(|i| (i % 3 == 0) as u8 as f64).collect();
    let bce = bce_loss(&mut g, half, &target).unwrap();
    let bce = g.item(bce);

    let same = g.leaf(Tensor::new(vec![1, 1, 8, 8], target.clone()).unwrap(), true);
    let dice_same = dice_loss(&mut g, same, &target).unwrap();
    let dice_same = g.item(dice_same);
    let other: Vec<f64> = target.iter().map(|t| 1.0 - t).collect();
    let disjoint = g.leaf(Tensor::new(vec![1, 1, 8, 8], other).unwrap(), true);
    let dice_disjoint = dice_loss(&mut g, disjoint, &target).unwrap();
    let dice_disjoint = g.item(dice_disjoint);

    let zero = g.leaf(Tensor::zeros(&[1, 1, 2, 2]), true);
    let egc = egc_loss(&mut g, zero, &[0.2, 0.0, 0.4, 0.0]).unwrap();
    let egc = g.item(egc);

    let mut rng = ChaCha8Rng::seed_from_u64(7);
    let p: Vec<f64> = (0..n).map(|_| rng.random_range(0.05..0.95)).collect();
    let e: Vec<f64> = (0..n).map(|i| if i % 5 == 0 { rng.random_range(0.0..1.0) } else { 0.0 }).collect();
    let pred = g.leaf(Tensor::new(vec![1, 1, 8, 8], p).unwrap(), true);
    let w = LossWeights::default();
    let terms = composite_loss(&mut g, pred, &target, Some(&e), &w).unwrap();
    let weighted =
        w.lambda_b * g.item(terms.bce) + w.lambda_d * g.item(terms.dice) + w.lambda_e * g.item(terms.egc.unwrap());
    let composite_err = (g.item(terms.total) - weighted).abs();

    let pass = (bce - std::f64::consts::LN_2).abs() <= 1e-9
        && dice_same <= 1e-6
        && dice_disjoint >= 1.0 - 1e-6
        && (egc - 0.3).abs() <= 1e-15
        && (w.lambda_b, w.lambda_d, w.lambda_e) == (0.8, 0.1, 0.1)
        && composite_err <= 1e-12;
    outcome(
        pass,
        format!(
            "bce {bce:.12}, dice same {dice_same:.1e}, dice disjoint {dice_disjoint:.9}, egc {egc}, composite err {composite_err:.1e}"
        ),
    )
}

fn camera_matches(n: usize, seed: u64) -> (marvis::epipolar::FundamentalMatrix, Vec<(Point2<f64>, Point2<f64>)>) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let k = Matrix3::new(450.0, 0.0, 320.0, 0.0, 450.0, 240.0, 0.0, 0.0, 1.0);
    let r = *Rotation3::from_euler_angles(-0.03, 0.08, 0.02).matrix();
    let t = Vector3::new(-0.8, 0.05, 0.1);
    let f = fundamental_from_calibration(&k, &k, &r, &t).unwrap();
    let pts = (0..n)
        .map(|_| {
            let p = Vector3::new(
                rng.random_range(-3.0..3.0),
                rng.random_range(-2.0..2.0),
                rng.random_range(4.0..12.0),
            );
            let (a, b) = (k * p, k * (r * p + t));
            (Point2::new(a.x / a.z, a.y / a.z), Point2::new(b.x / b.z, b.y / b.z))
        })
        .collect();
    (f, pts)
}

fn epipolar_correctness() -> Outcome {
    let t = Instant::now();
    let cfg = RansacConfig {
        inlier_threshold_px: 1.0,
        seed: 11,
        ..RansacConfig::default()
    };
    let (f, exact) = camera_matches(20, 1);
    let (est, _) = estimate_fundamental(&exact, &cfg).unwrap();
    let diff = est.max_abs_diff(&f);

    let (_, mut noisy) = camera_matches(200, 2);
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let outliers = 60;
    for m in noisy.iter_mut().take(outliers) {
        m.1 = Point2::new(rng.random_range(0.0..640.0), rng.random_range(0.0..480.0));
    }
    let (_, mask) = estimate_fundamental(&noisy, &cfg).unwrap();
    let recovered = mask[outliers..].iter().filter(|&&b| b).count() as f64 / (noisy.len() - outliers) as f64;
    let el = t.elapsed();
    outcome(
        diff < 1e-6 && recovered >= 0.95 && within(el, 10),
        format!(
            "exact max diff {diff:.1e}, inliers recovered {:.1}% with 30% outliers, {:.2}s",
            100.0 * recovered,
            el.as_secs_f64()
        ),
    )
}

fn egc_separation() -> Outcome {
    let mut ratios = Vec::new();
    for seed in 0..10 {
        let cfg = SceneConfig {
            seed,
            ..SceneConfig::default()
        };
        let s = &generate_sequence(&cfg).unwrap()[0];
        let res = egc_error_map(
            &s.curr,
            &s.right,
            &FundamentalSource::Calibration(&s.calibration),
            &EgcConfig::default(),
        )
        .unwrap();
        let (mut sv, mut nv, mut sr, mut nr) = (0.0, 0, 0.0, 0);
        for (l, _) in &res.matches {
            let x = (l.x.round() as usize).min(cfg.width - 1);
            let y = (l.y.round() as usize).min(cfg.height - 1);
            let e = res.map.values[y * cfg.width + x] as f64;
            if s.mask.data[y * cfg.width + x] == 1 {
                sv += e;
                nv += 1;
            } else {
                sr += e;
                nr += 1;
            }
        }
        assert!(nv > 0 && nr > 0, "seed {seed}: no keypoints in one region");
        let real = (sr / nr as f64).max(1e-12);
        ratios.push((sv / nv as f64) / real);
    }
    let min = ratios.iter().cloned().fold(f64::INFINITY, f64::min);
    outcome(min > 5.0, format!("virtual/real error ratio min {min:.1} over 10 seeds"))
}

/// Summed LME and pixel counts: `[virtual sum, virtual n, real sum, real n]`.
fn region_sums(values: &[f64], mask: &BinaryMask) -> [f64; 4] {
    let mut acc = [0.0; 4];
    for (&v, &m) in values.iter().zip(&mask.data) {
        let slot = if m == 1 { 0 } else { 2 };
        acc[slot] += v;
        acc[slot + 1] += 1.0;
    }
    acc
}

fn lme_discriminability() -> Outcome {
    let lc = LmeConfig::default();
    let ratio = |a: [f64; 4]| (a[0] / a[1]) / (a[2] / a[3]);
    let add = |a: &mut [f64; 4], b: [f64; 4]| a.iter_mut().zip(b).for_each(|(x, y)| *x += y);
    let (mut gt, mut est) = ([0.0; 4], [0.0; 4]);
    let mut gt_min = f64::INFINITY;
    for seed in 0..10 {
        let cfg = SceneConfig {
            seed,
            ..SceneConfig::default()
        };
        let s = &generate_sequence(&cfg).unwrap()[0];
        let g = region_sums(&lme_from_flow(&s.flow, &lc).unwrap().values, &s.mask);
        let e = lme_from_frames(&s.prev, &s.curr, &lc, &FlowSource::Internal(FlowConfig::default())).unwrap();
        gt_min = gt_min.min(ratio(g));
        add(&mut gt, g);
        add(&mut est, region_sums(&e.values, &s.mask));
    }
    let (r_gt, r_est) = (ratio(gt), ratio(est));
    outcome(
        r_gt > 2.0 && r_est > 2.0,
        format!("virtual/real LME ratio {r_gt:.2} with dataset flow (per-seed min {gt_min:.2}), {r_est:.2} with estimated flow"),
    )
}

fn toy_training(root: &Path) -> Outcome {
    let t = Instant::now();
    let data = root.join("toy");
    let samples = generate_dataset(&SceneConfig::default(), 200).unwrap();
    let manifest = export_dataset(&samples, &data, 0).unwrap();
    let mut results = Vec::new();
    for lambda_e in [0.0, 0.1] {
        let mut cfg = TrainConfig {
            epochs: 10,
            use_egc: lambda_e > 0.0,
            ..TrainConfig::default()
        };
        cfg.weights.lambda_e = lambda_e;
        let out = train(&manifest, &cfg, root.join(format!("run_{lambda_e}"))).unwrap();
        let test = prepare_split(&manifest, Split::Test, &cfg).unwrap();
        let (agg, _) = evaluate_prepared(&out.model, &test, cfg.threshold).unwrap();
        results.push((agg.mean_iou, test));
    }
    let (iou0, test) = &results[0];
    let iou_egc = results[1].0;
    // best constant mask: all virtual or all real
    let baseline = [1u8, 0]
        .iter()
        .map(|&v| {
            test.iter()
                .map(|s| {
                    let c = BinaryMask::new(s.mask.width, s.mask.height, vec![v; s.mask.data.len()]).unwrap();
                    evaluate_mask(&c, &s.mask).unwrap().iou
                })
                .sum::<f64>()
                / test.len() as f64
        })
        .fold(0.0, f64::max);
    let el = t.elapsed();
    outcome(
        *iou0 >= 0.70 && iou0 - baseline >= 0.20 && iou_egc >= iou0 - 0.02 && within(el, 1800),
        format!(
            "test IoU {iou0:.4} (lambda_E 0), {iou_egc:.4} (lambda_E 0.1), constant baseline {baseline:.4}, {:.0}s",
            el.as_secs_f64()
        ),
    )
}

fn parameter_counts() -> Outcome {
    let full = count_parameters(&ModelConfig::default()).unwrap();
    let tiny = count_parameters(&ModelConfig::tiny()).unwrap();
    outcome(
        (1_100_000..=2_000_000).contains(&full) && tiny < 100_000,
        format!("default {full}, tiny {tiny}"),
    )
}

fn cli(args: &[&str]) {
    let out = Command::new(env!("CARGO_BIN_EXE_marvis"))
        .args(["--deterministic", "--seed", "17"])
        .args(args)
        .output()
        .unwrap();
    assert!(out.status.success(), "{args:?}: {}", String::from_utf8_lossy(&out.stderr));
}

fn tree_bytes(dir: &Path) -> Vec<(String, Vec<u8>)> {
    let mut out = Vec::new();
    let mut stack = vec![dir.to_path_buf()];
    while let Some(d) = stack.pop() {
        for e in std::fs::read_dir(&d).unwrap() {
            let p = e.unwrap().path();
            if p.is_dir() {
                stack.push(p);
            } else {
                let rel = p.strip_prefix(dir).unwrap().to_string_lossy().into_owned();
                out.push((rel, std::fs::read(&p).unwrap()));
            }
        }
    }
    out.sort();
    out
}

fn reproducibility(root: &Path) -> Outcome {
    let mut runs = Vec::new();
    for run in 0..2 {
        let base = root.join(format!("repro{run}"));
        let (data, model, pred) = (base.join("data"), base.join("model"), base.join("pred"));
        let s = |p: &Path| p.to_string_lossy().into_owned();
        cli(&["gen-data", "--out", &s(&data), "--sequences", "20"]);
        cli(&["train", "--manifest", &s(&data.join("manifest.json")), "--out", &s(&model), "--epochs", "2"]);
        cli(&[
            "infer",
            "--ckpt",
            &s(&model.join("best.mrvs")),
            "--prev",
            &s(&data.join("seq0000/frame000_left.pgm")),
            "--curr",
            &s(&data.join("seq0000/frame001_left.pgm")),
            "--out",
            &s(&pred.join("mask.pgm")),
            "--prob",
            &s(&pred.join("prob.lmef")),
        ]);
        runs.push([tree_bytes(&data), tree_bytes(&model), tree_bytes(&pred)]);
    }
    let names = ["dataset", "checkpoints", "predictions"];
    let differing: Vec<&str> = names
        .iter()
        .zip(runs[0].iter().zip(&runs[1]))
        .filter(|(_, (a, b))| a != b)
        .map(|(n, _)| *n)
        .collect();
    let files: usize = runs[0].iter().map(|t| t.len()).sum();
    outcome(
        differing.is_empty(),
        format!("{files} files compared, differing: {differing:?}"),
    )
}

enum Fuzz {
    Pgm,
    Mask,
    Flo,
    Lmef,
    Mrvs,
}

fn fuzz_valid(kind: &Fuzz, rng: &mut ChaCha8Rng) -> (Vec<u8>, bool) {
    let (w, h) = (rng.random_range(1..24usize), rng.random_range(1..24usize));
    match kind {
        Fuzz::Pgm => {
            let img = GrayImage::new(w, h, (0..w * h).map(|_| rng.random_range(0..=255u8) as f32 / 255.0).collect()).unwrap();
            let bytes = encode_pgm(&img);
            let back = decode_pgm(&bytes).unwrap();
            (bytes.clone(), back == img && encode_pgm(&back) == bytes)
        }
        Fuzz::Mask => {
            let mask = BinaryMask::new(w, h, (0..w * h).map(|_| rng.random_range(0..2u8)).collect()).unwrap();
            let bytes = encode_mask(&mask);
            (bytes.clone(), decode_mask(&bytes).unwrap() == mask)
        }
        Fuzz::Flo => {
            let flow = random_flow(rng, w, h);
            let bytes = encode_flo(&flow);
            (bytes.clone(), decode_flo(&bytes).unwrap() == flow)
        }
        Fuzz::Lmef => {
            let map = FloatMap::new(w, h, (0..w * h).map(|_| rng.random_range(-1e3..1e3)).collect()).unwrap();
            let bytes = encode_floatmap(&map).unwrap();
            (bytes.clone(), decode_floatmap(&bytes).unwrap() == map)
        }
        Fuzz::Mrvs => {
            let entries: Vec<(String, Tensor<f32>)> = (0..rng.random_range(0..4))
                .map(|i| {
                    let shape: Vec<usize> = (0..rng.random_range(0..4)).map(|_| rng.random_range(1..5)).collect();
                    (format!("layer{i}.w"), Tensor::from_fn(&shape, |_| rng.random_range(-2.0..2.0)))
                })
                .collect();
            let bytes = encode_checkpoint(&entries).unwrap();
            (bytes.clone(), decode_checkpoint(&bytes).unwrap() == entries)
        }
    }
}

/// `Ok(true)` if decoding succeeded, `Ok(false)` on a typed error, `Err` on panic.
fn decode_any(kind: &Fuzz, bytes: &[u8]) -> Result<bool, ()> {
    catch_unwind(AssertUnwindSafe(|| match kind {
        Fuzz::Pgm => decode_pgm(bytes).is_ok(),
        Fuzz::Mask => decode_mask(bytes).is_ok(),
        Fuzz::Flo => decode_flo(bytes).is_ok(),
        Fuzz::Lmef => decode_floatmap(bytes).is_ok(),
        Fuzz::Mrvs => decode_checkpoint(bytes).is_ok(),
    }))
    .map_err(drop)
}

fn format_round_trips() -> Outcome {
    let kinds = [Fuzz::Pgm, Fuzz::Mask, Fuzz::Flo, Fuzz::Lmef, Fuzz::Mrvs];
    let mut rng = ChaCha8Rng::seed_from_u64(99);
    let (mut round_trip_failures, mut accepted_malformed, mut crashes, mut mutated_ok) = (0, 0, 0, 0);
    let hook = std::panic::take_hook();
    std::panic::set_hook(Box::new(|_| {}));
    for case in 0..1000 {
        let kind = &kinds[case % kinds.len()];
        let (bytes, ok) = fuzz_valid(kind, &mut rng);
        if !ok {
            round_trip_failures += 1;
        }
        // structurally broken: truncated, extended, or wrong magic
        let mut broken = bytes.clone();
        match rng.random_range(0..3) {
            0 => broken.truncate(rng.random_range(0..bytes.len())),
            1 => broken.extend((0..rng.random_range(1..9)).map(|_| rng.random::<u8>())),
            _ => broken[0] = b'#',
        }
        match decode_any(kind, &broken) {
            Ok(true) => accepted_malformed += 1,
            Ok(false) => {}
            Err(()) => crashes += 1,
        }
        // arbitrary corruption may or may not stay valid, but must not crash
        let mut mutated = bytes;
        for _ in 0..rng.random_range(1..6) {
            let i = rng.random_range(0..mutated.len());
            mutated[i] = rng.random();
        }
        match decode_any(kind, &mutated) {
            Ok(true) => mutated_ok += 1,
            Ok(false) => {}
            Err(()) => crashes += 1,
        }
    }
    std::panic::set_hook(hook);
    outcome(
        round_trip_failures == 0 && accepted_malformed == 0 && crashes == 0,
        format!(
            "1000 cases: {round_trip_failures} round-trip failures, {accepted_malformed} malformed accepted, {crashes} crashes ({mutated_ok} random mutations still valid)"
        ),
    )
}

#[test]
fn acceptance() {
    let tmp = tempfile::tempdir().unwrap();
    let root = tmp.path();
    let criteria: Vec<(&str, Box<dyn Fn() -> Outcome + '_>)> = vec![
        ("LME oracle equivalence", Box::new(lme_oracle_equivalence)),
        ("LME analytics", Box::new(lme_analytics)),
        ("LME kernel performance", Box::new(lme_performance)),
        ("gradient verification", Box::new(gradient_verification)),
        ("loss analytics", Box::new(loss_analytics)),
        ("epipolar correctness", Box::new(epipolar_correctness)),
        ("EGC separation", Box::new(egc_separation)),
        ("LME discriminability", Box::new(lme_discriminability)),
        ("end-to-end toy training", Box::new(|| toy_training(root))),
        ("parameter counts", Box::new(parameter_counts)),
        ("reproducibility", Box::new(|| reproducibility(root))),
        ("format round-trips", Box::new(format_round_trips)),
    ];
    let mut failed = Vec::new();
    for (i, (name, run)) in criteria.iter().enumerate() {
        let o = run();
        // written to the real stdout so the verdicts show without --nocapture
        let line = format!("[{}] {:>2}. {name}: {}\n", if o.pass { "PASS" } else { "FAIL" }, i + 1, o.detail);
        let mut out = std::io::stdout().lock();
        out.write_all(line.as_bytes()).unwrap();
        out.flush().unwrap();
        if !o.pass {
            failed.push(*name);
        }
    }
    assert!(failed.is_empty(), "failed criteria: {failed:?}");
}

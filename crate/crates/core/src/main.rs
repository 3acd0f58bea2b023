use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use serde::de::DeserializeOwned;
use serde::Serialize;

use marvis::bench::{run_bench, BenchConfig, Kernel};
use marvis::epipolar::{egc_error_map, EgcConfig, FundamentalSource, RansacConfig, StereoCalibration};
use marvis::flow::{estimate_flow, FlowConfig};
use marvis::imageio::{read_flo, read_floatmap, read_mask, read_pgm, write_flo, write_floatmap, write_mask, DatasetManifest};
use marvis::lme::{lme_from_flow, lme_from_frames, FlowSource, LmeConfig};
use marvis::model::Marvis;
use marvis::objective::{aggregate, evaluate, evaluate_mask, Aggregate, EvalReport};
use marvis::toyscene::{export_dataset, generate_dataset, SceneConfig};
use marvis::trainer::{infer, train, TrainConfig};
use marvis::{Error, Result};

/// Real-versus-virtual image region segmentation toolkit.
#[derive(Parser)]
#[command(name = "marvis", version)]
struct Cli {
    /// Worker threads for parallel kernels.
    #[arg(long, global = true)]
    threads: Option<usize>,
    /// Run every kernel serially for bit-reproducible output.
    #[arg(long, global = true)]
    deterministic: bool,
    /// Overrides the seed of randomized subcommands.
    #[arg(long, global = true)]
    seed: Option<u64>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a procedural stereo dataset with masks, flow and calibration.
    GenData(GenData),
    /// Estimate optical flow between two frames.
    Flow(FlowCmd),
    /// Compute a local motion entropy map.
    Lme(LmeCmd),
    /// Build a normalized epipolar error map from a stereo pair.
    EgcMap(EgcCmd),
    /// Train a segmentation model on a dataset manifest.
    Train(TrainCmd),
    /// Segment a frame with a trained checkpoint.
    Infer(InferCmd),
    /// Score predicted masks against ground truth.
    Eval(EvalCmd),
    /// Time the main kernels on synthetic inputs.
    Bench(BenchCmd),
}

#[derive(Args)]
struct GenData {
    /// Scene configuration JSON; defaults are used for missing fields.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    out: PathBuf,
    /// Frame pairs per sequence.
    #[arg(long)]
    frames: Option<usize>,
    #[arg(long, default_value_t = 200)]
    sequences: usize,
}

#[derive(Args)]
struct FlowCmd {
    #[arg(long)]
    prev: PathBuf,
    #[arg(long)]
    curr: PathBuf,
    #[arg(long)]
    out: PathBuf,
    #[arg(long)]
    config: Option<PathBuf>,
}

#[derive(Args)]
struct LmeCmd {
    /// Previous frame (with --curr) when no --flow file is given.
    #[arg(long, requires = "curr")]
    prev: Option<PathBuf>,
    #[arg(long)]
    curr: Option<PathBuf>,
    /// Precomputed `.flo` flow.
    #[arg(long, conflicts_with_all = ["prev", "curr"])]
    flow: Option<PathBuf>,
    #[arg(long)]
    out: PathBuf,
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    receptive_field: Option<usize>,
    #[arg(long)]
    bins: Option<usize>,
}

#[derive(Args)]
struct EgcCmd {
    #[arg(long)]
    left: PathBuf,
    #[arg(long)]
    right: PathBuf,
    /// Stereo calibration JSON; without it F is estimated robustly.
    #[arg(long)]
    calib: Option<PathBuf>,
    #[arg(long)]
    out: PathBuf,
    #[arg(long)]
    config: Option<PathBuf>,
}

#[derive(Args)]
struct TrainCmd {
    #[arg(long)]
    manifest: PathBuf,
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    out: PathBuf,
    #[arg(long)]
    epochs: Option<usize>,
    /// Estimate flow from frames instead of reading the dataset's flow files.
    #[arg(long)]
    estimated_flow: bool,
}

#[derive(Args)]
struct InferCmd {
    #[arg(long)]
    ckpt: PathBuf,
    #[arg(long)]
    prev: PathBuf,
    #[arg(long)]
    curr: PathBuf,
    #[arg(long)]
    out: PathBuf,
    /// Also write the probability map (LMEF).
    #[arg(long)]
    prob: Option<PathBuf>,
    #[arg(long, default_value_t = 0.5)]
    threshold: f32,
    /// LME configuration JSON.
    #[arg(long)]
    config: Option<PathBuf>,
}

#[derive(Args)]
struct EvalCmd {
    /// Directory of predicted masks (.pgm) or probability maps (.lmef).
    #[arg(long)]
    pred: PathBuf,
    /// Directory of ground-truth masks (.pgm).
    #[arg(long)]
    gt: PathBuf,
    #[arg(long, default_value_t = 0.5)]
    threshold: f32,
    #[arg(long)]
    report: PathBuf,
}

#[derive(Args)]
struct BenchCmd {
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    width: Option<usize>,
    #[arg(long)]
    height: Option<usize>,
    #[arg(long)]
    repeats: Option<usize>,
    /// Comma-separated subset of lme_brute, lme_fast, estimate_flow, marvis_forward.
    #[arg(long, value_delimiter = ',')]
    kernels: Option<Vec<String>>,
    #[arg(long, default_value = "bench.json")]
    out: PathBuf,
}

fn load_json<T: DeserializeOwned + Default>(path: Option<&Path>) -> Result<T> {
    match path {
        Some(p) => {
            let bytes = std::fs::read(p).map_err(|e| Error::Io {
                path: p.to_path_buf(),
                source: e,
            })?;
            Ok(serde_json::from_slice(&bytes)?)
        }
        None => Ok(T::default()),
    }
}

/// Create the directory an output file will be written into.
fn ensure_parent(path: &Path) -> Result<()> {
    match path.parent().filter(|d| !d.as_os_str().is_empty()) {
        Some(dir) => std::fs::create_dir_all(dir).map_err(|e| Error::Io {
            path: dir.to_path_buf(),
            source: e,
        }),
        None => Ok(()),
    }
}

fn write_json<T: Serialize>(value: &T, path: &Path) -> Result<()> {
    ensure_parent(path)?;
    let mut text = serde_json::to_string_pretty(value)?;
    text.push('\n');
    std::fs::write(path, text).map_err(|e| Error::Io {
        path: path.to_path_buf(),
        source: e,
    })
}

fn gen_data(a: GenData, seed: Option<u64>) -> Result<()> {
    let mut cfg: SceneConfig = load_json(a.config.as_deref())?;
    if let Some(f) = a.frames {
        cfg.frames = f;
    }
    if let Some(s) = seed {
        cfg.seed = s;
    }
    let samples = generate_dataset(&cfg, a.sequences)?;
    let manifest = export_dataset(&samples, &a.out, cfg.seed)?;
    println!("wrote {} samples to {}", manifest.entries.len(), a.out.join("manifest.json").display());
    Ok(())
}

fn flow_cmd(a: FlowCmd) -> Result<()> {
    let cfg: FlowConfig = load_json(a.config.as_deref())?;
    let flow = estimate_flow(&read_pgm(&a.prev)?, &read_pgm(&a.curr)?, &cfg)?;
    ensure_parent(&a.out)?;
    write_flo(&flow, &a.out)
}

fn lme_cmd(a: LmeCmd) -> Result<()> {
    let mut cfg: LmeConfig = load_json(a.config.as_deref())?;
    if let Some(k) = a.receptive_field {
        cfg.receptive_field = k;
    }
    if let Some(b) = a.bins {
        cfg.bins = b;
    }
    let map = match (a.flow, a.prev, a.curr) {
        (Some(f), _, _) => lme_from_flow(&read_flo(f)?, &cfg)?,
        (None, Some(p), Some(c)) => {
            lme_from_frames(&read_pgm(p)?, &read_pgm(c)?, &cfg, &FlowSource::Internal(FlowConfig::default()))?
        }
        _ => return Err(Error::Config("lme needs --flow or both --prev and --curr".into())),
    };
    ensure_parent(&a.out)?;
    write_floatmap(&map.to_floatmap(), &a.out)
}

fn egc_cmd(a: EgcCmd, seed: Option<u64>) -> Result<()> {
    let cfg: EgcConfig = load_json(a.config.as_deref())?;
    let (left, right) = (read_pgm(&a.left)?, read_pgm(&a.right)?);
    let calib = a.calib.as_ref().map(StereoCalibration::load).transpose()?;
    let source = match &calib {
        Some(c) => FundamentalSource::Calibration(c),
        None => FundamentalSource::Estimate(RansacConfig {
            seed: seed.unwrap_or(0),
            ..RansacConfig::default()
        }),
    };
    let result = egc_error_map(&left, &right, &source, &cfg)?;
    println!("{} matches, {} nonzero pixels", result.matches.len(), result.map.nonzero_count());
    ensure_parent(&a.out)?;
    write_floatmap(&result.map.to_floatmap(), &a.out)
}

fn train_cmd(a: TrainCmd, seed: Option<u64>) -> Result<()> {
    let mut cfg: TrainConfig = load_json(a.config.as_deref())?;
    if let Some(e) = a.epochs {
        cfg.epochs = e;
    }
    if a.estimated_flow {
        cfg.estimated_flow = true;
    }
    if let Some(s) = seed {
        cfg.seed = s;
        cfg.model.seed = s;
    }
    let manifest = DatasetManifest::load(&a.manifest)?;
    let out = train(&manifest, &cfg, &a.out)?;
    println!(
        "best epoch {} val IoU {:.4}; checkpoints in {}",
        out.best_epoch,
        out.best_val_iou,
        a.out.display()
    );
    Ok(())
}

fn infer_cmd(a: InferCmd) -> Result<()> {
    let cfg: LmeConfig = load_json(a.config.as_deref())?;
    let model = Marvis::<f32>::load(&a.ckpt)?;
    let (mask, prob) = infer(
        &model,
        &read_pgm(&a.prev)?,
        &read_pgm(&a.curr)?,
        &cfg,
        &FlowSource::Internal(FlowConfig::default()),
        a.threshold,
    )?;
    ensure_parent(&a.out)?;
    write_mask(&mask, &a.out)?;
    if let Some(p) = a.prob {
        ensure_parent(&p)?;
        write_floatmap(&prob, p)?;
    }
    Ok(())
}

#[derive(Serialize)]
struct EvalEntry {
    name: String,
    #[serde(flatten)]
    report: EvalReport,
}

#[derive(Serialize)]
struct EvalOutput {
    threshold: f32,
    aggregate: Aggregate,
    images: Vec<EvalEntry>,
}

fn eval_cmd(a: EvalCmd) -> Result<()> {
    let io = |p: &Path, e| Error::Io {
        path: p.to_path_buf(),
        source: e,
    };
    let mut names: Vec<PathBuf> = std::fs::read_dir(&a.gt)
        .map_err(|e| io(&a.gt, e))?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| p.extension().is_some_and(|x| x == "pgm"))
        .collect();
    names.sort();
    if names.is_empty() {
        return Err(Error::Validation(format!("no .pgm masks in {}", a.gt.display())));
    }
    let mut images = Vec::with_capacity(names.len());
    for gt_path in names {
        let gt = read_mask(&gt_path)?;
        let stem = gt_path.file_stem().unwrap_or_default();
        let as_mask = a.pred.join(gt_path.file_name().unwrap_or_default());
        let as_prob = a.pred.join(stem).with_extension("lmef");
        let report = if as_mask.is_file() {
            evaluate_mask(&read_mask(&as_mask)?, &gt)?
        } else if as_prob.is_file() {
            evaluate(&read_floatmap(&as_prob)?, &gt, a.threshold)?
        } else {
            return Err(Error::Validation(format!(
                "no prediction for {} in {}",
                gt_path.display(),
                a.pred.display()
            )));
        };
        images.push(EvalEntry {
            name: stem.to_string_lossy().into_owned(),
            report,
        });
    }
    let reports: Vec<EvalReport> = images.iter().map(|e| e.report).collect();
    let agg = aggregate(&reports);
    println!(
        "{} images: mean IoU {:.4}, mean F1 {:.4}, pooled IoU {:.4}",
        agg.images, agg.mean_iou, agg.mean_f1, agg.pooled.iou
    );
    write_json(
        &EvalOutput {
            threshold: a.threshold,
            aggregate: agg,
            images,
        },
        &a.report,
    )
}

fn bench_cmd(a: BenchCmd, seed: Option<u64>) -> Result<()> {
    let mut cfg: BenchConfig = load_json(a.config.as_deref())?;
    if let Some(w) = a.width {
        cfg.width = w;
    }
    if let Some(h) = a.height {
        cfg.height = h;
    }
    if let Some(r) = a.repeats {
        cfg.repeats = r;
    }
    if let Some(s) = seed {
        cfg.seed = s;
    }
    if let Some(ks) = a.kernels {
        cfg.kernels = ks.iter().map(|k| Kernel::parse(k)).collect::<Result<_>>()?;
    }
    let report = run_bench(&cfg)?;
    for t in &report.timings {
        println!(
            "{:<15} median {:>12.3} ms{}",
            t.kernel.name(),
            t.median_ns as f64 / 1e6,
            if t.low_confidence { "  (low confidence)" } else { "" }
        );
    }
    if let Some(s) = report.lme_speedup {
        println!("lme speedup {s:.2}x");
    }
    write_json(&report, &a.out)
}

fn exit_code(e: &Error) -> u8 {
    match e {
        Error::Numeric(_) => 3,
        Error::Config(_) => 1,
        _ => 2,
    }
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { 1 } else { 0 };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    let threads = if cli.deterministic { Some(1) } else { cli.threads };
    if let Some(n) = threads {
        if let Err(e) = rayon::ThreadPoolBuilder::new().num_threads(n.max(1)).build_global() {
            eprintln!("error: cannot configure {n} threads: {e}");
            return ExitCode::from(1);
        }
    }
    let seed = cli.seed;
    let result = match cli.command {
        Command::GenData(a) => gen_data(a, seed),
        Command::Flow(a) => flow_cmd(a),
        Command::Lme(a) => lme_cmd(a),
        Command::EgcMap(a) => egc_cmd(a, seed),
        Command::Train(a) => train_cmd(a, seed),
        Command::Infer(a) => infer_cmd(a),
        Command::Eval(a) => eval_cmd(a),
        Command::Bench(a) => bench_cmd(a, seed),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(exit_code(&e))
        }
    }
}

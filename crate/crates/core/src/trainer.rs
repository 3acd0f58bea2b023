//! Training loop: manifest samples → LME map → network → composite loss →
//! AdamW, with per-epoch learning-rate decay, validation and checkpoints.

use std::io::Write as _;
use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::epipolar::{egc_error_map, EgcConfig, FundamentalSource, StereoCalibration};
use crate::error::{Error, Result};
use crate::flow::FlowConfig;
use crate::imageio::{read_flo, read_mask, read_pgm, BinaryMask, DatasetManifest, FloatMap, GrayImage, ManifestEntry, Split};
use crate::lme::{lme_from_flow, lme_from_frames, FlowSource, LmeConfig};
use crate::model::{Marvis, Mode, ModelConfig, DOWNSAMPLE};
use crate::objective::{aggregate, composite_loss, evaluate, Aggregate, EvalReport, LossWeights};
use crate::tensor::{Element, Graph, Tensor};

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct AdamWConfig {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
}

impl Default for AdamWConfig {
    fn default() -> Self {
        Self {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            weight_decay: 0.01,
        }
    }
}

/// First and second moment estimates, one buffer per parameter tensor.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct AdamState {
    pub step: u64,
    pub m: Vec<Vec<f64>>,
    pub v: Vec<Vec<f64>>,
}

impl AdamState {
    pub fn new<T: Element>(params: &[(String, Tensor<T>)]) -> Self {
        Self {
            step: 0,
            m: params.iter().map(|(_, t)| vec![0.0; t.numel()]).collect(),
            v: params.iter().map(|(_, t)| vec![0.0; t.numel()]).collect(),
        }
    }
}

/// One AdamW update: decoupled weight decay `p -= lr·wd·p`, then the
/// bias-corrected Adam step.
pub fn adamw_step<T: Element>(
    params: &mut [(String, Tensor<T>)],
    grads: &[Vec<T>],
    state: &mut AdamState,
    lr: f64,
    cfg: &AdamWConfig,
) -> Result<()> {
    if grads.len() != params.len() || state.m.len() != params.len() {
        return Err(Error::Shape(format!(
            "{} parameters, {} gradients, {} optimizer slots",
            params.len(),
            grads.len(),
            state.m.len()
        )));
    }
    for (i, ((name, p), g)) in params.iter().zip(grads).enumerate() {
        if g.len() != p.numel() || state.m[i].len() != p.numel() {
            return Err(Error::Shape(format!(
                "{name}: {} values, gradient {}, optimizer slot {}",
                p.numel(),
                g.len(),
                state.m[i].len()
            )));
        }
    }
    state.step += 1;
    let t = state.step as i32;
    let c1 = 1.0 - cfg.beta1.powi(t);
    let c2 = 1.0 - cfg.beta2.powi(t);
    for (i, ((_, p), g)) in params.iter_mut().zip(grads).enumerate() {
        let (m, v) = (&mut state.m[i], &mut state.v[i]);
        for (j, (pv, &gv)) in p.data_mut().iter_mut().zip(g).enumerate() {
            let gv = gv.to_f64();
            let mut x = pv.to_f64();
            x -= lr * cfg.weight_decay * x;
            m[j] = cfg.beta1 * m[j] + (1.0 - cfg.beta1) * gv;
            v[j] = cfg.beta2 * v[j] + (1.0 - cfg.beta2) * gv * gv;
            let mh = m[j] / c1;
            let vh = v[j] / c2;
            x -= lr * mh / (vh.sqrt() + cfg.eps);
            *pv = T::from_f64(x);
        }
    }
    Ok(())
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub lr: f64,
    /// Multiplicative learning-rate factor applied after every epoch.
    pub lr_decay: f64,
    pub optimizer: AdamWConfig,
    pub weights: LossWeights,
    pub seed: u64,
    /// Include the epipolar term when a sample has a stereo view and calibration.
    pub use_egc: bool,
    /// Estimate flow from the frames instead of reading the exact `.flo`.
    pub estimated_flow: bool,
    pub flow: FlowConfig,
    pub lme: LmeConfig,
    pub egc: EgcConfig,
    pub model: ModelConfig,
    pub threshold: f32,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            epochs: 30,
            batch_size: 4,
            lr: 1e-3,
            lr_decay: 0.9,
            optimizer: AdamWConfig::default(),
            weights: LossWeights::default(),
            seed: 0,
            use_egc: true,
            estimated_flow: false,
            flow: FlowConfig::default(),
            lme: LmeConfig::default(),
            egc: EgcConfig::default(),
            model: ModelConfig::tiny(),
            threshold: 0.5,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.lr >= 0.0 && self.lr.is_finite()) {
            return Err(Error::Config(format!("learning rate must be finite and non-negative, got {}", self.lr)));
        }
        if !(self.lr_decay > 0.0 && self.lr_decay <= 1.0) {
            return Err(Error::Config(format!("lr_decay must be in (0, 1], got {}", self.lr_decay)));
        }
        if self.epochs == 0 || self.batch_size == 0 {
            return Err(Error::Config("epochs and batch_size must be at least 1".into()));
        }
        self.weights.validate()?;
        self.lme.validate()?;
        self.model.validate()
    }
}

/// Network input and supervision for one sample, padded to a multiple of 32.
#[derive(Clone, Debug, PartialEq)]
pub struct Prepared {
    pub width: usize,
    pub height: usize,
    /// Padded size.
    pub padded: (usize, usize),
    /// `[2, H', W']`: frame then LME map.
    pub input: Vec<f32>,
    pub target: Vec<f32>,
    /// Normalized epipolar error, zero where there is no match.
    pub egc: Option<Vec<f32>>,
    pub mask: BinaryMask,
}

fn padded_len(n: usize) -> usize {
    n.div_ceil(DOWNSAMPLE) * DOWNSAMPLE
}

/// Mirror index into `0..n` (edge not repeated), periodic beyond one reflection.
fn reflect(i: usize, n: usize) -> usize {
    if n == 1 {
        return 0;
    }
    let period = 2 * (n - 1);
    let r = i % period;
    if r < n {
        r
    } else {
        period - r
    }
}

/// Reflect-pad a row-major plane on the bottom and right.
pub fn reflect_pad<T: Copy>(data: &[T], w: usize, h: usize, pw: usize, ph: usize) -> Vec<T> {
    let mut out = Vec::with_capacity(pw * ph);
    for y in 0..ph {
        let sy = reflect(y, h);
        for x in 0..pw {
            out.push(data[sy * w + reflect(x, w)]);
        }
    }
    out
}

fn crop<T: Copy>(data: &[T], pw: usize, w: usize, h: usize) -> Vec<T> {
    (0..h).flat_map(|y| data[y * pw..y * pw + w].iter().copied()).collect()
}

/// Stack a frame and its LME map into a padded two-channel input.
pub fn network_input(frame: &GrayImage, lme: &FloatMap) -> Result<(Vec<f32>, usize, usize)> {
    if (frame.width, frame.height) != (lme.width, lme.height) {
        return Err(Error::Shape(format!(
            "frame {}x{} vs LME map {}x{}",
            frame.width, frame.height, lme.width, lme.height
        )));
    }
    let (w, h) = (frame.width, frame.height);
    let (pw, ph) = (padded_len(w), padded_len(h));
    let mut input = reflect_pad(&frame.data, w, h, pw, ph);
    input.extend(reflect_pad(&lme.data, w, h, pw, ph));
    Ok((input, pw, ph))
}

/// Load one manifest entry and derive its LME map and, if requested and
/// possible, its epipolar error map.
pub fn prepare(manifest: &DatasetManifest, entry: &ManifestEntry, cfg: &TrainConfig) -> Result<Prepared> {
    let prev = read_pgm(manifest.resolve(&entry.frame_prev_path))?;
    let curr = read_pgm(manifest.resolve(&entry.frame_curr_path))?;
    let mask = read_mask(manifest.resolve(&entry.mask_path))?;
    if (mask.width, mask.height) != (curr.width, curr.height) {
        return Err(Error::Shape(format!(
            "mask {}x{} vs frame {}x{}",
            mask.width, mask.height, curr.width, curr.height
        )));
    }
    let lme = match (&entry.flow_path, cfg.estimated_flow) {
        (Some(flow), false) => lme_from_flow(&read_flo(manifest.resolve(flow))?, &cfg.lme)?,
        _ => lme_from_frames(&prev, &curr, &cfg.lme, &FlowSource::Internal(cfg.flow))?,
    };
    let (input, pw, ph) = network_input(&curr, &lme.to_floatmap())?;
    let (w, h) = (curr.width, curr.height);
    let target = reflect_pad(&mask.data, w, h, pw, ph).into_iter().map(f32::from).collect();

    let egc = match (&entry.stereo_right_path, manifest.calib_path(entry)) {
        (Some(right), Some(calib)) if cfg.use_egc => {
            let right = read_pgm(manifest.resolve(right))?;
            let calib = StereoCalibration::load(calib)?;
            let result = egc_error_map(&curr, &right, &FundamentalSource::Calibration(&calib), &cfg.egc)?;
            let map = result.map.to_floatmap().data;
            let mut padded = vec![0.0f32; pw * ph];
            for y in 0..h {
                padded[y * pw..y * pw + w].copy_from_slice(&map[y * w..(y + 1) * w]);
            }
            Some(padded)
        }
        _ => None,
    };
    Ok(Prepared {
        width: w,
        height: h,
        padded: (pw, ph),
        input,
        target,
        egc,
        mask,
    })
}

pub fn prepare_split(manifest: &DatasetManifest, split: Split, cfg: &TrainConfig) -> Result<Vec<Prepared>> {
    let entries: Vec<&ManifestEntry> = manifest.split(split).collect();
    entries.par_iter().map(|e| prepare(manifest, e, cfg)).collect()
}

/// Probability map at the sample's original size (eval-mode network).
pub fn predict_prepared(model: &Marvis<f32>, sample: &Prepared) -> Result<FloatMap> {
    let (pw, ph) = sample.padded;
    let x = Tensor::new(vec![1, 2, ph, pw], sample.input.clone())?;
    let prob = model.predict(x)?;
    FloatMap::new(sample.width, sample.height, crop(prob.data(), pw, sample.width, sample.height))
}

/// Per-sample metrics and their aggregate.
pub fn evaluate_prepared(model: &Marvis<f32>, samples: &[Prepared], threshold: f32) -> Result<(Aggregate, Vec<EvalReport>)> {
    let reports = samples
        .iter()
        .map(|s| evaluate(&predict_prepared(model, s)?, &s.mask, threshold))
        .collect::<Result<Vec<_>>>()?;
    Ok((aggregate(&reports), reports))
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochLog {
    pub epoch: usize,
    pub lr: f64,
    pub loss: f64,
    pub bce: f64,
    pub dice: f64,
    /// Mean over the steps that had an epipolar term.
    pub egc: Option<f64>,
    pub val_iou: f64,
    pub val_f1: f64,
}

pub struct TrainOutcome {
    pub best_checkpoint: PathBuf,
    pub last_checkpoint: PathBuf,
    pub log_path: PathBuf,
    pub best_epoch: usize,
    pub best_val_iou: f64,
    pub history: Vec<EpochLog>,
    pub model: Marvis<f32>,
}

struct StepLosses {
    total: f64,
    bce: f64,
    dice: f64,
    egc: Option<f64>,
}

fn train_step(
    model: &mut Marvis<f32>,
    state: &mut AdamState,
    batch: &[&Prepared],
    cfg: &TrainConfig,
    lr: f64,
    step: usize,
) -> Result<StepLosses> {
    let (pw, ph) = batch[0].padded;
    if let Some(b) = batch.iter().find(|b| b.padded != (pw, ph)) {
        return Err(Error::Shape(format!(
            "batch mixes padded sizes {pw}x{ph} and {}x{}",
            b.padded.0, b.padded.1
        )));
    }
    let input: Vec<f32> = batch.iter().flat_map(|b| b.input.iter().copied()).collect();
    let target: Vec<f32> = batch.iter().flat_map(|b| b.target.iter().copied()).collect();
    let egc: Option<Vec<f32>> = batch.iter().any(|b| b.egc.is_some()).then(|| {
        batch
            .iter()
            .flat_map(|b| b.egc.clone().unwrap_or_else(|| vec![0.0; pw * ph]))
            .collect()
    });

    let mut g = Graph::new();
    let x = g.constant(Tensor::new(vec![batch.len(), 2, ph, pw], input)?);
    let fwd = model.forward(&mut g, x, Mode::Train)?;
    let terms = composite_loss(&mut g, fwd.output, &target, egc.as_deref(), &cfg.weights)?;
    let losses = StepLosses {
        total: g.item(terms.total) as f64,
        bce: g.item(terms.bce) as f64,
        dice: g.item(terms.dice) as f64,
        egc: terms.egc.map(|v| g.item(v) as f64),
    };
    if !losses.total.is_finite() {
        return Err(Error::Numeric(format!(
            "non-finite loss at step {step} (lr {lr:e}): total {}, bce {}, dice {}, egc {:?}",
            losses.total, losses.bce, losses.dice, losses.egc
        )));
    }
    g.backward(terms.total)?;
    let grads = model.gradients(&g, &fwd);
    if let Some((i, _)) = grads.iter().enumerate().find(|(_, gr)| gr.iter().any(|v| !v.is_finite())) {
        return Err(Error::Numeric(format!(
            "non-finite gradient for {} at step {step} (lr {lr:e}, loss {})",
            model.params()[i].0,
            losses.total
        )));
    }
    adamw_step(model.params_mut(), &grads, state, lr, &cfg.optimizer)?;
    model.update_running_stats(&fwd);
    Ok(losses)
}

/// Train on prepared samples. With `out_dir`, writes `log.jsonl`,
/// `best.mrvs` (highest validation IoU) and `last.mrvs`.
pub fn train_prepared(train: &[Prepared], val: &[Prepared], cfg: &TrainConfig, out_dir: &Path) -> Result<TrainOutcome> {
    cfg.validate()?;
    if train.is_empty() || val.is_empty() {
        return Err(Error::Config(format!(
            "training needs non-empty train and val splits, got {} and {}",
            train.len(),
            val.len()
        )));
    }
    std::fs::create_dir_all(out_dir).map_err(|e| Error::io(out_dir, e))?;
    let log_path = out_dir.join("log.jsonl");
    let best_checkpoint = out_dir.join("best.mrvs");
    let last_checkpoint = out_dir.join("last.mrvs");
    let mut log = std::fs::File::create(&log_path).map_err(|e| Error::io(&log_path, e))?;

    let model_cfg = ModelConfig {
        input_channels: 2,
        ..cfg.model.clone()
    };
    let mut model = Marvis::<f32>::new(model_cfg)?;
    let mut state = AdamState::new(model.params());
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut order: Vec<usize> = (0..train.len()).collect();
    let mut lr = cfg.lr;
    let mut history = Vec::with_capacity(cfg.epochs);
    let (mut best_epoch, mut best_val_iou) = (0, f64::NEG_INFINITY);
    let mut step = 0;

    for epoch in 0..cfg.epochs {
        order.shuffle(&mut rng);
        let (mut sum, mut sb, mut sd, mut se, mut ne, mut steps) = (0.0, 0.0, 0.0, 0.0, 0usize, 0usize);
        for chunk in order.chunks(cfg.batch_size) {
            let batch: Vec<&Prepared> = chunk.iter().map(|&i| &train[i]).collect();
            let l = train_step(&mut model, &mut state, &batch, cfg, lr, step)?;
            step += 1;
            steps += 1;
            sum += l.total;
            sb += l.bce;
            sd += l.dice;
            if let Some(e) = l.egc {
                se += e;
                ne += 1;
            }
        }
        let (val_agg, _) = evaluate_prepared(&model, val, cfg.threshold)?;
        let n = steps as f64;
        let entry = EpochLog {
            epoch,
            lr,
            loss: sum / n,
            bce: sb / n,
            dice: sd / n,
            egc: (ne > 0).then(|| se / ne as f64),
            val_iou: val_agg.mean_iou,
            val_f1: val_agg.mean_f1,
        };
        writeln!(log, "{}", serde_json::to_string(&entry)?).map_err(|e| Error::io(&log_path, e))?;
        if entry.val_iou > best_val_iou {
            best_val_iou = entry.val_iou;
            best_epoch = epoch;
            model.save(&best_checkpoint)?;
        }
        history.push(entry);
        lr *= cfg.lr_decay;
    }
    model.save(&last_checkpoint)?;
    let best = Marvis::load(&best_checkpoint)?;
    Ok(TrainOutcome {
        best_checkpoint,
        last_checkpoint,
        log_path,
        best_epoch,
        best_val_iou,
        history,
        model: best,
    })
}

/// Prepare the manifest's train and val splits and train on them.
pub fn train(manifest: &DatasetManifest, cfg: &TrainConfig, out_dir: impl AsRef<Path>) -> Result<TrainOutcome> {
    cfg.validate()?;
    let train = prepare_split(manifest, Split::Train, cfg)?;
    let val = prepare_split(manifest, Split::Val, cfg)?;
    train_prepared(&train, &val, cfg, out_dir.as_ref())
}

/// Segment `curr` using motion from `prev`. Frames of any size are
/// reflect-padded to a multiple of 32 and the result cropped back.
pub fn infer(
    model: &Marvis<f32>,
    prev: &GrayImage,
    curr: &GrayImage,
    lme_cfg: &LmeConfig,
    flow: &FlowSource,
    threshold: f32,
) -> Result<(BinaryMask, FloatMap)> {
    let lme = lme_from_frames(prev, curr, lme_cfg, flow)?;
    let (input, pw, ph) = network_input(curr, &lme.to_floatmap())?;
    let sample = Prepared {
        width: curr.width,
        height: curr.height,
        padded: (pw, ph),
        input,
        target: Vec::new(),
        egc: None,
        mask: BinaryMask::zeros(curr.width, curr.height),
    };
    let prob = predict_prepared(model, &sample)?;
    Ok((crate::objective::threshold_map(&prob, threshold), prob))
}

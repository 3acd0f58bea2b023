//! Wall-clock timing of the main kernels on synthetic inputs.

use std::time::Instant;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::flow::{estimate_flow, FlowConfig, FlowField};
use crate::imageio::GrayImage;
use crate::lme::{lme_brute, lme_fast, normalize_flow_channels, LmeConfig};
use crate::model::{Marvis, ModelConfig, DOWNSAMPLE};
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Kernel {
    LmeBrute,
    LmeFast,
    EstimateFlow,
    MarvisForward,
}

impl Kernel {
    pub const ALL: [Kernel; 4] = [Kernel::LmeBrute, Kernel::LmeFast, Kernel::EstimateFlow, Kernel::MarvisForward];

    pub fn name(self) -> &'static str {
        match self {
            Kernel::LmeBrute => "lme_brute",
            Kernel::LmeFast => "lme_fast",
            Kernel::EstimateFlow => "estimate_flow",
            Kernel::MarvisForward => "marvis_forward",
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        Self::ALL
            .into_iter()
            .find(|k| k.name() == s)
            .ok_or_else(|| Error::Config(format!("unknown kernel {s:?}")))
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct BenchConfig {
    pub width: usize,
    pub height: usize,
    pub repeats: usize,
    pub warmup: usize,
    pub kernels: Vec<Kernel>,
    pub lme: LmeConfig,
    pub flow: FlowConfig,
    pub model: ModelConfig,
    pub seed: u64,
}

impl Default for BenchConfig {
    fn default() -> Self {
        Self {
            width: 960,
            height: 540,
            repeats: 5,
            warmup: 1,
            kernels: Kernel::ALL.to_vec(),
            lme: LmeConfig::default(),
            flow: FlowConfig::default(),
            model: ModelConfig::tiny(),
            seed: 0,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct KernelTiming {
    pub kernel: Kernel,
    pub median_ns: u64,
    pub runs_ns: Vec<u64>,
    /// Fewer than five timed runs.
    pub low_confidence: bool,
    /// Frames per second at the median time.
    pub throughput_fps: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BenchReport {
    pub config: BenchConfig,
    pub timings: Vec<KernelTiming>,
    /// `lme_brute` median over `lme_fast` median, when both ran.
    pub lme_speedup: Option<f64>,
}

impl BenchReport {
    pub fn timing(&self, kernel: Kernel) -> Option<&KernelTiming> {
        self.timings.iter().find(|t| t.kernel == kernel)
    }

    /// Structural checks on a (possibly deserialized) report.
    pub fn validate(&self) -> Result<()> {
        for t in &self.timings {
            let mut sorted = t.runs_ns.clone();
            sorted.sort_unstable();
            if sorted.is_empty() || sorted[sorted.len() / 2] != t.median_ns {
                return Err(Error::Validation(format!("{}: median does not match runs", t.kernel.name())));
            }
            if t.low_confidence != (t.runs_ns.len() < 5) {
                return Err(Error::Validation(format!("{}: wrong confidence flag", t.kernel.name())));
            }
        }
        if let (Some(b), Some(f)) = (self.timing(Kernel::LmeBrute), self.timing(Kernel::LmeFast)) {
            let expect = b.median_ns as f64 / f.median_ns.max(1) as f64;
            if self.lme_speedup.is_none_or(|s| (s - expect).abs() > 1e-9 * expect) {
                return Err(Error::Validation("speedup does not match timings".into()));
            }
        }
        Ok(())
    }
}

fn time_runs(warmup: usize, repeats: usize, mut f: impl FnMut() -> Result<()>) -> Result<Vec<u64>> {
    for _ in 0..warmup {
        f()?;
    }
    (0..repeats)
        .map(|_| {
            let t = Instant::now();
            f()?;
            Ok(t.elapsed().as_nanos() as u64)
        })
        .collect()
}

/// Random flow whose local statistics vary, so the LME histograms are busy.
pub fn synthetic_flow(width: usize, height: usize, seed: u64) -> FlowField {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    FlowField {
        width,
        height,
        vectors: (0..width * height)
            .map(|_| [rng.random_range(-4.0..4.0), rng.random_range(-4.0..4.0)])
            .collect(),
    }
}

/// Smooth random texture and a copy shifted by a few pixels.
fn synthetic_frames(width: usize, height: usize, seed: u64) -> (GrayImage, GrayImage) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let (cw, ch) = (width / 4 + 2, height / 4 + 2);
    let lattice: Vec<f32> = (0..cw * ch).map(|_| rng.random_range(0.0..1.0)).collect();
    let sample = |x: usize, y: usize| {
        let (fx, fy) = (x as f32 / 4.0, y as f32 / 4.0);
        let (ix, iy) = (fx as usize, fy as usize);
        let (tx, ty) = (fx - ix as f32, fy - iy as f32);
        let v = |c: usize, r: usize| lattice[r.min(ch - 1) * cw + c.min(cw - 1)];
        (v(ix, iy) * (1.0 - tx) + v(ix + 1, iy) * tx) * (1.0 - ty) + (v(ix, iy + 1) * (1.0 - tx) + v(ix + 1, iy + 1) * tx) * ty
    };
    let img = |dx: usize, dy: usize| GrayImage {
        width,
        height,
        data: (0..width * height).map(|i| sample(i % width + dx, i / width + dy)).collect(),
    };
    (img(3, 1), img(0, 0))
}

pub fn run_bench(cfg: &BenchConfig) -> Result<BenchReport> {
    if cfg.width == 0 || cfg.height == 0 || cfg.repeats == 0 {
        return Err(Error::Config("bench needs positive dimensions and repeats".into()));
    }
    cfg.lme.validate()?;
    let flow = synthetic_flow(cfg.width, cfg.height, cfg.seed);
    let (m, a) = normalize_flow_channels(&flow);
    let (prev, curr) = synthetic_frames(cfg.width, cfg.height, cfg.seed);
    let mut timings = Vec::new();
    for &kernel in &cfg.kernels {
        let runs = match kernel {
            Kernel::LmeBrute => time_runs(cfg.warmup, cfg.repeats, || lme_brute(&m, &a, &cfg.lme).map(drop))?,
            Kernel::LmeFast => time_runs(cfg.warmup, cfg.repeats, || lme_fast(&m, &a, &cfg.lme).map(drop))?,
            Kernel::EstimateFlow => {
                time_runs(cfg.warmup, cfg.repeats, || estimate_flow(&prev, &curr, &cfg.flow).map(drop))?
            }
            Kernel::MarvisForward => {
                let model = Marvis::<f32>::new(cfg.model.clone())?;
                let (pw, ph) = (cfg.width.div_ceil(DOWNSAMPLE) * DOWNSAMPLE, cfg.height.div_ceil(DOWNSAMPLE) * DOWNSAMPLE);
                let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
                let x = Tensor::from_fn(&[1, cfg.model.input_channels, ph, pw], |_| rng.random_range(0.0..1.0));
                time_runs(cfg.warmup, cfg.repeats, || model.predict(x.clone()).map(drop))?
            }
        };
        let mut sorted = runs.clone();
        sorted.sort_unstable();
        let median_ns = sorted[sorted.len() / 2];
        timings.push(KernelTiming {
            kernel,
            median_ns,
            low_confidence: runs.len() < 5,
            runs_ns: runs,
            throughput_fps: 1e9 / median_ns.max(1) as f64,
        });
    }
    let median = |k| timings.iter().find(|t: &&KernelTiming| t.kernel == k).map(|t| t.median_ns);
    let lme_speedup = match (median(Kernel::LmeBrute), median(Kernel::LmeFast)) {
        (Some(b), Some(f)) => Some(b as f64 / f.max(1) as f64),
        _ => None,
    };
    Ok(BenchReport {
        config: cfg.clone(),
        timings,
        lme_speedup,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small(repeats: usize) -> BenchConfig {
        BenchConfig {
            width: 96,
            height: 64,
            repeats,
            ..BenchConfig::default()
        }
    }

    #[test]
    fn report_round_trips_and_validates() {
        let r = run_bench(&small(5)).unwrap();
        assert_eq!(r.timings.len(), 4);
        assert!(r.lme_speedup.unwrap() > 0.0);
        r.validate().unwrap();
        let back: BenchReport = serde_json::from_str(&serde_json::to_string(&r).unwrap()).unwrap();
        assert_eq!(back, r);
        back.validate().unwrap();
    }

    #[test]
    fn single_run_is_flagged() {
        let r = run_bench(&BenchConfig {
            kernels: vec![Kernel::LmeFast],
            ..small(1)
        })
        .unwrap();
        assert!(r.timings[0].low_confidence);
        assert!(r.lme_speedup.is_none());
    }

    #[test]
    fn kernel_names_parse() {
        for k in Kernel::ALL {
            assert_eq!(Kernel::parse(k.name()).unwrap(), k);
        }
        assert!(Kernel::parse("nope").is_err());
    }
}

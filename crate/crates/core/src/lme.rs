//! Local motion entropy: a weighted sum of the Shannon entropies of the
//! flow-magnitude and flow-angle histograms inside a sliding window.
//!
//! Both implementations bin values identically and evaluate the entropy
//! from integer counts with one shared lookup table, so they agree bit for
//! bit.

use std::path::PathBuf;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::flow::{estimate_flow, flow_angle, FlowConfig, FlowField};
use crate::imageio::{read_flo, FloatMap, GrayImage};

pub const MAX_BINS: usize = 4096;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct LmeConfig {
    /// Odd window side `k`.
    pub receptive_field: usize,
    pub bins: usize,
    /// Weight of the magnitude entropy.
    pub alpha: f64,
    /// Weight of the angle entropy.
    pub beta: f64,
    /// Divide by `(alpha + beta) * log2(bins)` so values lie in `[0, 1]`.
    pub normalize_output: bool,
}

impl Default for LmeConfig {
    fn default() -> Self {
        Self {
            receptive_field: 7,
            bins: 16,
            alpha: 0.5,
            beta: 0.5,
            normalize_output: true,
        }
    }
}

impl LmeConfig {
    pub fn validate(&self) -> Result<()> {
        let k = self.receptive_field;
        if k < 3 || k % 2 == 0 {
            return Err(Error::Config(format!("receptive field must be odd and >= 3, got {k}")));
        }
        if !(2..=MAX_BINS).contains(&self.bins) {
            return Err(Error::Config(format!("bins must be in [2, {MAX_BINS}], got {}", self.bins)));
        }
        if !(self.alpha >= 0.0 && self.beta >= 0.0 && self.alpha + self.beta > 0.0) {
            return Err(Error::Config(format!(
                "weights must be non-negative with a positive sum, got alpha {} beta {}",
                self.alpha, self.beta
            )));
        }
        Ok(())
    }

    /// Largest possible raw entropy.
    pub fn max_entropy(&self) -> f64 {
        (self.alpha + self.beta) * (self.bins as f64).log2()
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct EntropyMap {
    pub width: usize,
    pub height: usize,
    pub values: Vec<f64>,
    pub config: LmeConfig,
}

impl EntropyMap {
    pub fn get(&self, x: usize, y: usize) -> f64 {
        self.values[y * self.width + x]
    }

    pub fn to_floatmap(&self) -> FloatMap {
        FloatMap {
            width: self.width,
            height: self.height,
            data: self.values.iter().map(|&v| v as f32).collect(),
        }
    }
}

/// Magnitudes scaled by the field's global maximum, and angles divided by `2*pi`.
pub fn normalize_flow_channels(flow: &FlowField) -> (FloatMap, FloatMap) {
    let mags: Vec<f64> = flow
        .vectors
        .iter()
        .map(|&[u, v]| (u as f64).hypot(v as f64))
        .collect();
    let max = mags.iter().copied().fold(0.0, f64::max).max(1e-12);
    let m = mags.iter().map(|&m| (m / max).clamp(0.0, 1.0) as f32).collect();
    let a = flow
        .vectors
        .iter()
        .map(|&[u, v]| {
            let a = (flow_angle(u as f64, v as f64) / std::f64::consts::TAU) as f32;
            // rounding to f32 may land exactly on 1, which is the same direction as 0
            if a >= 1.0 {
                0.0
            } else {
                a
            }
        })
        .collect();
    let wrap = |data| FloatMap {
        width: flow.width,
        height: flow.height,
        data,
    };
    (wrap(m), wrap(a))
}

/// Equal-width bin over `[0, 1]`; 1.0 falls in the top bin.
#[inline]
pub fn bin_index(v: f32, bins: usize) -> usize {
    let v = v.clamp(0.0, 1.0) as f64;
    ((v * bins as f64) as usize).min(bins - 1)
}

/// `table[c] = -(c/n) * log2(c/n)` with `table[0] = 0`.
fn entropy_table(n: usize) -> Vec<f64> {
    (0..=n)
        .map(|c| {
            if c == 0 || c == n {
                0.0
            } else {
                let p = c as f64 / n as f64;
                -p * p.log2()
            }
        })
        .collect()
}

struct Prepared {
    width: usize,
    height: usize,
    m_bins: Vec<u16>,
    a_bins: Vec<u16>,
    table: Vec<f64>,
    scale: f64,
}

impl Prepared {
    fn new(m: &FloatMap, a: &FloatMap, cfg: &LmeConfig) -> Result<Self> {
        cfg.validate()?;
        if m.width != a.width || m.height != a.height {
            return Err(Error::Shape(format!(
                "magnitude map {}x{} and angle map {}x{} differ",
                m.width, m.height, a.width, a.height
            )));
        }
        let bins = |map: &FloatMap| map.data.iter().map(|&v| bin_index(v, cfg.bins) as u16).collect();
        Ok(Self {
            width: m.width,
            height: m.height,
            m_bins: bins(m),
            a_bins: bins(a),
            table: entropy_table(cfg.receptive_field * cfg.receptive_field),
            scale: if cfg.normalize_output {
                1.0 / cfg.max_entropy()
            } else {
                1.0
            },
        })
    }

    /// The one place entropy is evaluated, shared by both implementations.
    #[inline]
    fn entropy(&self, cfg: &LmeConfig, hm: &[u32], ha: &[u32]) -> f64 {
        let mut sm = 0.0;
        for &c in hm {
            sm += self.table[c as usize];
        }
        let mut sa = 0.0;
        for &c in ha {
            sa += self.table[c as usize];
        }
        (cfg.alpha * sm + cfg.beta * sa) * self.scale
    }

    fn finish(self, cfg: &LmeConfig, values: Vec<f64>) -> EntropyMap {
        EntropyMap {
            width: self.width,
            height: self.height,
            values,
            config: *cfg,
        }
    }
}

/// Reference implementation: rebuilds both histograms at every pixel.
pub fn lme_brute(m_norm: &FloatMap, a_norm: &FloatMap, cfg: &LmeConfig) -> Result<EntropyMap> {
    let p = Prepared::new(m_norm, a_norm, cfg)?;
    let (w, h) = (p.width, p.height);
    let r = (cfg.receptive_field / 2) as isize;
    let mut values = vec![0.0; w * h];
    values.par_chunks_mut(w.max(1)).enumerate().for_each(|(y, row)| {
        let mut hm = vec![0u32; cfg.bins];
        let mut ha = vec![0u32; cfg.bins];
        for (x, out) in row.iter_mut().enumerate() {
            hm.fill(0);
            ha.fill(0);
            for dy in -r..=r {
                let sy = (y as isize + dy).clamp(0, h as isize - 1) as usize;
                for dx in -r..=r {
                    let sx = (x as isize + dx).clamp(0, w as isize - 1) as usize;
                    hm[p.m_bins[sy * w + sx] as usize] += 1;
                    ha[p.a_bins[sy * w + sx] as usize] += 1;
                }
            }
            *out = p.entropy(cfg, &hm, &ha);
        }
    });
    Ok(p.finish(cfg, values))
}

/// Sliding-histogram implementation: moving one column right removes the
/// `k` samples of the leaving column and adds the `k` of the entering one.
pub fn lme_fast(m_norm: &FloatMap, a_norm: &FloatMap, cfg: &LmeConfig) -> Result<EntropyMap> {
    let p = Prepared::new(m_norm, a_norm, cfg)?;
    let (w, h) = (p.width, p.height);
    if w * h == 0 {
        return Ok(p.finish(cfg, Vec::new()));
    }
    let (k, nb) = (cfg.receptive_field, cfg.bins);
    let r = k / 2;
    // replicate-padded, column-major grid of (magnitude bin, angle bin + B)
    // pairs: one joint histogram of 2B counts serves both channels, and each
    // window column is a contiguous run
    let ph = h + 2 * r;
    let mut grid = Vec::with_capacity((w + 2 * r) * ph);
    for px in 0..w + 2 * r {
        let x = px.saturating_sub(r).min(w - 1);
        for py in 0..ph {
            let i = py.saturating_sub(r).min(h - 1) * w + x;
            grid.push([p.m_bins[i], p.a_bins[i] + nb as u16]);
        }
    }
    let column = |x: usize, y: usize| &grid[x * ph + y..x * ph + y + k];
    let mut values = vec![0.0; w * h];
    values.par_chunks_mut(w).enumerate().for_each(|(y, row)| {
        let mut hist = vec![0u32; 2 * nb];
        for x in 0..k {
            for &[m, a] in column(x, y) {
                hist[m as usize] += 1;
                hist[a as usize] += 1;
            }
        }
        for (x, out) in row.iter_mut().enumerate() {
            if x > 0 {
                for (&[lm, la], &[em, ea]) in column(x - 1, y).iter().zip(column(x + k - 1, y)) {
                    hist[lm as usize] -= 1;
                    hist[la as usize] -= 1;
                    hist[em as usize] += 1;
                    hist[ea as usize] += 1;
                }
            }
            let (hm, ha) = hist.split_at(nb);
            *out = p.entropy(cfg, hm, ha);
        }
    });
    Ok(p.finish(cfg, values))
}

/// Where `lme_from_frames` takes its motion from.
#[derive(Clone, Debug)]
pub enum FlowSource {
    /// Estimate flow from the frames.
    Internal(FlowConfig),
    /// Ingest a precomputed `.flo` file.
    File(PathBuf),
}

pub fn lme_from_frames(
    prev: &GrayImage,
    curr: &GrayImage,
    cfg: &LmeConfig,
    source: &FlowSource,
) -> Result<EntropyMap> {
    if prev.width != curr.width || prev.height != curr.height {
        return Err(Error::Shape(format!(
            "frames differ in size: {}x{} vs {}x{}",
            prev.width, prev.height, curr.width, curr.height
        )));
    }
    let flow = match source {
        FlowSource::Internal(fc) => estimate_flow(prev, curr, fc)?,
        FlowSource::File(path) => {
            let flow = read_flo(path)?;
            if flow.width != prev.width || flow.height != prev.height {
                return Err(Error::Shape(format!(
                    "flow {}x{} does not match frames {}x{}",
                    flow.width, flow.height, prev.width, prev.height
                )));
            }
            flow
        }
    };
    lme_from_flow(&flow, cfg)
}

pub fn lme_from_flow(flow: &FlowField, cfg: &LmeConfig) -> Result<EntropyMap> {
    let (m, a) = normalize_flow_channels(flow);
    lme_fast(&m, &a, cfg)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random_maps(w: usize, h: usize, seed: u64) -> (FloatMap, FloatMap) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut gen = || FloatMap {
            width: w,
            height: h,
            data: (0..w * h).map(|_| rng.random_range(0.0..=1.0)).collect(),
        };
        (gen(), gen())
    }

    /// Independent per-pixel computation straight from the definition.
    fn oracle(m: &FloatMap, a: &FloatMap, cfg: &LmeConfig) -> Vec<f64> {
        let (w, h, k) = (m.width as isize, m.height as isize, cfg.receptive_field as isize);
        let n = (k * k) as f64;
        let mut out = Vec::new();
        for y in 0..h {
            for x in 0..w {
                let mut cm = vec![0usize; cfg.bins];
                let mut ca = vec![0usize; cfg.bins];
                for yy in y - k / 2..=y + k / 2 {
                    for xx in x - k / 2..=x + k / 2 {
                        let i = (yy.clamp(0, h - 1) * w + xx.clamp(0, w - 1)) as usize;
                        let bin = |v: f32| (((v as f64) * cfg.bins as f64).floor() as usize).min(cfg.bins - 1);
                        cm[bin(m.data[i])] += 1;
                        ca[bin(a.data[i])] += 1;
                    }
                }
                let ent = |c: &[usize]| {
                    let mut s = 0.0;
                    for &c in c {
                        if c > 0 && c as f64 != n {
                            let p = c as f64 / n;
                            s += -p * p.log2();
                        }
                    }
                    s
                };
                let raw = cfg.alpha * ent(&cm) + cfg.beta * ent(&ca);
                out.push(if cfg.normalize_output {
                    raw * (1.0 / cfg.max_entropy())
                } else {
                    raw
                });
            }
        }
        out
    }

    #[test]
    fn brute_matches_independent_oracle() {
        let (m, a) = random_maps(32, 32, 4);
        let cfg = LmeConfig::default();
        assert_eq!(lme_brute(&m, &a, &cfg).unwrap().values, oracle(&m, &a, &cfg));
    }

    #[test]
    fn fast_equals_brute() {
        for (i, &(k, b, w, h)) in [(3, 4, 17, 9), (5, 8, 1, 1), (7, 16, 40, 23), (9, 32, 12, 30)]
            .iter()
            .enumerate()
        {
            let (m, a) = random_maps(w, h, i as u64);
            let cfg = LmeConfig {
                receptive_field: k,
                bins: b,
                ..LmeConfig::default()
            };
            assert_eq!(lme_fast(&m, &a, &cfg).unwrap(), lme_brute(&m, &a, &cfg).unwrap());
        }
    }

    #[test]
    fn constant_flow_has_zero_entropy() {
        let flow = FlowField {
            width: 20,
            height: 10,
            vectors: vec![[1.5, -2.0]; 200],
        };
        let map = lme_from_flow(&flow, &LmeConfig::default()).unwrap();
        assert!(map.values.iter().all(|&v| v == 0.0));
    }

    #[test]
    fn uniform_window_reaches_half_log_bins() {
        // 7x7 map whose 49 magnitudes fill 7 bins with 7 samples each
        let data = (0..49).map(|i| ((i % 7) as f32 + 0.5) / 7.0).collect();
        let m = FloatMap::new(7, 7, data).unwrap();
        let a = FloatMap::zeros(7, 7);
        let cfg = LmeConfig {
            bins: 7,
            normalize_output: false,
            ..LmeConfig::default()
        };
        let h = lme_brute(&m, &a, &cfg).unwrap().get(3, 3);
        assert!((h - 0.5 * 7f64.log2()).abs() < 1e-9, "{h}");
    }

    #[test]
    fn channel_normalization() {
        let flow = FlowField {
            width: 3,
            height: 1,
            vectors: vec![[10.0, 0.0], [0.0, 5.0], [0.0, -1.0]],
        };
        let (m, a) = normalize_flow_channels(&flow);
        assert_eq!(m.data, vec![1.0, 0.5, 0.1]);
        assert_eq!(a.data, vec![0.0, 0.25, 0.75]);
        let zero = FlowField::zeros(4, 4);
        let (m, a) = normalize_flow_channels(&zero);
        assert!(m.data.iter().chain(&a.data).all(|&v| v == 0.0));
    }

    #[test]
    fn bins_are_half_open_with_closed_top() {
        assert_eq!(bin_index(0.0, 16), 0);
        assert_eq!(bin_index(1.0 / 16.0, 16), 1);
        assert_eq!(bin_index(1.0, 16), 15);
    }

    #[test]
    fn config_and_shape_errors() {
        let (m, a) = random_maps(4, 4, 0);
        for cfg in [
            LmeConfig { receptive_field: 4, ..LmeConfig::default() },
            LmeConfig { receptive_field: 1, ..LmeConfig::default() },
            LmeConfig { bins: 1, ..LmeConfig::default() },
            LmeConfig { alpha: 0.0, beta: 0.0, ..LmeConfig::default() },
        ] {
            assert!(matches!(lme_fast(&m, &a, &cfg), Err(Error::Config(_))));
        }
        let other = FloatMap::zeros(4, 5);
        assert!(matches!(lme_brute(&m, &other, &LmeConfig::default()), Err(Error::Shape(_))));
    }
}

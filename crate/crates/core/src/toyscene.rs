//! Procedural stereo sequences with exact real/virtual labels.
//!
//! Above the waterline the camera sees a static textured backdrop and
//! moving sprites. Below it sees a vertically mirrored copy of that band,
//! attenuated by turbidity, displaced by per-frame Gaussian jitter and
//! warped by a travelling vertical ripple whose phase differs between the
//! two eyes. The per-eye ripple is what makes the reflection violate the
//! epipolar constraint; a clean planar mirror would not.

use std::f64::consts::{PI, TAU};
use std::path::{Path, PathBuf};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::epipolar::StereoCalibration;
use crate::error::{Error, Result};
use crate::flow::FlowField;
use crate::imageio::{
    assign_splits, write_flo, write_mask, write_pgm, BinaryMask, DatasetManifest, GrayImage, ManifestEntry,
    SplitFractions,
};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum SpriteShape {
    Disk,
    Square,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SpriteSpec {
    pub shape: SpriteShape,
    /// Radius (disk) or half side (square), pixels.
    pub size: f64,
    /// Centre at frame 0, pixels.
    pub start: [f64; 2],
    /// Pixels per frame.
    pub velocity: [f64; 2],
    pub texture_seed: u64,
}

/// Travelling vertical row displacement `amplitude · sin(2π x / wavelength
/// + phase_speed · t + eye phase)` applied to the reflection.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct Ripple {
    pub amplitude: f64,
    pub wavelength: f64,
    /// Radians per frame.
    pub phase_speed: f64,
    /// Phase of the right eye relative to the left, radians.
    pub stereo_phase: f64,
}

impl Default for Ripple {
    fn default() -> Self {
        Self {
            amplitude: 2.0,
            wavelength: 24.0,
            phase_speed: 1.3,
            stereo_phase: PI / 2.0,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SceneConfig {
    pub width: usize,
    pub height: usize,
    /// First row of the reflection band.
    pub waterline_row: usize,
    pub sprites: Vec<SpriteSpec>,
    /// Perpendicular wobble of sprite paths, as a fraction of speed.
    pub sprite_wobble: f64,
    /// Standard deviation of the per-frame reflection displacement, pixels.
    pub jitter_sigma: f64,
    pub ripple: Ripple,
    /// Backdrop disparity in pixels; sprites sit at twice this.
    pub stereo_baseline: f64,
    /// Number of samples (frame pairs) per sequence.
    pub frames: usize,
    /// Contrast attenuation of the reflection toward mid-gray, in `[0, 1]`.
    pub turbidity: f64,
    pub seed: u64,
}

impl Default for SceneConfig {
    fn default() -> Self {
        Self {
            width: 96,
            height: 96,
            waterline_row: 48,
            sprites: vec![
                SpriteSpec {
                    shape: SpriteShape::Disk,
                    size: 7.0,
                    start: [26.0, 22.0],
                    velocity: [1.0, 0.0],
                    texture_seed: 1,
                },
                SpriteSpec {
                    shape: SpriteShape::Square,
                    size: 6.0,
                    start: [66.0, 30.0],
                    velocity: [-0.8, 0.3],
                    texture_seed: 2,
                },
            ],
            sprite_wobble: 0.3,
            jitter_sigma: 1.5,
            ripple: Ripple::default(),
            stereo_baseline: 2.0,
            frames: 2,
            turbidity: 0.3,
            seed: 0,
        }
    }
}

const WOBBLE_PERIOD: f64 = 8.0;
/// Texture margin around the frame so that warped reflection lookups stay
/// inside the generated lattice.
const MARGIN: f64 = 64.0;

impl SceneConfig {
    fn sprite_disparity(&self) -> f64 {
        2.0 * self.stereo_baseline
    }

    fn sprite_center(&self, s: &SpriteSpec, t: f64) -> [f64; 2] {
        let [vx, vy] = s.velocity;
        let wob = self.sprite_wobble * (TAU * t / WOBBLE_PERIOD).sin();
        // perpendicular to the velocity, scaled by speed
        [s.start[0] + vx * t - vy * wob, s.start[1] + vy * t + vx * wob]
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(m));
        if self.width < 16 || self.height < 16 {
            return bad(format!("scene {}x{} is smaller than 16x16", self.width, self.height));
        }
        if self.waterline_row == 0 || self.waterline_row >= self.height {
            return bad(format!(
                "waterline row {} outside 1..{}",
                self.waterline_row, self.height
            ));
        }
        if self.frames == 0 {
            return bad("frames must be at least 1".into());
        }
        if !(0.0..=1.0).contains(&self.turbidity) {
            return bad(format!("turbidity {} outside [0, 1]", self.turbidity));
        }
        if !(self.jitter_sigma >= 0.0 && self.jitter_sigma < 16.0) {
            return bad(format!("jitter sigma {} outside [0, 16)", self.jitter_sigma));
        }
        let r = &self.ripple;
        if !(r.wavelength > 0.0 && r.amplitude.abs() < 16.0 && r.phase_speed.is_finite() && r.stereo_phase.is_finite()) {
            return bad(format!("invalid ripple {r:?}"));
        }
        if !(self.stereo_baseline >= 0.0 && self.stereo_baseline < 16.0) {
            return bad(format!("stereo baseline {} outside [0, 16)", self.stereo_baseline));
        }
        let d = self.sprite_disparity();
        for (i, s) in self.sprites.iter().enumerate() {
            if !(s.size >= 1.0) {
                return bad(format!("sprite {i} size {} below 1 px", s.size));
            }
            for t in 0..=self.frames {
                let [cx, cy] = self.sprite_center(s, t as f64);
                let inside = cx - d - s.size >= 0.0
                    && cx + s.size <= (self.width - 1) as f64
                    && cy - s.size >= 0.0
                    && cy + s.size <= (self.waterline_row - 1) as f64;
                if !inside {
                    return bad(format!(
                        "sprite {i} leaves the above-water band at frame {t} (centre {cx:.1}, {cy:.1})"
                    ));
                }
            }
        }
        Ok(())
    }

    /// Same rendering parameters with a random waterline (40-60% of the
    /// height) and one to three random sprites, all derived from `seed`.
    pub fn randomized(&self, seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let lo = (self.height * 2 / 5).max(12);
        let hi = (self.height * 3 / 5).max(lo + 1);
        let mut cfg = Self {
            waterline_row: rng.random_range(lo..hi),
            sprites: Vec::new(),
            seed,
            ..self.clone()
        };
        let n = rng.random_range(1..=3);
        for _ in 0..50 {
            if cfg.sprites.len() == n {
                break;
            }
            let size = rng.random_range(3.5..7.5);
            let sprite = SpriteSpec {
                shape: if rng.random_bool(0.5) { SpriteShape::Disk } else { SpriteShape::Square },
                size,
                start: [
                    rng.random_range(0.0..cfg.width as f64),
                    rng.random_range(0.0..cfg.waterline_row as f64),
                ],
                velocity: [rng.random_range(-1.5..1.5), rng.random_range(-0.6..0.6)],
                texture_seed: rng.random(),
            };
            cfg.sprites.push(sprite);
            if cfg.validate().is_err() {
                cfg.sprites.pop();
            }
        }
        cfg
    }

    /// Rectified pair consistent with the rendered disparities.
    pub fn calibration(&self) -> StereoCalibration {
        StereoCalibration::rectified(
            self.width as f64,
            self.width as f64 / 2.0,
            self.height as f64 / 2.0,
            1.0,
        )
    }
}

/// One frame pair of a sequence with its labels.
#[derive(Clone, Debug, PartialEq)]
pub struct SegmentationSample {
    pub sequence: usize,
    /// Index of `curr` within the sequence (`prev` is `frame - 1`).
    pub frame: usize,
    pub prev: GrayImage,
    pub curr: GrayImage,
    /// Right view at the time of `curr`.
    pub right: GrayImage,
    pub mask: BinaryMask,
    /// Exact motion from `prev` to `curr` at every `prev` pixel.
    pub flow: FlowField,
    pub calibration: StereoCalibration,
}

#[derive(Clone, Copy, PartialEq, Eq)]
enum Eye {
    Left,
    Right,
}

struct Backdrop {
    coarse: Lattice,
    fine: Lattice,
}

/// Bilinear value noise on a square lattice covering the frame plus margin.
struct Lattice {
    cell: f64,
    cols: usize,
    rows: usize,
    values: Vec<f64>,
}

impl Lattice {
    fn new(width: usize, height: usize, cell: f64, rng: &mut ChaCha8Rng) -> Self {
        let cols = ((width as f64 + 2.0 * MARGIN) / cell).ceil() as usize + 2;
        let rows = ((height as f64 + 2.0 * MARGIN) / cell).ceil() as usize + 2;
        let values = (0..cols * rows).map(|_| rng.random_range(0.0..1.0)).collect();
        Self {
            cell,
            cols,
            rows,
            values,
        }
    }

    fn sample(&self, x: f64, y: f64) -> f64 {
        let gx = ((x + MARGIN) / self.cell).clamp(0.0, (self.cols - 2) as f64);
        let gy = ((y + MARGIN) / self.cell).clamp(0.0, (self.rows - 2) as f64);
        let (ix, iy) = (gx.floor() as usize, gy.floor() as usize);
        let (ix, iy) = (ix.min(self.cols - 2), iy.min(self.rows - 2));
        let (fx, fy) = (gx - ix as f64, gy - iy as f64);
        let v = |c: usize, r: usize| self.values[r * self.cols + c];
        let top = v(ix, iy) * (1.0 - fx) + v(ix + 1, iy) * fx;
        let bottom = v(ix, iy + 1) * (1.0 - fx) + v(ix + 1, iy + 1) * fx;
        top * (1.0 - fy) + bottom * fy
    }
}

impl Backdrop {
    fn sample(&self, x: f64, y: f64) -> f64 {
        0.15 + 0.7 * (0.55 * self.coarse.sample(x, y) + 0.45 * self.fine.sample(x, y))
    }
}

struct SpriteLook {
    light: f64,
    dark: f64,
    checker: f64,
}

struct Renderer<'a> {
    cfg: &'a SceneConfig,
    backdrop: Backdrop,
    looks: Vec<SpriteLook>,
}

/// Stream reserved for the backdrop texture; frame `t` uses stream `t`.
const TEXTURE_STREAM: u64 = u64::MAX;

impl<'a> Renderer<'a> {
    fn new(cfg: &'a SceneConfig) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
        rng.set_stream(TEXTURE_STREAM);
        let backdrop = Backdrop {
            coarse: Lattice::new(cfg.width, cfg.height, 7.0, &mut rng),
            fine: Lattice::new(cfg.width, cfg.height, 3.0, &mut rng),
        };
        let looks = cfg
            .sprites
            .iter()
            .map(|s| {
                let mut r = ChaCha8Rng::seed_from_u64(s.texture_seed);
                SpriteLook {
                    light: r.random_range(0.7..0.95),
                    dark: r.random_range(0.05..0.3),
                    checker: r.random_range(2.5..4.0),
                }
            })
            .collect();
        Self { cfg, backdrop, looks }
    }

    fn jitter(&self, t: usize) -> [f64; 2] {
        if self.cfg.jitter_sigma == 0.0 {
            return [0.0, 0.0];
        }
        let mut rng = ChaCha8Rng::seed_from_u64(self.cfg.seed);
        rng.set_stream(t as u64);
        let n = Normal::new(0.0, self.cfg.jitter_sigma).expect("validated sigma");
        [n.sample(&mut rng), n.sample(&mut rng)]
    }

    fn ripple(&self, x: f64, t: usize, eye: Eye) -> f64 {
        let r = &self.cfg.ripple;
        let phase = if eye == Eye::Right { r.stereo_phase } else { 0.0 };
        r.amplitude * (TAU * x / r.wavelength + r.phase_speed * t as f64 + phase).sin()
    }

    /// Index of the topmost sprite covering `(x, y)` in the given eye.
    fn sprite_at(&self, x: f64, y: f64, t: usize, eye: Eye) -> Option<(usize, f64, f64)> {
        let shift = if eye == Eye::Right { self.cfg.sprite_disparity() } else { 0.0 };
        self.cfg.sprites.iter().enumerate().rev().find_map(|(i, s)| {
            let [cx, cy] = self.cfg.sprite_center(s, t as f64);
            let (dx, dy) = (x - (cx - shift), y - cy);
            let inside = match s.shape {
                SpriteShape::Disk => dx * dx + dy * dy <= s.size * s.size,
                SpriteShape::Square => dx.abs() <= s.size && dy.abs() <= s.size,
            };
            inside.then_some((i, dx, dy))
        })
    }

    /// Above-water scene at a continuous position.
    fn real(&self, x: f64, y: f64, t: usize, eye: Eye) -> f64 {
        match self.sprite_at(x, y, t, eye) {
            Some((i, dx, dy)) => {
                let look = &self.looks[i];
                let cell = ((dx / look.checker).floor() + (dy / look.checker).floor()) as i64;
                if cell.rem_euclid(2) == 0 {
                    look.light
                } else {
                    look.dark
                }
            }
            None => {
                let shift = if eye == Eye::Right { self.cfg.stereo_baseline } else { 0.0 };
                self.backdrop.sample(x + shift, y)
            }
        }
    }

    /// Where a reflection pixel samples the above-water scene.
    fn mirror_source(&self, x: f64, y: f64, t: usize, eye: Eye, jitter: [f64; 2]) -> (f64, f64) {
        let wl = self.cfg.waterline_row as f64;
        (x + jitter[0], 2.0 * wl - 1.0 - y + jitter[1] + self.ripple(x, t, eye))
    }

    fn render(&self, t: usize, eye: Eye) -> GrayImage {
        let (w, h) = (self.cfg.width, self.cfg.height);
        let jitter = self.jitter(t);
        let keep = 1.0 - self.cfg.turbidity;
        let mut data = Vec::with_capacity(w * h);
        for y in 0..h {
            for x in 0..w {
                let (xf, yf) = (x as f64, y as f64);
                let v = if y < self.cfg.waterline_row {
                    self.real(xf, yf, t, eye)
                } else {
                    let (sx, sy) = self.mirror_source(xf, yf, t, eye, jitter);
                    0.5 + keep * (self.real(sx, sy, t, eye) - 0.5)
                };
                data.push(v.clamp(0.0, 1.0) as f32);
            }
        }
        GrayImage {
            width: w,
            height: h,
            data,
        }
    }

    /// Left-eye motion from frame `t - 1` to `t`. Real pixels move with the
    /// sprite covering them (the backdrop is static); reflection pixels
    /// follow the jitter and ripple of the backdrop they show.
    fn flow(&self, t: usize) -> FlowField {
        let (w, h) = (self.cfg.width, self.cfg.height);
        let (j0, j1) = (self.jitter(t - 1), self.jitter(t));
        let mut vectors = Vec::with_capacity(w * h);
        for y in 0..h {
            for x in 0..w {
                let (xf, yf) = (x as f64, y as f64);
                let d = if y < self.cfg.waterline_row {
                    match self.sprite_at(xf, yf, t - 1, Eye::Left) {
                        Some((i, _, _)) => {
                            let s = &self.cfg.sprites[i];
                            let a = self.cfg.sprite_center(s, (t - 1) as f64);
                            let b = self.cfg.sprite_center(s, t as f64);
                            [b[0] - a[0], b[1] - a[1]]
                        }
                        None => [0.0, 0.0],
                    }
                } else {
                    let qx = xf + j0[0] - j1[0];
                    let dy = j1[1] - j0[1] + self.ripple(qx, t, Eye::Left) - self.ripple(xf, t - 1, Eye::Left);
                    [qx - xf, dy]
                };
                vectors.push([d[0] as f32, d[1] as f32]);
            }
        }
        FlowField {
            width: w,
            height: h,
            vectors,
        }
    }

    fn mask(&self) -> BinaryMask {
        let (w, h) = (self.cfg.width, self.cfg.height);
        BinaryMask {
            width: w,
            height: h,
            data: (0..w * h).map(|i| (i / w >= self.cfg.waterline_row) as u8).collect(),
        }
    }
}

/// Render `cfg.frames` consecutive frame pairs. Frames are rendered in
/// parallel; the output does not depend on the thread count.
pub fn generate_sequence(cfg: &SceneConfig) -> Result<Vec<SegmentationSample>> {
    generate_sequence_indexed(cfg, 0)
}

fn generate_sequence_indexed(cfg: &SceneConfig, sequence: usize) -> Result<Vec<SegmentationSample>> {
    cfg.validate()?;
    let r = Renderer::new(cfg);
    let lefts: Vec<GrayImage> = (0..=cfg.frames).into_par_iter().map(|t| r.render(t, Eye::Left)).collect();
    let mask = r.mask();
    let calibration = cfg.calibration();
    let samples = (1..=cfg.frames)
        .into_par_iter()
        .map(|t| SegmentationSample {
            sequence,
            frame: t,
            prev: lefts[t - 1].clone(),
            curr: lefts[t].clone(),
            right: r.render(t, Eye::Right),
            mask: mask.clone(),
            flow: r.flow(t),
            calibration: calibration.clone(),
        })
        .collect();
    Ok(samples)
}

/// `sequences` sequences, each from `base.randomized(base.seed + i)`.
pub fn generate_dataset(base: &SceneConfig, sequences: usize) -> Result<Vec<SegmentationSample>> {
    base.validate()?;
    let mut out = Vec::new();
    for i in 0..sequences {
        let cfg = base.randomized(base.seed.wrapping_add(i as u64));
        out.extend(generate_sequence_indexed(&cfg, i)?);
    }
    Ok(out)
}

/// Write frames, masks, exact flow, calibrations and a manifest under
/// `out_dir`. Splits are assigned 80:5:15 over sequences (every frame of a
/// sequence lands in the same split) by a shuffle seeded with `seed`.
pub fn export_dataset(samples: &[SegmentationSample], out_dir: impl AsRef<Path>, seed: u64) -> Result<DatasetManifest> {
    if samples.is_empty() {
        return Err(Error::Config("no samples to export".into()));
    }
    let out_dir = out_dir.as_ref();
    let mut seqs: Vec<usize> = samples.iter().map(|s| s.sequence).collect();
    seqs.sort_unstable();
    seqs.dedup();
    let splits = assign_splits(seqs.len(), SplitFractions::default(), seed)?;

    let mut entries = Vec::with_capacity(samples.len());
    let mut calibrated = std::collections::HashSet::new();
    for s in samples {
        let dir = PathBuf::from(format!("seq{:04}", s.sequence));
        std::fs::create_dir_all(out_dir.join(&dir)).map_err(|e| Error::io(out_dir.join(&dir), e))?;
        let rel = |name: String| dir.join(name);
        let prev = rel(format!("frame{:03}_left.pgm", s.frame - 1));
        let curr = rel(format!("frame{:03}_left.pgm", s.frame));
        let right = rel(format!("frame{:03}_right.pgm", s.frame));
        let mask = rel(format!("frame{:03}_mask.pgm", s.frame));
        let flow = rel(format!("frame{:03}.flo", s.frame));
        write_pgm(&s.prev, out_dir.join(&prev))?;
        write_pgm(&s.curr, out_dir.join(&curr))?;
        write_pgm(&s.right, out_dir.join(&right))?;
        write_mask(&s.mask, out_dir.join(&mask))?;
        write_flo(&s.flow, out_dir.join(&flow))?;
        let calib_id = format!("seq{:04}/calib", s.sequence);
        if calibrated.insert(s.sequence) {
            s.calibration.save(out_dir.join(format!("{calib_id}.json")))?;
        }
        let split = splits[seqs.binary_search(&s.sequence).expect("collected above")];
        entries.push(ManifestEntry {
            frame_prev_path: prev,
            frame_curr_path: curr,
            stereo_right_path: Some(right),
            mask_path: mask,
            flow_path: Some(flow),
            calib_id: Some(calib_id),
            split,
        });
    }
    let manifest = DatasetManifest::new(entries, out_dir);
    manifest.save(out_dir.join("manifest.json"))?;
    Ok(manifest)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum NoisePreset {
    Low,
    Medium,
    High,
}

impl NoisePreset {
    /// White-noise and random-walk standard deviations per sample.
    pub fn sigmas(self) -> (f64, f64) {
        match self {
            NoisePreset::Low => (0.002, 1e-5),
            NoisePreset::Medium => (0.01, 5e-5),
            NoisePreset::High => (0.05, 2e-4),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Vibration {
    pub amplitude: f64,
    /// Cycles per sample.
    pub frequency: f64,
}

/// Additive inertial-sensor error: constant bias, white noise, a random
/// walk and an optional sinusoidal vibration on every axis.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct ImuModel {
    pub bias: [f64; 3],
    pub noise_sigma: f64,
    pub random_walk_sigma: f64,
    pub vibration: Option<Vibration>,
}

impl ImuModel {
    pub fn preset(preset: NoisePreset) -> Self {
        let (noise_sigma, random_walk_sigma) = preset.sigmas();
        Self {
            bias: [0.0; 3],
            noise_sigma,
            random_walk_sigma,
            vibration: None,
        }
    }
}

/// `ground_truth + bias + noise` per sample, deterministic in `seed`.
pub fn simulate_imu(ground_truth: &[[f64; 3]], model: &ImuModel, seed: u64) -> Result<Vec<[f64; 3]>> {
    if ground_truth.iter().flatten().any(|v| !v.is_finite()) {
        return Err(Error::Validation("IMU ground truth has non-finite values".into()));
    }
    if !(model.noise_sigma >= 0.0 && model.random_walk_sigma >= 0.0) {
        return Err(Error::Config("IMU noise sigmas must be non-negative".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let white = Normal::new(0.0, model.noise_sigma).expect("checked sigma");
    let walk_step = Normal::new(0.0, model.random_walk_sigma).expect("checked sigma");
    let mut walk = [0.0; 3];
    Ok(ground_truth
        .iter()
        .enumerate()
        .map(|(i, gt)| {
            let vib = model
                .vibration
                .map_or(0.0, |v| v.amplitude * (TAU * v.frequency * i as f64).sin());
            std::array::from_fn(|a| {
                walk[a] += walk_step.sample(&mut rng);
                gt[a] + model.bias[a] + white.sample(&mut rng) + walk[a] + vib
            })
        })
        .collect())
}

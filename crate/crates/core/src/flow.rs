//! Dense motion between two frames by coarse-to-fine block matching.
//!
//! At the coarsest pyramid level every displacement within `radius` is
//! scored by the sum of absolute differences over a `block x block` patch.
//! Each finer level doubles the estimate and re-searches a one-pixel
//! neighbourhood; the finest level adds a parabolic sub-pixel correction.

use std::f64::consts::TAU;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::imageio::{FloatMap, GrayImage};

/// Per-pixel `(u, v)` displacement in pixels per frame, row-major.
#[derive(Clone, Debug, PartialEq)]
pub struct FlowField {
    pub width: usize,
    pub height: usize,
    pub vectors: Vec<[f32; 2]>,
}

impl FlowField {
    pub fn zeros(width: usize, height: usize) -> Self {
        Self {
            width,
            height,
            vectors: vec![[0.0, 0.0]; width * height],
        }
    }

    pub fn get(&self, x: usize, y: usize) -> [f32; 2] {
        self.vectors[y * self.width + x]
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default)]
pub struct FlowConfig {
    /// Odd patch side.
    pub block: usize,
    /// Search radius at the coarsest level.
    pub radius: usize,
    pub levels: usize,
}

impl Default for FlowConfig {
    fn default() -> Self {
        Self {
            block: 7,
            radius: 8,
            levels: 3,
        }
    }
}

impl FlowConfig {
    /// Largest displacement the estimator can report in either component.
    pub fn max_displacement(&self) -> usize {
        self.radius << (self.levels - 1)
    }
}

/// Replicate-padded copy of an image for unchecked window access.
struct Padded {
    stride: usize,
    pad: usize,
    data: Vec<f32>,
}

impl Padded {
    fn new(img: &GrayImage, pad: usize) -> Self {
        let stride = img.width + 2 * pad;
        let mut data = Vec::with_capacity(stride * (img.height + 2 * pad));
        for y in 0..img.height + 2 * pad {
            for x in 0..stride {
                data.push(img.get_clamped(x as isize - pad as isize, y as isize - pad as isize));
            }
        }
        Self { stride, pad, data }
    }

    #[inline]
    fn row(&self, x: isize, y: isize, len: usize) -> &[f32] {
        let start = (y + self.pad as isize) as usize * self.stride + (x + self.pad as isize) as usize;
        &self.data[start..start + len]
    }
}

fn downsample(img: &GrayImage) -> GrayImage {
    let (w, h) = (img.width / 2, img.height / 2);
    let mut data = Vec::with_capacity(w * h);
    for y in 0..h {
        for x in 0..w {
            let s = img.get(2 * x, 2 * y)
                + img.get(2 * x + 1, 2 * y)
                + img.get(2 * x, 2 * y + 1)
                + img.get(2 * x + 1, 2 * y + 1);
            data.push(s * 0.25);
        }
    }
    GrayImage {
        width: w,
        height: h,
        data,
    }
}

struct Matcher<'a> {
    prev: &'a Padded,
    curr: &'a Padded,
    half: isize,
    block: usize,
}

impl Matcher<'_> {
    #[inline]
    fn sad(&self, x: isize, y: isize, du: isize, dv: isize) -> f32 {
        let mut total = 0.0;
        for dy in -self.half..=self.half {
            let a = self.prev.row(x - self.half, y + dy, self.block);
            let b = self.curr.row(x - self.half + du, y + dy + dv, self.block);
            total += a.iter().zip(b).map(|(p, q)| (p - q).abs()).sum::<f32>();
        }
        total
    }

    /// Lowest-cost displacement among `candidates` (already in tie-break order).
    fn best(&self, x: isize, y: isize, candidates: &[(isize, isize)]) -> (isize, isize) {
        let mut best = candidates[0];
        let mut best_cost = self.sad(x, y, best.0, best.1);
        for &(du, dv) in &candidates[1..] {
            let c = self.sad(x, y, du, dv);
            if c < best_cost {
                best_cost = c;
                best = (du, dv);
            }
        }
        best
    }
}

/// Displacements within `[-r, r]^2`, smaller magnitude first, then by `u`, then `v`.
fn ordered_offsets(r: isize) -> Vec<(isize, isize)> {
    let mut v: Vec<(isize, isize)> = (-r..=r).flat_map(|u| (-r..=r).map(move |w| (u, w))).collect();
    v.sort_by_key(|&(u, w)| (u * u + w * w, u, w));
    v
}

/// Copy the nearest interior estimate into pixels closer than `margin` to an edge.
fn fill_border(field: &mut [(f32, f32)], w: usize, h: usize, margin: usize) {
    if w <= 2 * margin || h <= 2 * margin {
        return;
    }
    let src = field.to_vec();
    for y in 0..h {
        for x in 0..w {
            let cx = x.clamp(margin, w - 1 - margin);
            let cy = y.clamp(margin, h - 1 - margin);
            field[y * w + x] = src[cy * w + cx];
        }
    }
}

fn parabolic(minus: f32, centre: f32, plus: f32) -> f32 {
    let denom = minus - 2.0 * centre + plus;
    if denom > 0.0 {
        ((minus - plus) / (2.0 * denom)).clamp(-0.5, 0.5)
    } else {
        0.0
    }
}

/// Estimate the flow that carries `prev` onto `curr`. Frames too small for
/// the configured pyramid use fewer levels.
pub fn estimate_flow(prev: &GrayImage, curr: &GrayImage, cfg: &FlowConfig) -> Result<FlowField> {
    if prev.width != curr.width || prev.height != curr.height {
        return Err(Error::Shape(format!(
            "frames differ in size: {}x{} vs {}x{}",
            prev.width, prev.height, curr.width, curr.height
        )));
    }
    if cfg.block % 2 == 0 || cfg.levels == 0 {
        return Err(Error::Config(format!(
            "block must be odd and levels >= 1, got block {} levels {}",
            cfg.block, cfg.levels
        )));
    }
    // drop pyramid levels until the coarsest one can hold a full search window
    let need = cfg.block + 2 * cfg.radius;
    let fits = |l: usize| (prev.width >> l) >= need && (prev.height >> l) >= need;
    let levels = (1..=cfg.levels).rev().find(|&l| fits(l - 1)).ok_or_else(|| {
        Error::Size(format!(
            "{}x{} frames smaller than block + 2*radius = {need}",
            prev.width, prev.height
        ))
    })?;
    let mut pyr_prev = vec![prev.clone()];
    let mut pyr_curr = vec![curr.clone()];
    for _ in 1..levels {
        pyr_prev.push(downsample(pyr_prev.last().expect("nonempty")));
        pyr_curr.push(downsample(pyr_curr.last().expect("nonempty")));
    }

    let half = (cfg.block / 2) as isize;
    let mut field: Vec<(f32, f32)> = Vec::new();
    let mut field_w = 0;
    for level in (0..levels).rev() {
        let (p, c) = (&pyr_prev[level], &pyr_curr[level]);
        let (w, h) = (p.width, p.height);
        let bound = (cfg.radius << (levels - 1 - level)) as isize;
        let pad = half as usize + bound as usize + 2;
        let (pp, cp) = (Padded::new(p, pad), Padded::new(c, pad));
        let matcher = Matcher {
            prev: &pp,
            curr: &cp,
            half,
            block: cfg.block,
        };
        let coarsest = level + 1 == levels;
        let full_search = ordered_offsets(cfg.radius as isize);
        let step = ordered_offsets(1);
        let prior = std::mem::take(&mut field);
        let prior_w = field_w;
        let prior_h = prior.len().checked_div(prior_w).unwrap_or(0);
        let finest = level == 0;

        let mut next: Vec<(f32, f32)> = vec![(0.0, 0.0); w * h];
        next.par_chunks_mut(w).enumerate().for_each(|(y, row)| {
            let mut candidates = Vec::with_capacity(5 * step.len());
            for (x, out) in row.iter_mut().enumerate() {
                let (xi, yi) = (x as isize, y as isize);
                let (du, dv) = if coarsest {
                    matcher.best(xi, yi, &full_search)
                } else {
                    // seed from this pixel's coarse estimate and its 4-neighbours'
                    candidates.clear();
                    let (cx, cy) = ((x / 2).min(prior_w - 1), (y / 2).min(prior_h - 1));
                    for (ox, oy) in [(0, 0), (-1, 0), (1, 0), (0, -1), (0, 1)] {
                        let nx = (cx as isize + ox).clamp(0, prior_w as isize - 1) as usize;
                        let ny = (cy as isize + oy).clamp(0, prior_h as isize - 1) as usize;
                        let (pu, pv) = prior[ny * prior_w + nx];
                        let (pu, pv) = (2 * pu.round() as isize, 2 * pv.round() as isize);
                        candidates.extend(
                            step.iter()
                                .map(|&(a, b)| (pu + a, pv + b))
                                .filter(|&(a, b)| a.abs() <= bound && b.abs() <= bound),
                        );
                    }
                    candidates.sort_by_key(|&(a, b)| (a * a + b * b, a, b));
                    candidates.dedup();
                    matcher.best(xi, yi, &candidates)
                };
                let (mut fu, mut fv) = (du as f32, dv as f32);
                let c0 = if finest { matcher.sad(xi, yi, du, dv) } else { 0.0 };
                // an exact match needs no sub-pixel correction
                if c0 > 0.0 {
                    fu += parabolic(
                        matcher.sad(xi, yi, du - 1, dv),
                        c0,
                        matcher.sad(xi, yi, du + 1, dv),
                    );
                    fv += parabolic(
                        matcher.sad(xi, yi, du, dv - 1),
                        c0,
                        matcher.sad(xi, yi, du, dv + 1),
                    );
                    let b = bound as f32;
                    fu = fu.clamp(-b, b);
                    fv = fv.clamp(-b, b);
                }
                *out = (fu, fv);
            }
        });
        let margin = if coarsest {
            half as usize + cfg.radius
        } else {
            cfg.radius
        };
        fill_border(&mut next, w, h, margin);
        field = next;
        field_w = w;
    }

    Ok(FlowField {
        width: prev.width,
        height: prev.height,
        vectors: field.into_iter().map(|(u, v)| [u, v]).collect(),
    })
}

/// Angle of `(u, v)` in `[0, 2*pi)`; the zero vector has angle 0.
pub fn flow_angle(u: f64, v: f64) -> f64 {
    let a = v.atan2(u);
    let a = if a < 0.0 { a + TAU } else { a };
    if a >= TAU {
        0.0
    } else {
        a
    }
}

/// Per-pixel `sqrt(u^2 + v^2)` and angle in `[0, 2*pi)`.
pub fn flow_magnitude_angle(flow: &FlowField) -> (FloatMap, FloatMap) {
    let (mut mag, mut ang) = (
        Vec::with_capacity(flow.vectors.len()),
        Vec::with_capacity(flow.vectors.len()),
    );
    for &[u, v] in &flow.vectors {
        let (u, v) = (u as f64, v as f64);
        mag.push(u.hypot(v) as f32);
        ang.push(flow_angle(u, v) as f32);
    }
    (
        FloatMap {
            width: flow.width,
            height: flow.height,
            data: mag,
        },
        FloatMap {
            width: flow.width,
            height: flow.height,
            data: ang,
        },
    )
}

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::imageio::GrayImage;

/// Side of the square intensity patch used as a descriptor.
pub const PATCH: usize = 9;
const HARRIS_K: f64 = 0.04;

#[derive(Clone, Debug, PartialEq)]
pub struct Keypoint {
    pub x: f64,
    pub y: f64,
    pub score: f64,
    /// Mean-subtracted, unit-length `PATCH x PATCH` patch.
    pub descriptor: Vec<f32>,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct KeypointConfig {
    pub max_kp: usize,
    /// Minimum Harris response for a corner to be kept.
    pub response_threshold: f64,
}

impl Default for KeypointConfig {
    fn default() -> Self {
        Self {
            max_kp: 512,
            response_threshold: 1e-4,
        }
    }
}

/// Harris response `det(M) - k tr(M)^2` with `M` summed over a 3x3 box of
/// central-difference gradient products.
pub fn harris_response(img: &GrayImage) -> Vec<f64> {
    let (w, h) = (img.width, img.height);
    let px = |x: isize, y: isize| img.get_clamped(x, y) as f64;
    let mut ixx = vec![0.0; w * h];
    let mut iyy = vec![0.0; w * h];
    let mut ixy = vec![0.0; w * h];
    for y in 0..h as isize {
        for x in 0..w as isize {
            let gx = 0.5 * (px(x + 1, y) - px(x - 1, y));
            let gy = 0.5 * (px(x, y + 1) - px(x, y - 1));
            let i = y as usize * w + x as usize;
            ixx[i] = gx * gx;
            iyy[i] = gy * gy;
            ixy[i] = gx * gy;
        }
    }
    let mut out = vec![0.0; w * h];
    for y in 1..h.saturating_sub(1) {
        for x in 1..w.saturating_sub(1) {
            let (mut a, mut b, mut c) = (0.0, 0.0, 0.0);
            for yy in y - 1..=y + 1 {
                for xx in x - 1..=x + 1 {
                    let i = yy * w + xx;
                    a += ixx[i];
                    b += iyy[i];
                    c += ixy[i];
                }
            }
            out[y * w + x] = a * b - c * c - HARRIS_K * (a + b) * (a + b);
        }
    }
    out
}

/// Vertex offset of the parabola through `(-1, l), (0, c), (1, r)`.
fn quadratic_peak(l: f64, c: f64, r: f64) -> f64 {
    let denom = l - 2.0 * c + r;
    if denom < 0.0 {
        (0.5 * (l - r) / denom).clamp(-0.5, 0.5)
    } else {
        0.0
    }
}

fn descriptor(img: &GrayImage, cx: usize, cy: usize) -> Option<Vec<f32>> {
    let r = (PATCH / 2) as isize;
    let mut patch: Vec<f64> = Vec::with_capacity(PATCH * PATCH);
    for dy in -r..=r {
        for dx in -r..=r {
            patch.push(img.get_clamped(cx as isize + dx, cy as isize + dy) as f64);
        }
    }
    let mean = patch.iter().sum::<f64>() / patch.len() as f64;
    patch.iter_mut().for_each(|v| *v -= mean);
    let norm = patch.iter().map(|v| v * v).sum::<f64>().sqrt();
    (norm > 1e-9).then(|| patch.iter().map(|v| (v / norm) as f32).collect())
}

/// Harris corners after 3x3 non-maximum suppression, strongest first.
///
/// On a plateau of equal responses only the first pixel in row-major
/// order survives.
pub fn detect_keypoints(img: &GrayImage, cfg: &KeypointConfig) -> Result<Vec<Keypoint>> {
    if img.width < 16 || img.height < 16 {
        return Err(Error::Size(format!(
            "keypoint detection needs at least 16x16, got {}x{}",
            img.width, img.height
        )));
    }
    let (w, h) = (img.width, img.height);
    let resp = harris_response(img);
    let margin = PATCH / 2;
    let mut found = Vec::new();
    for y in margin..h - margin {
        for x in margin..w - margin {
            let r = resp[y * w + x];
            if r <= cfg.response_threshold {
                continue;
            }
            let mut is_max = true;
            'nbr: for yy in y - 1..=y + 1 {
                for xx in x - 1..=x + 1 {
                    let q = resp[yy * w + xx];
                    let before = (yy, xx) < (y, x);
                    if q > r || (q == r && before) {
                        is_max = false;
                        break 'nbr;
                    }
                }
            }
            if is_max {
                found.push((r, x, y));
            }
        }
    }
    found.sort_by(|a, b| b.0.total_cmp(&a.0).then((a.2, a.1).cmp(&(b.2, b.1))));
    let mut out = Vec::new();
    for (score, x, y) in found {
        if out.len() == cfg.max_kp {
            break;
        }
        let Some(descriptor) = descriptor(img, x, y) else {
            continue;
        };
        let at = |xx: usize, yy: usize| resp[yy * w + xx];
        let ox = quadratic_peak(at(x - 1, y), score, at(x + 1, y));
        let oy = quadratic_peak(at(x, y - 1), score, at(x, y + 1));
        out.push(Keypoint {
            x: x as f64 + ox,
            y: y as f64 + oy,
            score,
            descriptor,
        });
    }
    Ok(out)
}

fn distance(a: &[f32], b: &[f32]) -> f64 {
    a.iter()
        .zip(b)
        .map(|(p, q)| {
            let d = (p - q) as f64;
            d * d
        })
        .sum::<f64>()
        .sqrt()
}

/// Index of the nearest and the distances to the nearest and second-nearest
/// candidate; the lowest index wins ties.
fn two_nearest(query: &[f32], pool: &[Keypoint]) -> Option<(usize, f64, f64)> {
    let mut best: Option<(usize, f64)> = None;
    let mut second = f64::INFINITY;
    for (j, kp) in pool.iter().enumerate() {
        let d = distance(query, &kp.descriptor);
        match best {
            Some((_, bd)) if d >= bd => second = second.min(d),
            Some((_, bd)) => {
                second = bd;
                best = Some((j, d));
            }
            None => best = Some((j, d)),
        }
    }
    best.map(|(j, d)| (j, d, second))
}

/// Ratio-test matches that are also mutual nearest neighbours.
pub fn match_keypoints(left: &[Keypoint], right: &[Keypoint], ratio: f64) -> Vec<(usize, usize)> {
    let mut out = Vec::new();
    for (i, kp) in left.iter().enumerate() {
        let Some((j, d1, d2)) = two_nearest(&kp.descriptor, right) else {
            continue;
        };
        if !(d1 < ratio * d2) {
            continue;
        }
        if two_nearest(&right[j].descriptor, left).is_some_and(|(back, _, _)| back == i) {
            out.push((i, j));
        }
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    fn unit(v: Vec<f32>) -> Vec<f32> {
        let n = v.iter().map(|x| x * x).sum::<f32>().sqrt();
        v.into_iter().map(|x| x / n).collect()
    }

    fn kp(descriptor: Vec<f32>) -> Keypoint {
        Keypoint {
            x: 0.0,
            y: 0.0,
            score: 1.0,
            descriptor,
        }
    }

    #[test]
    fn flat_image_has_no_corners() {
        let img = GrayImage::filled(32, 32, 0.3);
        assert!(detect_keypoints(&img, &KeypointConfig::default()).unwrap().is_empty());
    }

    #[test]
    fn single_bright_pixel() {
        let mut img = GrayImage::filled(24, 24, 0.0);
        img.data[10 * 24 + 10] = 1.0;
        let kps = detect_keypoints(&img, &KeypointConfig::default()).unwrap();
        assert!(!kps.is_empty());
        assert!((kps[0].x - 10.0).abs() <= 1.0 && (kps[0].y - 10.0).abs() <= 1.0, "{:?}", kps[0]);
    }

    #[test]
    fn checkerboard_corners() {
        let (cell, n) = (8, 6);
        let size = cell * n;
        let data = (0..size * size)
            .map(|i| (((i % size) / cell + (i / size) / cell) % 2) as f32)
            .collect();
        let img = GrayImage::new(size, size, data).unwrap();
        let cfg = KeypointConfig::default();
        let kps = detect_keypoints(&img, &cfg).unwrap();
        assert!(kps.len() <= cfg.max_kp);
        for cy in 1..n {
            for cx in 1..n {
                let (x, y) = ((cx * cell) as f64 - 0.5, (cy * cell) as f64 - 0.5);
                assert!(
                    kps.iter().any(|k| (k.x - x).abs() <= 1.0 && (k.y - y).abs() <= 1.0),
                    "no keypoint near corner ({x}, {y})"
                );
            }
        }
        assert!(kps.iter().all(|k| (k.descriptor.iter().map(|v| v * v).sum::<f32>() - 1.0).abs() < 1e-5));
    }

    #[test]
    fn too_small() {
        let img = GrayImage::filled(15, 40, 0.0);
        assert!(matches!(detect_keypoints(&img, &KeypointConfig::default()), Err(Error::Size(_))));
    }

    #[test]
    fn identical_sets_match_identically() {
        let set: Vec<Keypoint> = (0..5)
            .map(|i| kp(unit((0..8).map(|j| ((i * 7 + j * 3) % 5) as f32 - 2.0).collect())))
            .collect();
        assert_eq!(match_keypoints(&set, &set, 0.7), (0..5).map(|i| (i, i)).collect::<Vec<_>>());
    }

    #[test]
    fn orthogonal_descriptors_do_not_match() {
        let e = |i: usize| kp((0..4).map(|j| (i == j) as u8 as f32).collect());
        let left = vec![e(0)];
        let right = vec![e(1), e(2), e(3)];
        assert!(match_keypoints(&left, &right, 0.7).is_empty());
    }

    #[test]
    fn ambiguous_match_fails_ratio_test() {
        // distances 0.9 and 1.0 to the two candidates
        let left = vec![kp(vec![0.0, 0.0, 0.0])];
        let right = vec![kp(vec![0.9, 0.0, 0.0]), kp(vec![0.0, 1.0, 0.0])];
        assert!(match_keypoints(&left, &right, 0.7).is_empty());
        assert_eq!(match_keypoints(&left, &right, 0.95), vec![(0, 0)]);
        assert!(match_keypoints(&[], &right, 0.7).is_empty());
    }
}

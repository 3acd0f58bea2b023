//! Sparse epipolar-consistency error maps from stereo pairs.
//!
//! Real scene points obey `x_rightᵀ F x_left = 0`; points seen through a
//! refracting surface generally do not. Matched keypoints are scored by
//! their distance from the epipolar lines, normalized per pair and written
//! into an otherwise zero map aligned with the left image.

mod fundamental;
mod keypoints;

pub use fundamental::{
    eight_point, estimate_fundamental, fundamental_from_calibration, sampson_distance,
    FundamentalMatrix, RansacConfig,
};
pub use keypoints::{detect_keypoints, harris_response, match_keypoints, Keypoint, KeypointConfig, PATCH};

use std::path::Path;

use nalgebra::{Matrix3, Point2, Vector3};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::imageio::{read_file, write_file, FloatMap, GrayImage};

/// Intrinsics, rotation and translation of a stereo rig; matrices row-major.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StereoCalibration {
    #[serde(rename = "K_left")]
    pub k_left: [f64; 9],
    #[serde(rename = "K_right")]
    pub k_right: [f64; 9],
    #[serde(rename = "R")]
    pub r: [f64; 9],
    pub t: [f64; 3],
}

impl StereoCalibration {
    /// Identical pinhole cameras displaced by `baseline` along +x.
    pub fn rectified(focal: f64, cx: f64, cy: f64, baseline: f64) -> Self {
        let k = [focal, 0.0, cx, 0.0, focal, cy, 0.0, 0.0, 1.0];
        Self {
            k_left: k,
            k_right: k,
            r: [1.0, 0.0, 0.0, 0.0, 1.0, 0.0, 0.0, 0.0, 1.0],
            // right camera centre at +baseline, so x_right = x_left - t
            t: [-baseline, 0.0, 0.0],
        }
    }

    pub fn fundamental(&self) -> Result<FundamentalMatrix> {
        let m = |a: &[f64; 9]| Matrix3::from_row_slice(a);
        fundamental_from_calibration(
            &m(&self.k_left),
            &m(&self.k_right),
            &m(&self.r),
            &Vector3::from_row_slice(&self.t),
        )
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        Ok(serde_json::from_slice(&read_file(path.as_ref())?)?)
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let mut text = serde_json::to_string_pretty(self)?;
        text.push('\n');
        write_file(path.as_ref(), text.as_bytes())
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct EpipolarResidual {
    /// Mean of the two point-to-epipolar-line distances, in pixels.
    pub distance: f64,
    /// A point sat on an epipole, so a line was undefined; `distance` is 0.
    pub degenerate: bool,
}

/// Symmetric point-to-line distance of a correspondence.
pub fn epipolar_error(f: &FundamentalMatrix, left: &Point2<f64>, right: &Point2<f64>) -> EpipolarResidual {
    let f = f.matrix();
    let xl = Vector3::new(left.x, left.y, 1.0);
    let xr = Vector3::new(right.x, right.y, 1.0);
    let line_r = f * xl;
    let line_l = f.transpose() * xr;
    let nr = line_r.x.hypot(line_r.y);
    let nl = line_l.x.hypot(line_l.y);
    if nr < 1e-15 || nl < 1e-15 {
        return EpipolarResidual {
            distance: 0.0,
            degenerate: true,
        };
    }
    EpipolarResidual {
        distance: 0.5 * (xr.dot(&line_r).abs() / nr + xl.dot(&line_l).abs() / nl),
        degenerate: false,
    }
}

/// Sparse map aligned with the left image; nonzero only at keypoints.
#[derive(Clone, Debug, PartialEq)]
pub struct EpipolarErrorMap {
    pub width: usize,
    pub height: usize,
    pub values: Vec<f64>,
}

impl EpipolarErrorMap {
    pub fn zeros(width: usize, height: usize) -> Self {
        Self {
            width,
            height,
            values: vec![0.0; width * height],
        }
    }

    pub fn nonzero_count(&self) -> usize {
        self.values.iter().filter(|&&v| v != 0.0).count()
    }

    pub fn to_floatmap(&self) -> FloatMap {
        FloatMap {
            width: self.width,
            height: self.height,
            data: self.values.iter().map(|&v| v as f32).collect(),
        }
    }
}

/// Normalize each match's error by the pair maximum and splat it at the
/// rounded left-image position, keeping the larger value on collisions.
pub fn build_error_map(
    matches: &[(Point2<f64>, Point2<f64>)],
    f: &FundamentalMatrix,
    width: usize,
    height: usize,
) -> EpipolarErrorMap {
    let errors: Vec<f64> = matches
        .iter()
        .map(|(l, r)| epipolar_error(f, l, r).distance)
        .collect();
    let max = errors.iter().copied().fold(0.0, f64::max).max(1e-12);
    let mut map = EpipolarErrorMap::zeros(width, height);
    if width == 0 || height == 0 {
        return map;
    }
    for ((l, _), e) in matches.iter().zip(errors) {
        let x = (l.x.round().max(0.0) as usize).min(width - 1);
        let y = (l.y.round().max(0.0) as usize).min(height - 1);
        let slot = &mut map.values[y * width + x];
        *slot = slot.max((e / max).clamp(0.0, 1.0));
    }
    map
}

/// Where the fundamental matrix for an error map comes from.
#[derive(Clone, Debug)]
pub enum FundamentalSource<'a> {
    Calibration(&'a StereoCalibration),
    /// Robustly estimated from the matches themselves.
    Estimate(RansacConfig),
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct EgcConfig {
    pub keypoints: KeypointConfig,
    pub ratio: f64,
}

impl Default for EgcConfig {
    fn default() -> Self {
        Self {
            keypoints: KeypointConfig::default(),
            ratio: 0.7,
        }
    }
}

/// Error map plus the matched point pairs it was built from.
#[derive(Clone, Debug)]
pub struct EgcResult {
    pub map: EpipolarErrorMap,
    pub matches: Vec<(Point2<f64>, Point2<f64>)>,
    pub fundamental: FundamentalMatrix,
}

/// Detect, match, obtain `F`, and build the error map for a stereo pair.
pub fn egc_error_map(
    left: &GrayImage,
    right: &GrayImage,
    source: &FundamentalSource<'_>,
    cfg: &EgcConfig,
) -> Result<EgcResult> {
    if left.width != right.width || left.height != right.height {
        return Err(Error::Shape(format!(
            "stereo images differ in size: {}x{} vs {}x{}",
            left.width, left.height, right.width, right.height
        )));
    }
    let kl = detect_keypoints(left, &cfg.keypoints)?;
    let kr = detect_keypoints(right, &cfg.keypoints)?;
    let matches: Vec<_> = match_keypoints(&kl, &kr, cfg.ratio)
        .into_iter()
        .map(|(i, j)| (Point2::new(kl[i].x, kl[i].y), Point2::new(kr[j].x, kr[j].y)))
        .collect();
    let fundamental = match source {
        FundamentalSource::Calibration(c) => c.fundamental()?,
        FundamentalSource::Estimate(rc) => estimate_fundamental(&matches, rc)?.0,
    };
    let map = build_error_map(&matches, &fundamental, left.width, left.height);
    Ok(EgcResult {
        map,
        matches,
        fundamental,
    })
}

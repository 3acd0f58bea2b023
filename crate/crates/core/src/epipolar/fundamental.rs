use nalgebra::{DMatrix, Matrix3, Point2, Vector3};
use rand::seq::index::sample;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Rank-2, unit-Frobenius-norm 3x3 matrix with `x_rightᵀ F x_left = 0`.
///
/// The sign is fixed so that the entry of largest magnitude (first in
/// row-major order on ties) is positive.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct FundamentalMatrix(Matrix3<f64>);

impl FundamentalMatrix {
    /// Project onto rank 2 and normalize.
    pub fn new(m: Matrix3<f64>) -> Result<Self> {
        if !m.iter().all(|v| v.is_finite()) {
            return Err(Error::Degenerate("fundamental matrix has non-finite entries".into()));
        }
        let mut svd = m.svd(true, true);
        let (imin, smin) = svd.singular_values.argmin();
        // recomposing costs accuracy in the small entries; skip it when the
        // input is already rank 2 to working precision
        let r2 = if smin <= 1e-14 * svd.singular_values.max() {
            m
        } else {
            svd.singular_values[imin] = 0.0;
            svd.recompose().map_err(|e| Error::Degenerate(e.to_string()))?
        };
        let norm = r2.norm();
        if norm < 1e-300 {
            return Err(Error::Degenerate("fundamental matrix is zero".into()));
        }
        let mut f = r2 / norm;
        let mut lead = 0;
        for i in 1..9 {
            if f[(i / 3, i % 3)].abs() > f[(lead / 3, lead % 3)].abs() {
                lead = i;
            }
        }
        if f[(lead / 3, lead % 3)] < 0.0 {
            f = -f;
        }
        Ok(Self(f))
    }

    pub fn matrix(&self) -> &Matrix3<f64> {
        &self.0
    }

    /// Largest entry-wise difference, taking the closer of `other` and `-other`.
    pub fn max_abs_diff(&self, other: &Self) -> f64 {
        let plus = (self.0 - other.0).abs().max();
        let minus = (self.0 + other.0).abs().max();
        plus.min(minus)
    }
}

fn skew(t: &Vector3<f64>) -> Matrix3<f64> {
    Matrix3::new(0.0, -t.z, t.y, t.z, 0.0, -t.x, -t.y, t.x, 0.0)
}

/// `K_right⁻ᵀ [t]ₓ R K_left⁻¹` for a calibrated stereo rig.
pub fn fundamental_from_calibration(
    k_left: &Matrix3<f64>,
    k_right: &Matrix3<f64>,
    r: &Matrix3<f64>,
    t: &Vector3<f64>,
) -> Result<FundamentalMatrix> {
    let inv = |k: &Matrix3<f64>, which: &str| {
        if k.determinant().abs() < 1e-12 {
            return Err(Error::Degenerate(format!("{which} intrinsics are singular")));
        }
        k.try_inverse()
            .ok_or_else(|| Error::Degenerate(format!("{which} intrinsics are singular")))
    };
    let kl_inv = inv(k_left, "left")?;
    let kr_inv = inv(k_right, "right")?;
    if t.norm() < 1e-12 {
        return Err(Error::Degenerate("stereo baseline is zero".into()));
    }
    FundamentalMatrix::new(kr_inv.transpose() * skew(t) * r * kl_inv)
}

/// Similarity moving the centroid to the origin with mean distance `sqrt(2)`.
fn hartley(points: &[Point2<f64>]) -> Result<Matrix3<f64>> {
    let n = points.len() as f64;
    let cx = points.iter().map(|p| p.x).sum::<f64>() / n;
    let cy = points.iter().map(|p| p.y).sum::<f64>() / n;
    let mean_dist = points.iter().map(|p| (p.x - cx).hypot(p.y - cy)).sum::<f64>() / n;
    if mean_dist < 1e-12 {
        return Err(Error::Degenerate("all points coincide".into()));
    }
    let s = std::f64::consts::SQRT_2 / mean_dist;
    Ok(Matrix3::new(s, 0.0, -s * cx, 0.0, s, -s * cy, 0.0, 0.0, 1.0))
}

/// True when the points lie (numerically) on one line.
fn collinear(points: &[Point2<f64>], t: &Matrix3<f64>) -> bool {
    let (mut sxx, mut syy, mut sxy) = (0.0, 0.0, 0.0);
    for p in points {
        let q = t * Vector3::new(p.x, p.y, 1.0);
        sxx += q.x * q.x;
        syy += q.y * q.y;
        sxy += q.x * q.y;
    }
    // ratio of the scatter matrix's eigenvalues
    let tr = sxx + syy;
    let det = sxx * syy - sxy * sxy;
    det <= 1e-10 * tr * tr
}

/// Normalized eight-point estimate from `n >= 8` correspondences.
pub fn eight_point(left: &[Point2<f64>], right: &[Point2<f64>]) -> Result<FundamentalMatrix> {
    if left.len() != right.len() {
        return Err(Error::Shape(format!(
            "{} left points vs {} right points",
            left.len(),
            right.len()
        )));
    }
    if left.len() < 8 {
        return Err(Error::InsufficientData {
            needed: 8,
            got: left.len(),
        });
    }
    let (tl, tr) = (hartley(left)?, hartley(right)?);
    if collinear(left, &tl) || collinear(right, &tr) {
        return Err(Error::Degenerate("correspondences are collinear".into()));
    }
    let rows = left.len().max(9);
    let mut a = DMatrix::<f64>::zeros(rows, 9);
    for (i, (l, r)) in left.iter().zip(right).enumerate() {
        let p = tl * Vector3::new(l.x, l.y, 1.0);
        let q = tr * Vector3::new(r.x, r.y, 1.0);
        for (j, v) in [
            q.x * p.x, q.x * p.y, q.x,
            q.y * p.x, q.y * p.y, q.y,
            p.x, p.y, 1.0,
        ]
        .into_iter()
        .enumerate()
        {
            a[(i, j)] = v;
        }
    }
    let svd = a.svd(false, true);
    let v_t = svd.v_t.ok_or_else(|| Error::Degenerate("SVD failed".into()))?;
    let (imin, _) = svd.singular_values.argmin();
    let f = v_t.row(imin);
    let fn_ = Matrix3::new(f[0], f[1], f[2], f[3], f[4], f[5], f[6], f[7], f[8]);
    let fn_ = FundamentalMatrix::new(fn_)?;
    FundamentalMatrix::new(tr.transpose() * fn_.0 * tl)
}

/// First-order geometric error (pixels) of a correspondence under `F`.
pub fn sampson_distance(f: &FundamentalMatrix, l: &Point2<f64>, r: &Point2<f64>) -> f64 {
    let x = Vector3::new(l.x, l.y, 1.0);
    let xp = Vector3::new(r.x, r.y, 1.0);
    let fx = f.0 * x;
    let ftx = f.0.transpose() * xp;
    let num = xp.dot(&fx);
    let den = fx.x * fx.x + fx.y * fx.y + ftx.x * ftx.x + ftx.y * ftx.y;
    if den <= 0.0 {
        return f64::INFINITY;
    }
    (num * num / den).sqrt()
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct RansacConfig {
    pub ransac_iters: usize,
    pub inlier_threshold_px: f64,
    pub seed: u64,
}

impl Default for RansacConfig {
    fn default() -> Self {
        Self {
            ransac_iters: 2000,
            inlier_threshold_px: 1.0,
            seed: 0,
        }
    }
}

/// Robust fundamental-matrix fit: eight-point hypotheses from seeded random
/// samples, scored by Sampson distance, then refit on the best inlier set.
pub fn estimate_fundamental(
    matches: &[(Point2<f64>, Point2<f64>)],
    cfg: &RansacConfig,
) -> Result<(FundamentalMatrix, Vec<bool>)> {
    let n = matches.len();
    if n < 8 {
        return Err(Error::InsufficientData { needed: 8, got: n });
    }
    let (left, right): (Vec<_>, Vec<_>) = matches.iter().copied().unzip();
    for pts in [&left, &right] {
        if collinear(pts, &hartley(pts)?) {
            return Err(Error::Degenerate("correspondences are collinear".into()));
        }
    }
    let inliers_of = |f: &FundamentalMatrix| -> Vec<bool> {
        left.iter()
            .zip(&right)
            .map(|(l, r)| sampson_distance(f, l, r) <= cfg.inlier_threshold_px)
            .collect()
    };
    let count = |mask: &[bool]| mask.iter().filter(|&&b| b).count();

    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut best: Option<(usize, Vec<bool>)> = None;
    let (mut sl, mut sr) = (Vec::with_capacity(8), Vec::with_capacity(8));
    for _ in 0..cfg.ransac_iters {
        let idx = sample(&mut rng, n, 8);
        sl.clear();
        sr.clear();
        for i in idx.iter() {
            sl.push(left[i]);
            sr.push(right[i]);
        }
        let Ok(f) = eight_point(&sl, &sr) else {
            continue;
        };
        let mask = inliers_of(&f);
        let c = count(&mask);
        if best.as_ref().is_none_or(|(bc, _)| c > *bc) {
            let done = c == n;
            best = Some((c, mask));
            if done {
                break;
            }
        }
    }
    let (_, mask) = match best {
        Some(b) if b.0 >= 8 => b,
        _ => (n, vec![true; n]),
    };
    let pick = |pts: &[Point2<f64>], mask: &[bool]| -> Vec<Point2<f64>> {
        pts.iter().zip(mask).filter(|(_, &m)| m).map(|(p, _)| *p).collect()
    };
    let f = eight_point(&pick(&left, &mask), &pick(&right, &mask))?;
    let refit_mask = inliers_of(&f);
    let mask = if count(&refit_mask) >= count(&mask) {
        refit_mask
    } else {
        mask
    };
    Ok((f, mask))
}

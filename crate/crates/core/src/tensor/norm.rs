use super::graph::{Graph, Op, Var};
use super::{nchw, Element, Tensor};
use crate::error::{Error, Result};

/// Per-channel batch statistics from a training-mode batch norm, used by the
/// caller to update running estimates. `var` is the unbiased estimate.
#[derive(Clone, Debug)]
pub struct BatchStats<T> {
    pub mean: Vec<T>,
    pub var: Vec<T>,
}

impl<T: Element> Graph<T> {
    /// Normalize over the last axis, then scale by `gamma` and shift by `beta`.
    pub fn layer_norm(&mut self, x: Var, gamma: Var, beta: Var, eps: f64) -> Result<Var> {
        let shape = self.shape(x).to_vec();
        let e = *shape.last().unwrap_or(&0);
        if e == 0 {
            return Err(Error::Shape("layer_norm over an empty axis".into()));
        }
        if self.shape(gamma) != [e] || self.shape(beta) != [e] {
            return Err(Error::Shape(format!(
                "layer_norm: gamma/beta must have shape [{e}]"
            )));
        }
        let eps = T::from_f64(eps);
        let en = T::from_f64(e as f64);
        let xd = self.data(x);
        let (gd, bd) = (self.data(gamma), self.data(beta));
        let rows = xd.len() / e;
        let mut xhat = vec![T::zero(); xd.len()];
        let mut rstd = vec![T::zero(); rows];
        let mut y = vec![T::zero(); xd.len()];
        for r in 0..rows {
            let row = &xd[r * e..(r + 1) * e];
            let mean = row.iter().copied().sum::<T>() / en;
            let var = row.iter().map(|&v| (v - mean) * (v - mean)).sum::<T>() / en;
            let rs = T::one() / (var + eps).sqrt();
            rstd[r] = rs;
            for j in 0..e {
                let xh = (row[j] - mean) * rs;
                xhat[r * e + j] = xh;
                y[r * e + j] = xh * gd[j] + bd[j];
            }
        }
        let value = Tensor::new(shape, y)?;
        Ok(self.push(
            value,
            &[x, gamma, beta],
            Op::LayerNorm {
                x,
                gamma,
                beta,
                xhat,
                rstd,
            },
        ))
    }

    #[allow(clippy::too_many_arguments)]
    pub(super) fn layer_norm_backward(
        &self,
        x: Var,
        gamma: Var,
        beta: Var,
        xhat: &[T],
        rstd: &[T],
        gy: &[T],
        out: &mut Vec<(Var, Vec<T>)>,
    ) {
        let gd = self.data(gamma);
        let e = gd.len();
        let en = T::from_f64(e as f64);
        if self.requires_grad(x) {
            let mut gx = vec![T::zero(); gy.len()];
            for (r, &rs) in rstd.iter().enumerate() {
                let span = r * e..(r + 1) * e;
                let (gyr, xhr) = (&gy[span.clone()], &xhat[span.clone()]);
                let mut mean_d = T::zero();
                let mut mean_dx = T::zero();
                for j in 0..e {
                    let d = gyr[j] * gd[j];
                    mean_d += d;
                    mean_dx += d * xhr[j];
                }
                mean_d = mean_d / en;
                mean_dx = mean_dx / en;
                for j in 0..e {
                    gx[r * e + j] = rs * (gyr[j] * gd[j] - mean_d - xhr[j] * mean_dx);
                }
            }
            out.push((x, gx));
        }
        if self.requires_grad(gamma) {
            let mut gg = vec![T::zero(); e];
            for (i, (&g, &xh)) in gy.iter().zip(xhat).enumerate() {
                gg[i % e] += g * xh;
            }
            out.push((gamma, gg));
        }
        if self.requires_grad(beta) {
            let mut gb = vec![T::zero(); e];
            for (i, &g) in gy.iter().enumerate() {
                gb[i % e] += g;
            }
            out.push((beta, gb));
        }
    }

    /// Batch normalization over (N, H, W) per channel of an NCHW tensor.
    ///
    /// In training mode the batch statistics are used and returned; in eval
    /// mode `running` (mean, variance) must be supplied.
    pub fn batch_norm(
        &mut self,
        x: Var,
        gamma: Var,
        beta: Var,
        running: Option<(&[T], &[T])>,
        training: bool,
        eps: f64,
    ) -> Result<(Var, Option<BatchStats<T>>)> {
        let (n, c, h, w) = nchw(self.shape(x), "batch_norm")?;
        if self.shape(gamma) != [c] || self.shape(beta) != [c] {
            return Err(Error::Shape(format!(
                "batch_norm: gamma/beta must have shape [{c}]"
            )));
        }
        let plane = h * w;
        let count = n * plane;
        if count == 0 {
            return Err(Error::Shape("batch_norm over an empty batch".into()));
        }
        let eps = T::from_f64(eps);
        let xd = self.data(x);
        let idx = |ni: usize, ci: usize| (ni * c + ci) * plane;

        let (mean, var_biased, stats) = if training {
            let cn = T::from_f64(count as f64);
            let mut mean = vec![T::zero(); c];
            let mut var = vec![T::zero(); c];
            for ci in 0..c {
                let mut s = T::zero();
                for ni in 0..n {
                    s += xd[idx(ni, ci)..idx(ni, ci) + plane].iter().copied().sum::<T>();
                }
                let m = s / cn;
                let mut v = T::zero();
                for ni in 0..n {
                    for &val in &xd[idx(ni, ci)..idx(ni, ci) + plane] {
                        v += (val - m) * (val - m);
                    }
                }
                mean[ci] = m;
                var[ci] = v / cn;
            }
            let unbiased = if count > 1 {
                let scale = T::from_f64(count as f64 / (count - 1) as f64);
                var.iter().map(|&v| v * scale).collect()
            } else {
                var.clone()
            };
            let stats = BatchStats {
                mean: mean.clone(),
                var: unbiased,
            };
            (mean, var, Some(stats))
        } else {
            let (rm, rv) = running.ok_or_else(|| {
                Error::State("batch_norm eval mode needs running statistics".into())
            })?;
            if rm.len() != c || rv.len() != c {
                return Err(Error::Shape(format!(
                    "batch_norm: running statistics must have {c} channels"
                )));
            }
            (rm.to_vec(), rv.to_vec(), None)
        };

        let rstd: Vec<T> = var_biased.iter().map(|&v| T::one() / (v + eps).sqrt()).collect();
        let (gd, bd) = (self.data(gamma), self.data(beta));
        let mut xhat = vec![T::zero(); xd.len()];
        let mut y = vec![T::zero(); xd.len()];
        for ni in 0..n {
            for ci in 0..c {
                let start = idx(ni, ci);
                for p in start..start + plane {
                    let xh = (xd[p] - mean[ci]) * rstd[ci];
                    xhat[p] = xh;
                    y[p] = xh * gd[ci] + bd[ci];
                }
            }
        }
        let value = Tensor::new(vec![n, c, h, w], y)?;
        let v = self.push(
            value,
            &[x, gamma, beta],
            Op::BatchNorm {
                x,
                gamma,
                beta,
                xhat,
                rstd,
                training,
            },
        );
        Ok((v, stats))
    }

    #[allow(clippy::too_many_arguments)]
    pub(super) fn batch_norm_backward(
        &self,
        x: Var,
        gamma: Var,
        beta: Var,
        xhat: &[T],
        rstd: &[T],
        training: bool,
        gy: &[T],
        out: &mut Vec<(Var, Vec<T>)>,
    ) {
        let (n, c, h, w) = nchw(self.shape(x), "").expect("checked in forward");
        let plane = h * w;
        let gd = self.data(gamma);
        let idx = |ni: usize, ci: usize| (ni * c + ci) * plane;
        let mut sum_g = vec![T::zero(); c];
        let mut sum_gx = vec![T::zero(); c];
        for ni in 0..n {
            for ci in 0..c {
                for p in idx(ni, ci)..idx(ni, ci) + plane {
                    sum_g[ci] += gy[p];
                    sum_gx[ci] += gy[p] * xhat[p];
                }
            }
        }
        if self.requires_grad(x) {
            let cn = T::from_f64((n * plane) as f64);
            let mut gx = vec![T::zero(); gy.len()];
            for ni in 0..n {
                for ci in 0..c {
                    let k = gd[ci] * rstd[ci];
                    for p in idx(ni, ci)..idx(ni, ci) + plane {
                        gx[p] = if training {
                            k * (gy[p] - sum_g[ci] / cn - xhat[p] * sum_gx[ci] / cn)
                        } else {
                            k * gy[p]
                        };
                    }
                }
            }
            out.push((x, gx));
        }
        if self.requires_grad(gamma) {
            out.push((gamma, sum_gx));
        }
        if self.requires_grad(beta) {
            out.push((beta, sum_g));
        }
    }
}

use super::graph::{Graph, Op, Var};
use super::{Element, Tensor};
use crate::error::{Error, Result};

impl<T: Element> Graph<T> {
    fn check_target(&self, pred: Var, len: usize, what: &str) -> Result<()> {
        if self.value(pred).numel() != len {
            return Err(Error::Shape(format!(
                "{what}: prediction has {} values, target has {len}",
                self.value(pred).numel()
            )));
        }
        Ok(())
    }

    /// Mean binary cross-entropy (natural log) with predictions clipped to
    /// `[eps, 1 - eps]`.
    pub fn bce(&mut self, pred: Var, target: &[T], eps: f64) -> Result<Var> {
        self.check_target(pred, target.len(), "bce")?;
        let eps = T::from_f64(eps);
        let hi = T::one() - eps;
        let n = T::from_f64(target.len() as f64);
        let total: T = self
            .data(pred)
            .iter()
            .zip(target)
            .map(|(&p, &y)| {
                let p = p.max(eps).min(hi);
                -(y * p.ln() + (T::one() - y) * (T::one() - p).ln())
            })
            .sum();
        let value = Tensor::scalar(total / n);
        Ok(self.push(
            value,
            &[pred],
            Op::Bce {
                pred,
                target: target.to_vec(),
                eps,
            },
        ))
    }

    pub(super) fn bce_backward(
        &self,
        pred: Var,
        target: &[T],
        eps: T,
        gy: &[T],
        out: &mut Vec<(Var, Vec<T>)>,
    ) {
        if !self.requires_grad(pred) {
            return;
        }
        let hi = T::one() - eps;
        let scale = gy[0] / T::from_f64(target.len() as f64);
        let g = self
            .data(pred)
            .iter()
            .zip(target)
            .map(|(&p, &y)| {
                if p < eps || p > hi {
                    T::zero()
                } else {
                    scale * (p - y) / (p * (T::one() - p))
                }
            })
            .collect();
        out.push((pred, g));
    }

    /// `1 - 2 sum(y p) / (sum(y^2) + sum(p^2) + eps)`.
    pub fn dice(&mut self, pred: Var, target: &[T], eps: f64) -> Result<Var> {
        self.check_target(pred, target.len(), "dice")?;
        let eps = T::from_f64(eps);
        let (inter, denom) = dice_sums(self.data(pred), target, eps);
        let two = T::from_f64(2.0);
        let value = Tensor::scalar(T::one() - two * inter / denom);
        Ok(self.push(
            value,
            &[pred],
            Op::Dice {
                pred,
                target: target.to_vec(),
                eps,
            },
        ))
    }

    pub(super) fn dice_backward(
        &self,
        pred: Var,
        target: &[T],
        eps: T,
        gy: &[T],
        out: &mut Vec<(Var, Vec<T>)>,
    ) {
        if !self.requires_grad(pred) {
            return;
        }
        let pd = self.data(pred);
        let (inter, denom) = dice_sums(pd, target, eps);
        let two = T::from_f64(2.0);
        let g = pd
            .iter()
            .zip(target)
            .map(|(&p, &y)| gy[0] * (-two * y / denom + two * inter * two * p / (denom * denom)))
            .collect();
        out.push((pred, g));
    }

    /// Mean of `(1 - p) * E` over the pixels where the error map `E` is
    /// nonzero; zero (and gradient-free) when `E` is empty.
    pub fn egc(&mut self, pred: Var, error_map: &[T]) -> Result<Var> {
        self.check_target(pred, error_map.len(), "egc")?;
        let count = error_map.iter().filter(|&&e| e != T::zero()).count();
        let loss = if count == 0 {
            T::zero()
        } else {
            let s: T = self
                .data(pred)
                .iter()
                .zip(error_map)
                .map(|(&p, &e)| (T::one() - p) * e)
                .sum();
            s / T::from_f64(count as f64)
        };
        Ok(self.push(
            Tensor::scalar(loss),
            &[pred],
            Op::Egc {
                pred,
                error_map: error_map.to_vec(),
                count,
            },
        ))
    }

    pub(super) fn egc_backward(
        &self,
        pred: Var,
        error_map: &[T],
        count: usize,
        gy: &[T],
        out: &mut Vec<(Var, Vec<T>)>,
    ) {
        if !self.requires_grad(pred) || count == 0 {
            return;
        }
        let scale = gy[0] / T::from_f64(count as f64);
        out.push((pred, error_map.iter().map(|&e| -e * scale).collect()));
    }
}

fn dice_sums<T: Element>(pred: &[T], target: &[T], eps: T) -> (T, T) {
    let mut inter = T::zero();
    let mut yy = T::zero();
    let mut pp = T::zero();
    for (&p, &y) in pred.iter().zip(target) {
        inter += y * p;
        yy += y * y;
        pp += p * p;
    }
    (inter, yy + pp + eps)
}

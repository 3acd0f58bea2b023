use super::graph::{Graph, Op, Var};
use super::{nchw, Element, Tensor};
use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum PoolKind {
    Mean,
    Max,
}

/// Source taps for 2x bilinear upsampling with half-pixel centres.
fn upsample_taps(len: usize) -> Vec<(usize, usize, f64)> {
    (0..2 * len)
        .map(|o| {
            let src = ((o as f64 + 0.5) / 2.0 - 0.5).max(0.0);
            let i0 = (src.floor() as usize).min(len - 1);
            let i1 = (i0 + 1).min(len - 1);
            (i0, i1, src - i0 as f64)
        })
        .collect()
}

impl<T: Element> Graph<T> {
    /// 2x2 max pooling with stride 2 (odd trailing rows/columns dropped).
    pub fn maxpool2(&mut self, x: Var) -> Result<Var> {
        let (n, c, h, w) = nchw(self.shape(x), "maxpool2")?;
        let (oh, ow) = (h / 2, w / 2);
        if oh == 0 || ow == 0 {
            return Err(Error::Shape(format!("maxpool2 needs at least 2x2, got {h}x{w}")));
        }
        let xd = self.data(x);
        let mut y = Vec::with_capacity(n * c * oh * ow);
        let mut argmax = Vec::with_capacity(n * c * oh * ow);
        for plane in 0..n * c {
            let base = plane * h * w;
            for oy in 0..oh {
                for ox in 0..ow {
                    let mut best = base + 2 * oy * w + 2 * ox;
                    for (dy, dx) in [(0, 1), (1, 0), (1, 1)] {
                        let p = base + (2 * oy + dy) * w + 2 * ox + dx;
                        if xd[p] > xd[best] {
                            best = p;
                        }
                    }
                    y.push(xd[best]);
                    argmax.push(best);
                }
            }
        }
        let value = Tensor::new(vec![n, c, oh, ow], y)?;
        Ok(self.push(value, &[x], Op::MaxPool2 { x, argmax }))
    }

    /// Bilinear 2x upsampling (half-pixel centres, edge clamped).
    pub fn upsample2(&mut self, x: Var) -> Result<Var> {
        let (n, c, h, w) = nchw(self.shape(x), "upsample2")?;
        if h == 0 || w == 0 {
            return Err(Error::Shape("upsample2 of an empty map".into()));
        }
        let (ty, tx) = (upsample_taps(h), upsample_taps(w));
        let xd = self.data(x);
        let (oh, ow) = (2 * h, 2 * w);
        let mut y = vec![T::zero(); n * c * oh * ow];
        for plane in 0..n * c {
            let src = &xd[plane * h * w..(plane + 1) * h * w];
            let dst = &mut y[plane * oh * ow..(plane + 1) * oh * ow];
            for (oy, &(y0, y1, ly)) in ty.iter().enumerate() {
                let ly = T::from_f64(ly);
                for (ox, &(x0, x1, lx)) in tx.iter().enumerate() {
                    let lx = T::from_f64(lx);
                    let top = src[y0 * w + x0] * (T::one() - lx) + src[y0 * w + x1] * lx;
                    let bot = src[y1 * w + x0] * (T::one() - lx) + src[y1 * w + x1] * lx;
                    dst[oy * ow + ox] = top * (T::one() - ly) + bot * ly;
                }
            }
        }
        let value = Tensor::new(vec![n, c, oh, ow], y)?;
        Ok(self.push(value, &[x], Op::Upsample2(x)))
    }

    pub(super) fn upsample2_backward(&self, x: Var, gy: &[T], out: &mut Vec<(Var, Vec<T>)>) {
        if !self.requires_grad(x) {
            return;
        }
        let (n, c, h, w) = nchw(self.shape(x), "").expect("checked in forward");
        let (ty, tx) = (upsample_taps(h), upsample_taps(w));
        let (oh, ow) = (2 * h, 2 * w);
        let mut gx = vec![T::zero(); n * c * h * w];
        for plane in 0..n * c {
            let g = &gy[plane * oh * ow..(plane + 1) * oh * ow];
            let dst = &mut gx[plane * h * w..(plane + 1) * h * w];
            for (oy, &(y0, y1, ly)) in ty.iter().enumerate() {
                let ly = T::from_f64(ly);
                for (ox, &(x0, x1, lx)) in tx.iter().enumerate() {
                    let lx = T::from_f64(lx);
                    let v = g[oy * ow + ox];
                    dst[y0 * w + x0] += v * (T::one() - ly) * (T::one() - lx);
                    dst[y0 * w + x1] += v * (T::one() - ly) * lx;
                    dst[y1 * w + x0] += v * ly * (T::one() - lx);
                    dst[y1 * w + x1] += v * ly * lx;
                }
            }
        }
        out.push((x, gx));
    }

    /// Reduce each channel over its spatial extent: `[N,C,H,W] -> [N,C,1,1]`.
    pub fn spatial_pool(&mut self, x: Var, kind: PoolKind) -> Result<Var> {
        let (n, c, h, w) = nchw(self.shape(x), "spatial_pool")?;
        let plane = h * w;
        if plane == 0 {
            return Err(Error::Shape("spatial_pool of an empty map".into()));
        }
        let xd = self.data(x);
        let mut y = Vec::with_capacity(n * c);
        let mut argmax = Vec::new();
        for p in 0..n * c {
            let s = &xd[p * plane..(p + 1) * plane];
            match kind {
                PoolKind::Mean => y.push(s.iter().copied().sum::<T>() / T::from_f64(plane as f64)),
                PoolKind::Max => {
                    let mut best = 0;
                    for (i, &v) in s.iter().enumerate() {
                        if v > s[best] {
                            best = i;
                        }
                    }
                    y.push(s[best]);
                    argmax.push(p * plane + best);
                }
            }
        }
        let value = Tensor::new(vec![n, c, 1, 1], y)?;
        Ok(self.push(value, &[x], Op::SpatialPool { x, kind, argmax }))
    }

    pub(super) fn spatial_pool_backward(
        &self,
        x: Var,
        kind: PoolKind,
        argmax: &[usize],
        gy: &[T],
        out: &mut Vec<(Var, Vec<T>)>,
    ) {
        if !self.requires_grad(x) {
            return;
        }
        let numel = self.value(x).numel();
        let plane = numel / gy.len();
        let mut gx = vec![T::zero(); numel];
        match kind {
            PoolKind::Mean => {
                let inv = T::one() / T::from_f64(plane as f64);
                for (i, g) in gx.iter_mut().enumerate() {
                    *g = gy[i / plane] * inv;
                }
            }
            PoolKind::Max => {
                for (&src, &g) in argmax.iter().zip(gy) {
                    gx[src] += g;
                }
            }
        }
        out.push((x, gx));
    }

    /// Reduce across channels at each position: `[N,C,H,W] -> [N,1,H,W]`.
    pub fn channel_pool(&mut self, x: Var, kind: PoolKind) -> Result<Var> {
        let (n, c, h, w) = nchw(self.shape(x), "channel_pool")?;
        if c == 0 {
            return Err(Error::Shape("channel_pool with zero channels".into()));
        }
        let plane = h * w;
        let xd = self.data(x);
        let mut y = vec![T::zero(); n * plane];
        let mut argmax = Vec::new();
        if kind == PoolKind::Max {
            argmax = vec![0; n * plane];
        }
        for ni in 0..n {
            for p in 0..plane {
                let at = |ci: usize| (ni * c + ci) * plane + p;
                match kind {
                    PoolKind::Mean => {
                        let s: T = (0..c).map(|ci| xd[at(ci)]).sum();
                        y[ni * plane + p] = s / T::from_f64(c as f64);
                    }
                    PoolKind::Max => {
                        let mut best = at(0);
                        for ci in 1..c {
                            if xd[at(ci)] > xd[best] {
                                best = at(ci);
                            }
                        }
                        y[ni * plane + p] = xd[best];
                        argmax[ni * plane + p] = best;
                    }
                }
            }
        }
        let value = Tensor::new(vec![n, 1, h, w], y)?;
        Ok(self.push(value, &[x], Op::ChannelPool { x, kind, argmax }))
    }

    pub(super) fn channel_pool_backward(
        &self,
        x: Var,
        kind: PoolKind,
        argmax: &[usize],
        gy: &[T],
        out: &mut Vec<(Var, Vec<T>)>,
    ) {
        if !self.requires_grad(x) {
            return;
        }
        let (n, c, h, w) = nchw(self.shape(x), "").expect("checked in forward");
        let plane = h * w;
        let mut gx = vec![T::zero(); n * c * plane];
        match kind {
            PoolKind::Mean => {
                let inv = T::one() / T::from_f64(c as f64);
                for ni in 0..n {
                    for ci in 0..c {
                        for p in 0..plane {
                            gx[(ni * c + ci) * plane + p] = gy[ni * plane + p] * inv;
                        }
                    }
                }
            }
            PoolKind::Max => {
                for (&src, &g) in argmax.iter().zip(gy) {
                    gx[src] += g;
                }
            }
        }
        out.push((x, gx));
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::testutil::check_gradients;

    #[test]
    fn maxpool_picks_max() {
        let mut g = Graph::<f64>::new();
        let x = g.constant(Tensor::new(vec![1, 1, 2, 2], vec![1.0, 2.0, 3.0, 4.0]).unwrap());
        let y = g.maxpool2(x).unwrap();
        assert_eq!(g.value(y).data(), &[4.0]);
    }

    #[test]
    fn upsample_then_pool_constant_is_identity() {
        let mut g = Graph::<f64>::new();
        let t = Tensor::full(&[1, 2, 3, 5], 0.75);
        let x = g.constant(t.clone());
        let u = g.upsample2(x).unwrap();
        assert_eq!(g.shape(u), &[1, 2, 6, 10]);
        let p = g.maxpool2(u).unwrap();
        assert_eq!(g.value(p), &t);
    }

    #[test]
    fn upsample_interpolates_linearly() {
        let mut g = Graph::<f64>::new();
        let x = g.constant(Tensor::new(vec![1, 1, 1, 2], vec![0.0, 4.0]).unwrap());
        let u = g.upsample2(x).unwrap();
        assert_eq!(g.value(u).data(), &[0.0, 1.0, 3.0, 4.0, 0.0, 1.0, 3.0, 4.0]);
    }

    #[test]
    fn pool_gradients() {
        check_gradients(&[&[2, 2, 4, 6]], 1e-4, |g, v| g.maxpool2(v[0]));
        check_gradients(&[&[1, 2, 3, 4]], 1e-4, |g, v| g.upsample2(v[0]));
        for kind in [PoolKind::Mean, PoolKind::Max] {
            check_gradients(&[&[2, 3, 3, 4]], 1e-4, move |g, v| g.spatial_pool(v[0], kind));
            check_gradients(&[&[2, 3, 3, 4]], 1e-4, move |g, v| g.channel_pool(v[0], kind));
        }
    }
}

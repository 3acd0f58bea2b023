use rayon::prelude::*;

use super::graph::{Graph, Op, Var};
use super::{nchw, Element, Tensor};
use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug)]
pub(crate) struct ConvGeom {
    stride: usize,
    pad: usize,
    groups: usize,
    kh: usize,
    kw: usize,
    out_h: usize,
    out_w: usize,
}

impl ConvGeom {
    fn cols_rows(&self, cin_per_group: usize) -> usize {
        cin_per_group * self.kh * self.kw
    }
    fn cols_len(&self, cin_per_group: usize) -> usize {
        self.cols_rows(cin_per_group) * self.out_h * self.out_w
    }
}

/// Unfold channels `[c0, c0+cg)` of one sample into a
/// `(cg*kh*kw) x (out_h*out_w)` matrix.
fn im2col<T: Element>(
    x: &[T],
    h: usize,
    w: usize,
    c0: usize,
    cg: usize,
    geom: &ConvGeom,
    cols: &mut [T],
) {
    let (oh, ow) = (geom.out_h, geom.out_w);
    let plane = oh * ow;
    for c in 0..cg {
        let src = &x[(c0 + c) * h * w..(c0 + c + 1) * h * w];
        for ki in 0..geom.kh {
            for kj in 0..geom.kw {
                let row = (c * geom.kh + ki) * geom.kw + kj;
                let dst = &mut cols[row * plane..(row + 1) * plane];
                for oy in 0..oh {
                    let iy = (oy * geom.stride + ki) as isize - geom.pad as isize;
                    let line = &mut dst[oy * ow..(oy + 1) * ow];
                    if iy < 0 || iy >= h as isize {
                        line.fill(T::zero());
                        continue;
                    }
                    let srow = &src[iy as usize * w..(iy as usize + 1) * w];
                    for (ox, d) in line.iter_mut().enumerate() {
                        let ix = (ox * geom.stride + kj) as isize - geom.pad as isize;
                        *d = if ix < 0 || ix >= w as isize {
                            T::zero()
                        } else {
                            srow[ix as usize]
                        };
                    }
                }
            }
        }
    }
}

/// Adjoint of [`im2col`]: scatter-add columns back into channels `[c0, c0+cg)`.
fn col2im<T: Element>(
    cols: &[T],
    h: usize,
    w: usize,
    c0: usize,
    cg: usize,
    geom: &ConvGeom,
    gx: &mut [T],
) {
    let (oh, ow) = (geom.out_h, geom.out_w);
    let plane = oh * ow;
    for c in 0..cg {
        let dst = &mut gx[(c0 + c) * h * w..(c0 + c + 1) * h * w];
        for ki in 0..geom.kh {
            for kj in 0..geom.kw {
                let row = (c * geom.kh + ki) * geom.kw + kj;
                let src = &cols[row * plane..(row + 1) * plane];
                for oy in 0..oh {
                    let iy = (oy * geom.stride + ki) as isize - geom.pad as isize;
                    if iy < 0 || iy >= h as isize {
                        continue;
                    }
                    let drow = &mut dst[iy as usize * w..(iy as usize + 1) * w];
                    for ox in 0..ow {
                        let ix = (ox * geom.stride + kj) as isize - geom.pad as isize;
                        if ix >= 0 && ix < w as isize {
                            drow[ix as usize] += src[oy * ow + ox];
                        }
                    }
                }
            }
        }
    }
}

impl<T: Element> Graph<T> {
    /// Grouped 2-D cross-correlation. `groups == channels` gives a depthwise
    /// convolution with weight `[C, 1, kh, kw]`.
    pub fn conv2d_grouped(
        &mut self,
        x: Var,
        weight: Var,
        bias: Option<Var>,
        stride: usize,
        pad: usize,
        groups: usize,
    ) -> Result<Var> {
        let (n, c, h, w) = nchw(self.shape(x), "conv2d input")?;
        let (f, cg, kh, kw) = nchw(self.shape(weight), "conv2d weight")?;
        if groups == 0 || c % groups != 0 || f % groups != 0 || c / groups != cg {
            return Err(Error::Shape(format!(
                "conv2d: input channels {c}, filters {f}, weight channels {cg} incompatible with {groups} groups"
            )));
        }
        if stride == 0 || h + 2 * pad < kh || w + 2 * pad < kw {
            return Err(Error::Shape(format!(
                "conv2d: kernel {kh}x{kw} does not fit padded input {h}x{w} (pad {pad}, stride {stride})"
            )));
        }
        if let Some(b) = bias {
            if self.shape(b) != [f] {
                return Err(Error::Shape(format!(
                    "conv2d: bias {:?} does not match {f} filters",
                    self.shape(b)
                )));
            }
        }
        let geom = ConvGeom {
            stride,
            pad,
            groups,
            kh,
            kw,
            out_h: (h + 2 * pad - kh) / stride + 1,
            out_w: (w + 2 * pad - kw) / stride + 1,
        };
        let fg = f / groups;
        let plane = geom.out_h * geom.out_w;
        let xd = self.data(x);
        let wd = self.data(weight);
        let bd = bias.map(|b| self.data(b));
        let mut out = vec![T::zero(); n * f * plane];
        out.par_chunks_mut(f * plane)
            .enumerate()
            .for_each(|(ni, out_n)| {
                let xn = &xd[ni * c * h * w..(ni + 1) * c * h * w];
                let mut cols = vec![T::zero(); geom.cols_len(cg)];
                let k = geom.cols_rows(cg);
                for g in 0..groups {
                    im2col(xn, h, w, g * cg, cg, &geom, &mut cols);
                    T::gemm(
                        false,
                        false,
                        fg,
                        plane,
                        k,
                        T::one(),
                        &wd[g * fg * k..(g + 1) * fg * k],
                        &cols,
                        T::zero(),
                        &mut out_n[g * fg * plane..(g + 1) * fg * plane],
                    );
                }
                if let Some(bd) = bd {
                    for (fi, chunk) in out_n.chunks_mut(plane).enumerate() {
                        for v in chunk {
                            *v += bd[fi];
                        }
                    }
                }
            });
        let value = Tensor::new(vec![n, f, geom.out_h, geom.out_w], out)?;
        let mut inputs = vec![x, weight];
        inputs.extend(bias);
        Ok(self.push(
            value,
            &inputs,
            Op::Conv2d {
                x,
                w: weight,
                b: bias,
                geom,
            },
        ))
    }

    pub fn conv2d(
        &mut self,
        x: Var,
        weight: Var,
        bias: Option<Var>,
        stride: usize,
        pad: usize,
    ) -> Result<Var> {
        self.conv2d_grouped(x, weight, bias, stride, pad, 1)
    }

    /// Per-channel convolution with weight `[C, 1, kh, kw]`.
    pub fn depthwise_conv2d(
        &mut self,
        x: Var,
        weight: Var,
        bias: Option<Var>,
        stride: usize,
        pad: usize,
    ) -> Result<Var> {
        let c = nchw(self.shape(x), "depthwise_conv2d input")?.1;
        self.conv2d_grouped(x, weight, bias, stride, pad, c)
    }

    pub(super) fn conv2d_backward(
        &self,
        x: Var,
        weight: Var,
        bias: Option<Var>,
        geom: &ConvGeom,
        gy: &[T],
        out: &mut Vec<(Var, Vec<T>)>,
    ) {
        let (n, c, h, w) = nchw(self.shape(x), "").expect("checked in forward");
        let (f, cg, _, _) = nchw(self.shape(weight), "").expect("checked in forward");
        let groups = geom.groups;
        let fg = f / groups;
        let plane = geom.out_h * geom.out_w;
        let k = geom.cols_rows(cg);
        let xd = self.data(x);
        let wd = self.data(weight);
        let want_x = self.requires_grad(x);
        let want_w = self.requires_grad(weight);

        // Per-sample partials, reduced below in sample order so the result
        // does not depend on the thread schedule.
        let partials: Vec<(Vec<T>, Vec<T>)> = (0..n)
            .into_par_iter()
            .map(|ni| {
                let xn = &xd[ni * c * h * w..(ni + 1) * c * h * w];
                let gyn = &gy[ni * f * plane..(ni + 1) * f * plane];
                let mut gx = if want_x { vec![T::zero(); c * h * w] } else { Vec::new() };
                let mut gw = if want_w { vec![T::zero(); wd.len()] } else { Vec::new() };
                let mut cols = vec![T::zero(); geom.cols_len(cg)];
                for g in 0..groups {
                    let gyg = &gyn[g * fg * plane..(g + 1) * fg * plane];
                    if want_w {
                        im2col(xn, h, w, g * cg, cg, geom, &mut cols);
                        T::gemm(
                            false,
                            true,
                            fg,
                            k,
                            plane,
                            T::one(),
                            gyg,
                            &cols,
                            T::one(),
                            &mut gw[g * fg * k..(g + 1) * fg * k],
                        );
                    }
                    if want_x {
                        T::gemm(
                            true,
                            false,
                            k,
                            plane,
                            fg,
                            T::one(),
                            &wd[g * fg * k..(g + 1) * fg * k],
                            gyg,
                            T::zero(),
                            &mut cols,
                        );
                        col2im(&cols, h, w, g * cg, cg, geom, &mut gx);
                    }
                }
                (gx, gw)
            })
            .collect();

        if want_x {
            let gx: Vec<T> = partials.iter().flat_map(|(gx, _)| gx.iter().copied()).collect();
            out.push((x, gx));
        }
        if want_w {
            let mut gw = vec![T::zero(); wd.len()];
            for (_, p) in &partials {
                for (a, &b) in gw.iter_mut().zip(p) {
                    *a += b;
                }
            }
            out.push((weight, gw));
        }
        if let Some(b) = bias.filter(|b| self.requires_grad(*b)) {
            let mut gb = vec![T::zero(); f];
            for ni in 0..n {
                for (fi, g) in gb.iter_mut().enumerate() {
                    let start = (ni * f + fi) * plane;
                    *g += gy[start..start + plane].iter().copied().sum::<T>();
                }
            }
            out.push((b, gb));
        }
    }

    /// Token-wise affine map: `x[..., in] -> x W^T + b` with `W: [out, in]`.
    pub fn linear(&mut self, x: Var, weight: Var, bias: Option<Var>) -> Result<Var> {
        let xs = self.shape(x).to_vec();
        let ws = self.shape(weight).to_vec();
        let (Some(&din), [dout, win]) = (xs.last(), ws.as_slice()) else {
            return Err(Error::Shape(format!(
                "linear: input {xs:?} / weight {ws:?} ranks invalid"
            )));
        };
        if din != *win {
            return Err(Error::Shape(format!(
                "linear: input features {din} != weight features {win}"
            )));
        }
        if let Some(b) = bias {
            if self.shape(b) != [*dout] {
                return Err(Error::Shape(format!(
                    "linear: bias {:?} does not match {dout} outputs",
                    self.shape(b)
                )));
            }
        }
        let rows = self.value(x).numel() / din.max(1);
        let mut y = vec![T::zero(); rows * dout];
        T::gemm(
            false,
            true,
            rows,
            *dout,
            din,
            T::one(),
            self.data(x),
            self.data(weight),
            T::zero(),
            &mut y,
        );
        if let Some(b) = bias {
            let bd = self.data(b);
            for row in y.chunks_mut(*dout) {
                for (v, &bb) in row.iter_mut().zip(bd) {
                    *v += bb;
                }
            }
        }
        let mut shape = xs.clone();
        *shape.last_mut().expect("rank >= 1") = *dout;
        let value = Tensor::new(shape, y)?;
        let mut inputs = vec![x, weight];
        inputs.extend(bias);
        Ok(self.push(
            value,
            &inputs,
            Op::Linear {
                x,
                w: weight,
                b: bias,
            },
        ))
    }

    pub(super) fn linear_backward(
        &self,
        x: Var,
        weight: Var,
        bias: Option<Var>,
        gy: &[T],
        out: &mut Vec<(Var, Vec<T>)>,
    ) {
        let ws = self.shape(weight);
        let (dout, din) = (ws[0], ws[1]);
        let rows = self.value(x).numel() / din.max(1);
        if self.requires_grad(x) {
            let mut gx = vec![T::zero(); rows * din];
            T::gemm(
                false,
                false,
                rows,
                din,
                dout,
                T::one(),
                gy,
                self.data(weight),
                T::zero(),
                &mut gx,
            );
            out.push((x, gx));
        }
        if self.requires_grad(weight) {
            let mut gw = vec![T::zero(); dout * din];
            T::gemm(
                true,
                false,
                dout,
                din,
                rows,
                T::one(),
                gy,
                self.data(x),
                T::zero(),
                &mut gw,
            );
            out.push((weight, gw));
        }
        if let Some(b) = bias.filter(|b| self.requires_grad(*b)) {
            let mut gb = vec![T::zero(); dout];
            for row in gy.chunks(dout) {
                for (g, &v) in gb.iter_mut().zip(row) {
                    *g += v;
                }
            }
            out.push((b, gb));
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::testutil::check_gradients;

    #[test]
    fn ones_kernel_sums() {
        let mut g = Graph::<f64>::new();
        let x = g.constant(Tensor::full(&[1, 1, 3, 3], 1.0));
        let w = g.constant(Tensor::full(&[1, 1, 3, 3], 1.0));
        let y = g.conv2d(x, w, None, 1, 0).unwrap();
        assert_eq!(g.shape(y), &[1, 1, 1, 1]);
        assert_eq!(g.value(y).data(), &[9.0]);
    }

    #[test]
    fn centre_kernel_is_identity() {
        let mut g = Graph::<f64>::new();
        let xt = Tensor::from_fn(&[2, 1, 4, 5], |i| i as f64 * 0.1);
        let x = g.constant(xt.clone());
        let w = g.constant(Tensor::from_fn(&[1, 1, 3, 3], |i| if i == 4 { 1.0 } else { 0.0 }));
        let y = g.conv2d(x, w, None, 1, 1).unwrap();
        assert_eq!(g.value(y), &xt);
    }

    #[test]
    fn depthwise_identity_and_no_mixing() {
        let mut g = Graph::<f64>::new();
        let xt = Tensor::from_fn(&[1, 2, 4, 4], |i| if i < 16 { i as f64 + 1.0 } else { 0.0 });
        let x = g.constant(xt.clone());
        let w = g.constant(Tensor::from_fn(&[2, 1, 3, 3], |i| if i % 9 == 4 { 1.0 } else { 0.0 }));
        let y = g.depthwise_conv2d(x, w, None, 1, 1).unwrap();
        assert_eq!(g.value(y), &xt);

        let w2 = g.constant(Tensor::full(&[2, 1, 3, 3], 1.0));
        let y2 = g.depthwise_conv2d(x, w2, None, 1, 1).unwrap();
        assert!(g.value(y2).data()[16..].iter().all(|&v| v == 0.0));
    }

    #[test]
    fn conv_shape_errors() {
        let mut g = Graph::<f64>::new();
        let x = g.constant(Tensor::zeros(&[1, 3, 4, 4]));
        let w = g.constant(Tensor::zeros(&[2, 2, 3, 3]));
        assert!(g.conv2d(x, w, None, 1, 1).is_err());
        let big = g.constant(Tensor::zeros(&[1, 3, 7, 7]));
        assert!(g.conv2d(x, big, None, 1, 0).is_err());
    }

    #[test]
    fn conv_gradients() {
        check_gradients(&[&[2, 3, 5, 4], &[4, 3, 3, 3], &[4]], 1e-4, |g, v| {
            g.conv2d(v[0], v[1], Some(v[2]), 1, 1)
        });
        check_gradients(&[&[1, 2, 6, 6], &[3, 2, 3, 3], &[3]], 1e-4, |g, v| {
            g.conv2d(v[0], v[1], Some(v[2]), 2, 1)
        });
        check_gradients(&[&[2, 3, 4, 4], &[3, 1, 3, 3], &[3]], 1e-4, |g, v| {
            g.depthwise_conv2d(v[0], v[1], Some(v[2]), 1, 1)
        });
    }

    #[test]
    fn linear_gradients() {
        check_gradients(&[&[2, 5, 3], &[4, 3], &[4]], 1e-4, |g, v| {
            g.linear(v[0], v[1], Some(v[2]))
        });
    }
}

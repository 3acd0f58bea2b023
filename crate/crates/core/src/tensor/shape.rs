use super::graph::{Graph, Op, Var};
use super::{nchw, Element, Tensor};
use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum ShiftAxis {
    Width,
    Height,
}

/// Translate channel groups of one NCHW buffer along `axis`, zero filling.
/// `sign = -1` applies the opposite shift (the adjoint).
fn shift_groups<T: Element>(
    src: &[T],
    shape: (usize, usize, usize, usize),
    axis: ShiftAxis,
    offsets: &[isize],
    sign: isize,
) -> Vec<T> {
    let (n, c, h, w) = shape;
    let per_group = c / offsets.len();
    let mut dst = vec![T::zero(); src.len()];
    for ni in 0..n {
        for ci in 0..c {
            let off = offsets[ci / per_group] * sign;
            let base = (ni * c + ci) * h * w;
            for y in 0..h {
                for x in 0..w {
                    let (sy, sx) = match axis {
                        ShiftAxis::Width => (y as isize, x as isize - off),
                        ShiftAxis::Height => (y as isize - off, x as isize),
                    };
                    if sy >= 0 && sy < h as isize && sx >= 0 && sx < w as isize {
                        dst[base + y * w + x] = src[base + sy as usize * w + sx as usize];
                    }
                }
            }
        }
    }
    dst
}

impl<T: Element> Graph<T> {
    /// Concatenate along `axis`; all other axes must agree.
    pub fn concat(&mut self, inputs: &[Var], axis: usize) -> Result<Var> {
        let first = inputs
            .first()
            .ok_or_else(|| Error::Shape("concat of zero tensors".into()))?;
        let base = self.shape(*first).to_vec();
        if axis >= base.len() {
            return Err(Error::Shape(format!("concat axis {axis} out of range for {base:?}")));
        }
        let mut total = 0;
        for v in inputs {
            let s = self.shape(*v);
            let compatible = s.len() == base.len()
                && s.iter().zip(&base).enumerate().all(|(d, (a, b))| d == axis || a == b);
            if !compatible {
                return Err(Error::Shape(format!(
                    "concat: {s:?} incompatible with {base:?} on axis {axis}"
                )));
            }
            total += s[axis];
        }
        let outer: usize = base[..axis].iter().product();
        let inner: usize = base[axis + 1..].iter().product();
        let mut data = Vec::with_capacity(outer * total * inner);
        for o in 0..outer {
            for v in inputs {
                let len = self.shape(*v)[axis] * inner;
                data.extend_from_slice(&self.data(*v)[o * len..(o + 1) * len]);
            }
        }
        let mut shape = base;
        shape[axis] = total;
        let value = Tensor::new(shape, data)?;
        Ok(self.push(
            value,
            inputs,
            Op::Concat {
                inputs: inputs.to_vec(),
                axis,
            },
        ))
    }

    pub(super) fn concat_backward(
        &self,
        inputs: &[Var],
        axis: usize,
        gy: &[T],
        out: &mut Vec<(Var, Vec<T>)>,
    ) {
        let base = self.shape(inputs[0]);
        let outer: usize = base[..axis].iter().product();
        let inner: usize = base[axis + 1..].iter().product();
        let total: usize = inputs.iter().map(|v| self.shape(*v)[axis]).sum();
        let mut offset = 0;
        for v in inputs {
            let len = self.shape(*v)[axis] * inner;
            if self.requires_grad(*v) {
                let mut g = Vec::with_capacity(outer * len);
                for o in 0..outer {
                    let start = o * total * inner + offset;
                    g.extend_from_slice(&gy[start..start + len]);
                }
                out.push((*v, g));
            }
            offset += len;
        }
    }

    /// Split channels into `offsets.len()` contiguous groups and translate
    /// group `g` by `offsets[g]` pixels along `axis`, filling with zeros.
    pub fn axial_shift(&mut self, x: Var, axis: ShiftAxis, offsets: &[isize]) -> Result<Var> {
        let dims = nchw(self.shape(x), "axial_shift")?;
        if offsets.is_empty() || dims.1 % offsets.len() != 0 {
            return Err(Error::Shape(format!(
                "axial_shift: {} channels not divisible into {} groups",
                dims.1,
                offsets.len()
            )));
        }
        let y = shift_groups(self.data(x), dims, axis, offsets, 1);
        let value = Tensor::new(self.shape(x).to_vec(), y)?;
        Ok(self.push(
            value,
            &[x],
            Op::AxialShift {
                x,
                axis,
                offsets: offsets.to_vec(),
            },
        ))
    }

    pub(super) fn axial_shift_backward(
        &self,
        x: Var,
        axis: ShiftAxis,
        offsets: &[isize],
        gy: &[T],
        out: &mut Vec<(Var, Vec<T>)>,
    ) {
        if self.requires_grad(x) {
            let dims = nchw(self.shape(x), "").expect("checked in forward");
            out.push((x, shift_groups(gy, dims, axis, offsets, -1)));
        }
    }

    /// `[N,C,H,W] -> [N, H*W, C]`: one token per spatial position.
    pub fn to_tokens(&mut self, x: Var) -> Result<Var> {
        let (n, c, h, w) = nchw(self.shape(x), "to_tokens")?;
        let y = permute_nchw_to_nlc(self.data(x), n, c, h * w);
        let value = Tensor::new(vec![n, h * w, c], y)?;
        Ok(self.push(value, &[x], Op::ToTokens(x)))
    }

    pub(super) fn to_tokens_backward(&self, x: Var, gy: &[T], out: &mut Vec<(Var, Vec<T>)>) {
        if self.requires_grad(x) {
            let (n, c, h, w) = nchw(self.shape(x), "").expect("checked in forward");
            out.push((x, permute_nlc_to_nchw(gy, n, c, h * w)));
        }
    }

    /// Inverse of [`Graph::to_tokens`]: `[N, H*W, C] -> [N,C,H,W]`.
    pub fn from_tokens(&mut self, tokens: Var, h: usize, w: usize) -> Result<Var> {
        let s = self.shape(tokens).to_vec();
        let [n, l, c] = s[..] else {
            return Err(Error::Shape(format!("from_tokens expects [N, L, C], got {s:?}")));
        };
        if l != h * w {
            return Err(Error::Shape(format!(
                "from_tokens: {l} tokens cannot form a {h}x{w} map"
            )));
        }
        let y = permute_nlc_to_nchw(self.data(tokens), n, c, l);
        let value = Tensor::new(vec![n, c, h, w], y)?;
        Ok(self.push(value, &[tokens], Op::FromTokens(tokens)))
    }

    pub(super) fn from_tokens_backward(
        &self,
        tokens: Var,
        node: usize,
        gy: &[T],
        out: &mut Vec<(Var, Vec<T>)>,
    ) {
        if self.requires_grad(tokens) {
            let s = self.nodes[node].value.shape();
            let (n, c, l) = (s[0], s[1], s[2] * s[3]);
            out.push((tokens, permute_nchw_to_nlc(gy, n, c, l)));
        }
    }
}

fn permute_nchw_to_nlc<T: Element>(src: &[T], n: usize, c: usize, l: usize) -> Vec<T> {
    let mut dst = vec![T::zero(); src.len()];
    for ni in 0..n {
        for ci in 0..c {
            for p in 0..l {
                dst[(ni * l + p) * c + ci] = src[(ni * c + ci) * l + p];
            }
        }
    }
    dst
}

fn permute_nlc_to_nchw<T: Element>(src: &[T], n: usize, c: usize, l: usize) -> Vec<T> {
    let mut dst = vec![T::zero(); src.len()];
    for ni in 0..n {
        for p in 0..l {
            for ci in 0..c {
                dst[(ni * c + ci) * l + p] = src[(ni * l + p) * c + ci];
            }
        }
    }
    dst
}

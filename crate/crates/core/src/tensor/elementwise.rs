use super::graph::{Graph, Op, Var};
use super::{Element, Tensor};
use crate::error::{Error, Result};

const INV_SQRT_2: f64 = std::f64::consts::FRAC_1_SQRT_2;
const INV_SQRT_2PI: f64 = 0.398_942_280_401_432_7;

/// Exact GELU, `x * Phi(x)`.
pub(crate) fn gelu<T: Element>(x: T) -> T {
    let v = x.to_f64();
    T::from_f64(0.5 * v * (1.0 + libm::erf(v * INV_SQRT_2)))
}

/// `d/dx [x * Phi(x)] = Phi(x) + x * phi(x)`.
pub(crate) fn gelu_grad<T: Element>(x: T) -> T {
    let v = x.to_f64();
    let cdf = 0.5 * (1.0 + libm::erf(v * INV_SQRT_2));
    let pdf = INV_SQRT_2PI * (-0.5 * v * v).exp();
    T::from_f64(cdf + v * pdf)
}

fn sigmoid<T: Element>(x: T) -> T {
    if x >= T::zero() {
        T::one() / (T::one() + (-x).exp())
    } else {
        let e = x.exp();
        e / (T::one() + e)
    }
}

/// Row-major strides for `shape`.
pub(super) fn strides(shape: &[usize]) -> Vec<usize> {
    let mut s = vec![1; shape.len()];
    for i in (0..shape.len().saturating_sub(1)).rev() {
        s[i] = s[i + 1] * shape[i + 1];
    }
    s
}

/// For every flat index of `full`, the flat index in a tensor of shape
/// `small` that broadcasts onto it.
fn broadcast_index_map(full: &[usize], small: &[usize]) -> Vec<usize> {
    let fs = strides(full);
    let ss = strides(small);
    let numel: usize = full.iter().product();
    (0..numel)
        .map(|flat| {
            let mut rem = flat;
            let mut idx = 0;
            for d in 0..full.len() {
                let coord = rem / fs[d];
                rem %= fs[d];
                if small[d] != 1 {
                    idx += coord * ss[d];
                }
            }
            idx
        })
        .collect()
}

impl<T: Element> Graph<T> {
    fn same_shape(&self, a: Var, b: Var, what: &str) -> Result<()> {
        if self.shape(a) != self.shape(b) {
            return Err(Error::Shape(format!(
                "{what}: shapes {:?} and {:?} differ",
                self.shape(a),
                self.shape(b)
            )));
        }
        Ok(())
    }

    fn zip_map(&self, a: Var, b: Var, f: impl Fn(T, T) -> T) -> Tensor<T> {
        let data = self
            .data(a)
            .iter()
            .zip(self.data(b))
            .map(|(&x, &y)| f(x, y))
            .collect();
        Tensor::new(self.shape(a).to_vec(), data).expect("same shape")
    }

    fn map(&self, a: Var, f: impl Fn(T) -> T) -> Tensor<T> {
        let data = self.data(a).iter().map(|&x| f(x)).collect();
        Tensor::new(self.shape(a).to_vec(), data).expect("same shape")
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape(a, b, "add")?;
        let v = self.zip_map(a, b, |x, y| x + y);
        Ok(self.push(v, &[a, b], Op::Add(a, b)))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape(a, b, "sub")?;
        let v = self.zip_map(a, b, |x, y| x - y);
        Ok(self.push(v, &[a, b], Op::Sub(a, b)))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape(a, b, "mul")?;
        let v = self.zip_map(a, b, |x, y| x * y);
        Ok(self.push(v, &[a, b], Op::Mul(a, b)))
    }

    /// Elementwise product where `b` has the rank of `a` and every axis of
    /// `b` either matches `a` or has size 1. Used for attention scaling.
    pub fn mul_bcast(&mut self, a: Var, b: Var) -> Result<Var> {
        let (sa, sb) = (self.shape(a).to_vec(), self.shape(b).to_vec());
        if sa.len() != sb.len() || sa.iter().zip(&sb).any(|(&x, &y)| y != x && y != 1) {
            return Err(Error::Shape(format!(
                "mul_bcast: {sb:?} does not broadcast onto {sa:?}"
            )));
        }
        let map = broadcast_index_map(&sa, &sb);
        let (ad, bd) = (self.data(a), self.data(b));
        let data = ad.iter().zip(&map).map(|(&x, &j)| x * bd[j]).collect();
        let v = Tensor::new(sa, data)?;
        Ok(self.push(v, &[a, b], Op::MulBcast(a, b)))
    }

    pub(super) fn mul_bcast_backward(
        &self,
        a: Var,
        b: Var,
        gy: &[T],
        out: &mut Vec<(Var, Vec<T>)>,
    ) {
        let map = broadcast_index_map(self.shape(a), self.shape(b));
        let (ad, bd) = (self.data(a), self.data(b));
        if self.requires_grad(a) {
            out.push((a, gy.iter().zip(&map).map(|(&g, &j)| g * bd[j]).collect()));
        }
        if self.requires_grad(b) {
            let mut gb = vec![T::zero(); bd.len()];
            for ((&g, &x), &j) in gy.iter().zip(ad).zip(&map) {
                gb[j] += g * x;
            }
            out.push((b, gb));
        }
    }

    /// Add a length-`C` bias along `channel_axis` (1 for NCHW, last for tokens).
    pub fn add_bias(&mut self, x: Var, bias: Var, channel_axis: usize) -> Result<Var> {
        let shape = self.shape(x).to_vec();
        let c = *shape
            .get(channel_axis)
            .ok_or_else(|| Error::Shape(format!("add_bias: axis {channel_axis} out of range")))?;
        if self.shape(bias) != [c] {
            return Err(Error::Shape(format!(
                "add_bias: bias {:?} does not match {c} channels",
                self.shape(bias)
            )));
        }
        let inner: usize = shape[channel_axis + 1..].iter().product();
        let bd = self.data(bias);
        let data = self
            .data(x)
            .iter()
            .enumerate()
            .map(|(i, &v)| v + bd[(i / inner) % c])
            .collect();
        let v = Tensor::new(shape, data)?;
        Ok(self.push(
            v,
            &[x, bias],
            Op::AddBias {
                x,
                bias,
                channel_axis,
            },
        ))
    }

    pub(super) fn add_bias_backward(
        &self,
        x: Var,
        bias: Var,
        channel_axis: usize,
        gy: &[T],
        out: &mut Vec<(Var, Vec<T>)>,
    ) {
        if self.requires_grad(x) {
            out.push((x, gy.to_vec()));
        }
        if self.requires_grad(bias) {
            let shape = self.shape(x);
            let c = shape[channel_axis];
            let inner: usize = shape[channel_axis + 1..].iter().product();
            let mut gb = vec![T::zero(); c];
            for (i, &g) in gy.iter().enumerate() {
                gb[(i / inner) % c] += g;
            }
            out.push((bias, gb));
        }
    }

    pub fn scale(&mut self, a: Var, c: T) -> Var {
        let v = self.map(a, |x| x * c);
        self.push(v, &[a], Op::Scale(a, c))
    }

    pub fn sum(&mut self, a: Var) -> Var {
        let s = self.data(a).iter().copied().sum();
        self.push(Tensor::scalar(s), &[a], Op::Sum(a))
    }

    pub fn mean(&mut self, a: Var) -> Var {
        let n = T::from_f64(self.value(a).numel() as f64);
        let s: T = self.data(a).iter().copied().sum();
        self.push(Tensor::scalar(s / n), &[a], Op::Mean(a))
    }

    pub fn gelu(&mut self, a: Var) -> Var {
        let v = self.map(a, gelu);
        self.push(v, &[a], Op::Gelu(a))
    }

    pub fn relu(&mut self, a: Var) -> Var {
        let v = self.map(a, |x| if x > T::zero() { x } else { T::zero() });
        self.push(v, &[a], Op::Relu(a))
    }

    pub fn sigmoid(&mut self, a: Var) -> Var {
        let v = self.map(a, sigmoid);
        self.push(v, &[a], Op::Sigmoid(a))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::testutil::check_gradients;

    #[test]
    fn gelu_values() {
        assert_eq!(gelu(0.0f64), 0.0);
        assert!((gelu(10.0f64) - 10.0).abs() < 1e-6);
        // Phi(1) = 0.841344746...
        assert!((gelu(1.0f64) - 0.841_344_746_068_543).abs() < 1e-12);
    }

    #[test]
    fn elementwise_gradients() {
        check_gradients(&[&[2, 3], &[2, 3]], 1e-4, |g, v| {
            let p = g.mul(v[0], v[1])?;
            let q = g.sub(p, v[0])?;
            let r = g.add(q, v[1])?;
            Ok(g.scale(r, 0.7))
        });
        check_gradients(&[&[3, 4]], 1e-4, |g, v| Ok(g.gelu(v[0])));
        check_gradients(&[&[3, 4]], 1e-4, |g, v| Ok(g.sigmoid(v[0])));
        check_gradients(&[&[3, 4]], 1e-4, |g, v| Ok(g.relu(v[0])));
        check_gradients(&[&[3, 4]], 1e-4, |g, v| Ok(g.mean(v[0])));
    }

    #[test]
    fn broadcast_gradients() {
        check_gradients(&[&[2, 3, 4, 4], &[2, 3, 1, 1]], 1e-4, |g, v| g.mul_bcast(v[0], v[1]));
        check_gradients(&[&[2, 3, 4, 4], &[2, 1, 4, 4]], 1e-4, |g, v| g.mul_bcast(v[0], v[1]));
        check_gradients(&[&[2, 3, 2, 2], &[3]], 1e-4, |g, v| g.add_bias(v[0], v[1], 1));
        check_gradients(&[&[2, 5, 3], &[3]], 1e-4, |g, v| g.add_bias(v[0], v[1], 2));
    }

    #[test]
    fn shape_mismatch_is_error() {
        let mut g = Graph::<f64>::new();
        let a = g.param(Tensor::zeros(&[2, 3]));
        let b = g.param(Tensor::zeros(&[3, 2]));
        assert!(g.add(a, b).is_err());
        let c = g.param(Tensor::zeros(&[2, 2]));
        assert!(g.mul_bcast(a, c).is_err());
    }
}

use super::conv::ConvGeom;
use super::pool::PoolKind;
use super::shape::ShiftAxis;
use super::{Element, Tensor};
use crate::error::{Error, Result};

/// Handle to a node on a [`Graph`] tape.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(pub(crate) usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

pub(super) enum Op<T> {
    Leaf,
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    /// Second operand broadcast along its size-1 axes.
    MulBcast(Var, Var),
    /// Per-channel bias `[C]` added to an NCHW tensor or to the last axis.
    AddBias { x: Var, bias: Var, channel_axis: usize },
    Scale(Var, T),
    Sum(Var),
    Mean(Var),
    Conv2d {
        x: Var,
        w: Var,
        b: Option<Var>,
        geom: ConvGeom,
    },
    Linear {
        x: Var,
        w: Var,
        b: Option<Var>,
    },
    MaxPool2 {
        x: Var,
        argmax: Vec<usize>,
    },
    Upsample2(Var),
    LayerNorm {
        x: Var,
        gamma: Var,
        beta: Var,
        xhat: Vec<T>,
        rstd: Vec<T>,
    },
    BatchNorm {
        x: Var,
        gamma: Var,
        beta: Var,
        xhat: Vec<T>,
        rstd: Vec<T>,
        training: bool,
    },
    Gelu(Var),
    Relu(Var),
    Sigmoid(Var),
    Concat {
        inputs: Vec<Var>,
        axis: usize,
    },
    AxialShift {
        x: Var,
        axis: ShiftAxis,
        offsets: Vec<isize>,
    },
    ToTokens(Var),
    FromTokens(Var),
    SpatialPool {
        x: Var,
        kind: PoolKind,
        argmax: Vec<usize>,
    },
    ChannelPool {
        x: Var,
        kind: PoolKind,
        argmax: Vec<usize>,
    },
    Bce {
        pred: Var,
        target: Vec<T>,
        eps: T,
    },
    Dice {
        pred: Var,
        target: Vec<T>,
        eps: T,
    },
    Egc {
        pred: Var,
        error_map: Vec<T>,
        count: usize,
    },
}

pub(super) struct Node<T> {
    pub(super) value: Tensor<T>,
    pub(super) grad: Option<Vec<T>>,
    pub(super) requires_grad: bool,
    pub(super) op: Op<T>,
}

/// Tape of operations. Build it forward, call [`Graph::backward`] once on a
/// scalar, then read gradients with [`Graph::grad`].
pub struct Graph<T> {
    pub(super) nodes: Vec<Node<T>>,
    backward_done: bool,
}

impl<T: Element> Default for Graph<T> {
    fn default() -> Self {
        Self::new()
    }
}

impl<T: Element> Graph<T> {
    pub fn new() -> Self {
        Self {
            nodes: Vec::new(),
            backward_done: false,
        }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// Trainable leaf.
    pub fn param(&mut self, value: Tensor<T>) -> Var {
        self.leaf(value, true)
    }

    /// Leaf that never receives a gradient.
    pub fn constant(&mut self, value: Tensor<T>) -> Var {
        self.leaf(value, false)
    }

    pub fn leaf(&mut self, value: Tensor<T>, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            grad: None,
            requires_grad,
            op: Op::Leaf,
        });
        Var(self.nodes.len() - 1)
    }

    pub fn value(&self, v: Var) -> &Tensor<T> {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    /// Gradient accumulated by the last backward pass, if `v` requires one.
    pub fn grad(&self, v: Var) -> Option<&[T]> {
        self.nodes[v.0].grad.as_deref()
    }

    /// Scalar value of a one-element node.
    pub fn item(&self, v: Var) -> T {
        self.nodes[v.0].value.data()[0]
    }

    pub(super) fn push(&mut self, value: Tensor<T>, inputs: &[Var], op: Op<T>) -> Var {
        let requires_grad = inputs.iter().any(|v| self.nodes[v.0].requires_grad);
        self.nodes.push(Node {
            value,
            grad: None,
            requires_grad,
            op,
        });
        Var(self.nodes.len() - 1)
    }

    pub(super) fn data(&self, v: Var) -> &[T] {
        self.nodes[v.0].value.data()
    }

    /// Clear gradients so the graph can be differentiated again.
    pub fn zero_grad(&mut self) {
        for node in &mut self.nodes {
            node.grad = None;
        }
        self.backward_done = false;
    }

    /// Reverse-mode sweep from a scalar `loss`.
    pub fn backward(&mut self, loss: Var) -> Result<()> {
        if self.backward_done {
            return Err(Error::State(
                "backward already ran on this graph; call zero_grad first".into(),
            ));
        }
        if self.nodes[loss.0].value.numel() != 1 {
            return Err(Error::Shape(format!(
                "backward needs a scalar loss, got shape {:?}",
                self.shape(loss)
            )));
        }
        if !self.nodes[loss.0].requires_grad {
            return Err(Error::State(
                "loss is detached: no trainable input reaches it".into(),
            ));
        }
        self.backward_done = true;
        self.nodes[loss.0].grad = Some(vec![T::one()]);

        for i in (0..=loss.0).rev() {
            if !self.nodes[i].requires_grad {
                continue;
            }
            let Some(grad) = self.nodes[i].grad.take() else {
                continue;
            };
            let contributions = self.backward_node(i, &grad);
            self.nodes[i].grad = Some(grad);
            for (target, g) in contributions {
                self.accumulate(target, g);
            }
        }
        Ok(())
    }

    fn accumulate(&mut self, v: Var, g: Vec<T>) {
        let node = &mut self.nodes[v.0];
        if !node.requires_grad {
            return;
        }
        match &mut node.grad {
            Some(existing) => {
                for (e, x) in existing.iter_mut().zip(g) {
                    *e += x;
                }
            }
            slot @ None => *slot = Some(g),
        }
    }

    fn wants(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    fn backward_node(&self, i: usize, gy: &[T]) -> Vec<(Var, Vec<T>)> {
        let mut out = Vec::new();
        let y = self.nodes[i].value.data();
        match &self.nodes[i].op {
            Op::Leaf => {}
            Op::Add(a, b) => {
                if self.wants(*a) {
                    out.push((*a, gy.to_vec()));
                }
                if self.wants(*b) {
                    out.push((*b, gy.to_vec()));
                }
            }
            Op::Sub(a, b) => {
                if self.wants(*a) {
                    out.push((*a, gy.to_vec()));
                }
                if self.wants(*b) {
                    out.push((*b, gy.iter().map(|&g| -g).collect()));
                }
            }
            Op::Mul(a, b) => {
                if self.wants(*a) {
                    let bd = self.data(*b);
                    out.push((*a, gy.iter().zip(bd).map(|(&g, &v)| g * v).collect()));
                }
                if self.wants(*b) {
                    let ad = self.data(*a);
                    out.push((*b, gy.iter().zip(ad).map(|(&g, &v)| g * v).collect()));
                }
            }
            Op::MulBcast(a, b) => self.mul_bcast_backward(*a, *b, gy, &mut out),
            Op::AddBias {
                x,
                bias,
                channel_axis,
            } => self.add_bias_backward(*x, *bias, *channel_axis, gy, &mut out),
            Op::Scale(a, c) => {
                if self.wants(*a) {
                    out.push((*a, gy.iter().map(|&g| g * *c).collect()));
                }
            }
            Op::Sum(a) => {
                if self.wants(*a) {
                    out.push((*a, vec![gy[0]; self.value(*a).numel()]));
                }
            }
            Op::Mean(a) => {
                if self.wants(*a) {
                    let n = self.value(*a).numel();
                    out.push((*a, vec![gy[0] / T::from_f64(n as f64); n]));
                }
            }
            Op::Conv2d { x, w, b, geom } => self.conv2d_backward(*x, *w, *b, geom, gy, &mut out),
            Op::Linear { x, w, b } => self.linear_backward(*x, *w, *b, gy, &mut out),
            Op::MaxPool2 { x, argmax } => {
                if self.wants(*x) {
                    let mut gx = vec![T::zero(); self.value(*x).numel()];
                    for (&src, &g) in argmax.iter().zip(gy) {
                        gx[src] += g;
                    }
                    out.push((*x, gx));
                }
            }
            Op::Upsample2(x) => self.upsample2_backward(*x, gy, &mut out),
            Op::LayerNorm {
                x,
                gamma,
                beta,
                xhat,
                rstd,
            } => self.layer_norm_backward(*x, *gamma, *beta, xhat, rstd, gy, &mut out),
            Op::BatchNorm {
                x,
                gamma,
                beta,
                xhat,
                rstd,
                training,
            } => self.batch_norm_backward(*x, *gamma, *beta, xhat, rstd, *training, gy, &mut out),
            Op::Gelu(x) => {
                if self.wants(*x) {
                    let xd = self.data(*x);
                    out.push((
                        *x,
                        gy.iter()
                            .zip(xd)
                            .map(|(&g, &v)| g * super::elementwise::gelu_grad(v))
                            .collect(),
                    ));
                }
            }
            Op::Relu(x) => {
                if self.wants(*x) {
                    let xd = self.data(*x);
                    out.push((
                        *x,
                        gy.iter()
                            .zip(xd)
                            .map(|(&g, &v)| if v > T::zero() { g } else { T::zero() })
                            .collect(),
                    ));
                }
            }
            Op::Sigmoid(x) => {
                if self.wants(*x) {
                    out.push((
                        *x,
                        gy.iter()
                            .zip(y)
                            .map(|(&g, &s)| g * s * (T::one() - s))
                            .collect(),
                    ));
                }
            }
            Op::Concat { inputs, axis } => self.concat_backward(inputs, *axis, gy, &mut out),
            Op::AxialShift { x, axis, offsets } => {
                self.axial_shift_backward(*x, *axis, offsets, gy, &mut out)
            }
            Op::ToTokens(x) => self.to_tokens_backward(*x, gy, &mut out),
            Op::FromTokens(x) => self.from_tokens_backward(*x, i, gy, &mut out),
            Op::SpatialPool { x, kind, argmax } => {
                self.spatial_pool_backward(*x, *kind, argmax, gy, &mut out)
            }
            Op::ChannelPool { x, kind, argmax } => {
                self.channel_pool_backward(*x, *kind, argmax, gy, &mut out)
            }
            Op::Bce { pred, target, eps } => self.bce_backward(*pred, target, *eps, gy, &mut out),
            Op::Dice { pred, target, eps } => {
                self.dice_backward(*pred, target, *eps, gy, &mut out)
            }
            Op::Egc {
                pred,
                error_map,
                count,
            } => self.egc_backward(*pred, error_map, *count, gy, &mut out),
        }
        out
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn sum_gives_ones() {
        let mut g = Graph::<f64>::new();
        let x = g.param(Tensor::from_fn(&[2, 3], |i| i as f64));
        let s = g.sum(x);
        g.backward(s).unwrap();
        assert_eq!(g.grad(x).unwrap(), &[1.0; 6]);
    }

    #[test]
    fn square_sum_gives_twice_input() {
        let mut g = Graph::<f64>::new();
        let x = g.param(Tensor::from_fn(&[4], |i| i as f64 - 1.5));
        let xx = g.mul(x, x).unwrap();
        let s = g.sum(xx);
        g.backward(s).unwrap();
        let want: Vec<f64> = (0..4).map(|i| 2.0 * (i as f64 - 1.5)).collect();
        assert_eq!(g.grad(x).unwrap(), want.as_slice());
    }

    #[test]
    fn fan_out_accumulates() {
        let mut g = Graph::<f64>::new();
        let x = g.param(Tensor::from_fn(&[3], |i| i as f64));
        let a = g.scale(x, 2.0);
        let b = g.scale(x, 3.0);
        let c = g.add(a, b).unwrap();
        let s = g.sum(c);
        g.backward(s).unwrap();
        assert_eq!(g.grad(x).unwrap(), &[5.0; 3]);
    }

    #[test]
    fn backward_rejects_non_scalar_and_repeat() {
        let mut g = Graph::<f64>::new();
        let x = g.param(Tensor::zeros(&[3]));
        assert!(matches!(g.backward(x), Err(Error::Shape(_))));
        let s = g.sum(x);
        g.backward(s).unwrap();
        assert!(matches!(g.backward(s), Err(Error::State(_))));
        g.zero_grad();
        assert!(g.backward(s).is_ok());
    }

    #[test]
    fn backward_rejects_detached_loss() {
        let mut g = Graph::<f64>::new();
        let x = g.constant(Tensor::zeros(&[3]));
        let s = g.sum(x);
        assert!(matches!(g.backward(s), Err(Error::State(_))));
    }
}

//! Building blocks. Each layer owns indices into the model's parameter and
//! buffer tables and adds its computation to a [`Graph`] on demand.

use rand::Rng;
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::tensor::{BatchStats, Element, Graph, PoolKind, ShiftAxis, Tensor, Var};

pub(crate) const BN_EPS: f64 = 1e-5;
pub(crate) const LN_EPS: f64 = 1e-5;
const SHIFT_OFFSETS: [isize; 5] = [-2, -1, 0, 1, 2];

/// Offsets for an axial shift over `channels` channels: five groups when
/// the channels divide evenly, otherwise the largest group count below five
/// that does, taking offsets from the front of `[-2, -1, 0, 1, 2]`.
pub fn shift_offsets(channels: usize) -> &'static [isize] {
    let groups = (1..=5).rev().find(|g| channels % g == 0).unwrap_or(1);
    &SHIFT_OFFSETS[..groups]
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub(crate) struct ParamId(pub usize);

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub(crate) struct BufferId(pub usize);

pub(crate) enum Init {
    /// Uniform in `±sqrt(6 / fan_in)`.
    Kaiming { fan_in: usize },
    Zeros,
    Ones,
}

/// Parameter and buffer tables filled while the layers are constructed.
pub(crate) struct Registry<T> {
    pub params: Vec<(String, Tensor<T>)>,
    pub buffers: Vec<(String, Tensor<T>)>,
    pub rng: ChaCha8Rng,
}

impl<T: Element> Registry<T> {
    pub fn param(&mut self, name: String, shape: &[usize], init: Init) -> ParamId {
        let t = match init {
            Init::Kaiming { fan_in } => {
                let bound = (6.0 / fan_in as f64).sqrt();
                let rng = &mut self.rng;
                Tensor::from_fn(shape, |_| T::from_f64(rng.random_range(-bound..bound)))
            }
            Init::Zeros => Tensor::zeros(shape),
            Init::Ones => Tensor::full(shape, T::one()),
        };
        self.params.push((name, t));
        ParamId(self.params.len() - 1)
    }

    pub fn buffer(&mut self, name: String, value: Tensor<T>) -> BufferId {
        self.buffers.push((name, value));
        BufferId(self.buffers.len() - 1)
    }
}

/// Per-forward state: the graph, lazily created parameter nodes and the
/// batch statistics collected from training-mode batch norms.
pub struct Ctx<'a, T: Element> {
    pub graph: &'a mut Graph<T>,
    pub(crate) params: &'a [(String, Tensor<T>)],
    pub(crate) buffers: &'a [(String, Tensor<T>)],
    pub(crate) vars: Vec<Option<Var>>,
    pub(crate) training: bool,
    pub(crate) trainable: bool,
    pub(crate) bn_stats: Vec<(BufferId, BufferId, BatchStats<T>)>,
}

impl<T: Element> Ctx<'_, T> {
    pub(crate) fn p(&mut self, id: ParamId) -> Var {
        if let Some(v) = self.vars[id.0] {
            return v;
        }
        let t = self.params[id.0].1.clone();
        let v = if self.trainable {
            self.graph.param(t)
        } else {
            self.graph.constant(t)
        };
        self.vars[id.0] = Some(v);
        v
    }
}

pub(crate) struct Conv {
    pub w: ParamId,
    pub b: Option<ParamId>,
    pub stride: usize,
    pub pad: usize,
}

impl Conv {
    pub fn new<T: Element>(
        reg: &mut Registry<T>,
        name: &str,
        cin: usize,
        cout: usize,
        k: usize,
        stride: usize,
        bias: bool,
    ) -> Self {
        let w = reg.param(format!("{name}.weight"), &[cout, cin, k, k], Init::Kaiming { fan_in: cin * k * k });
        let b = bias.then(|| reg.param(format!("{name}.bias"), &[cout], Init::Zeros));
        Self {
            w,
            b,
            stride,
            pad: k / 2,
        }
    }

    pub fn forward<T: Element>(&self, cx: &mut Ctx<'_, T>, x: Var) -> Result<Var> {
        let w = cx.p(self.w);
        let b = self.b.map(|b| cx.p(b));
        cx.graph.conv2d(x, w, b, self.stride, self.pad)
    }
}

pub(crate) struct BatchNorm {
    gamma: ParamId,
    beta: ParamId,
    mean: BufferId,
    var: BufferId,
}

impl BatchNorm {
    pub fn new<T: Element>(reg: &mut Registry<T>, name: &str, c: usize) -> Self {
        Self {
            gamma: reg.param(format!("{name}.weight"), &[c], Init::Ones),
            beta: reg.param(format!("{name}.bias"), &[c], Init::Zeros),
            mean: reg.buffer(format!("{name}.running_mean"), Tensor::zeros(&[c])),
            var: reg.buffer(format!("{name}.running_var"), Tensor::full(&[c], T::one())),
        }
    }

    pub fn forward<T: Element>(&self, cx: &mut Ctx<'_, T>, x: Var) -> Result<Var> {
        let (g, b) = (cx.p(self.gamma), cx.p(self.beta));
        let running = (
            cx.buffers[self.mean.0].1.data(),
            cx.buffers[self.var.0].1.data(),
        );
        let (y, stats) = cx.graph.batch_norm(x, g, b, Some(running), cx.training, BN_EPS)?;
        if let Some(stats) = stats {
            cx.bn_stats.push((self.mean, self.var, stats));
        }
        Ok(y)
    }
}

/// 3x3 conv (no bias) + batch norm + ReLU.
pub(crate) struct ConvBnRelu {
    conv: Conv,
    bn: BatchNorm,
}

impl ConvBnRelu {
    pub fn new<T: Element>(reg: &mut Registry<T>, name: &str, cin: usize, cout: usize) -> Self {
        Self {
            conv: Conv::new(reg, &format!("{name}.conv"), cin, cout, 3, 1, false),
            bn: BatchNorm::new(reg, &format!("{name}.bn"), cout),
        }
    }

    pub fn forward<T: Element>(&self, cx: &mut Ctx<'_, T>, x: Var) -> Result<Var> {
        let y = self.conv.forward(cx, x)?;
        let y = self.bn.forward(cx, y)?;
        Ok(cx.graph.relu(y))
    }
}

/// Two stacked [`ConvBnRelu`] layers.
pub(crate) struct ConvBlock {
    a: ConvBnRelu,
    b: ConvBnRelu,
}

impl ConvBlock {
    pub fn new<T: Element>(reg: &mut Registry<T>, name: &str, cin: usize, cout: usize) -> Self {
        Self {
            a: ConvBnRelu::new(reg, &format!("{name}.0"), cin, cout),
            b: ConvBnRelu::new(reg, &format!("{name}.1"), cout, cout),
        }
    }

    pub fn forward<T: Element>(&self, cx: &mut Ctx<'_, T>, x: Var) -> Result<Var> {
        let y = self.a.forward(cx, x)?;
        self.b.forward(cx, y)
    }
}

/// Channel attention followed by spatial attention.
pub struct Cbam {
    fc1: Conv,
    fc2: Conv,
    spatial: Conv,
}

impl Cbam {
    pub(crate) fn new<T: Element>(
        reg: &mut Registry<T>,
        name: &str,
        c: usize,
        reduction: usize,
        spatial_kernel: usize,
    ) -> Result<Self> {
        if reduction == 0 || c < reduction {
            return Err(Error::Config(format!(
                "attention over {c} channels needs reduction in [1, {c}], got {reduction}"
            )));
        }
        if spatial_kernel % 2 == 0 {
            return Err(Error::Config(format!("spatial kernel must be odd, got {spatial_kernel}")));
        }
        let hidden = c / reduction;
        Ok(Self {
            fc1: Conv::new(reg, &format!("{name}.channel.fc1"), c, hidden, 1, 1, true),
            fc2: Conv::new(reg, &format!("{name}.channel.fc2"), hidden, c, 1, 1, true),
            spatial: Conv::new(reg, &format!("{name}.spatial"), 2, 1, spatial_kernel, 1, true),
        })
    }

    fn mlp<T: Element>(&self, cx: &mut Ctx<'_, T>, x: Var) -> Result<Var> {
        let h = self.fc1.forward(cx, x)?;
        let h = cx.graph.relu(h);
        self.fc2.forward(cx, h)
    }

    pub(crate) fn forward<T: Element>(&self, cx: &mut Ctx<'_, T>, x: Var) -> Result<Var> {
        let avg = cx.graph.spatial_pool(x, PoolKind::Mean)?;
        let max = cx.graph.spatial_pool(x, PoolKind::Max)?;
        let a = self.mlp(cx, avg)?;
        let m = self.mlp(cx, max)?;
        let s = cx.graph.add(a, m)?;
        let att = cx.graph.sigmoid(s);
        let x = cx.graph.mul_bcast(x, att)?;

        let avg = cx.graph.channel_pool(x, PoolKind::Mean)?;
        let max = cx.graph.channel_pool(x, PoolKind::Max)?;
        let both = cx.graph.concat(&[avg, max], 1)?;
        let s = self.spatial.forward(cx, both)?;
        let att = cx.graph.sigmoid(s);
        cx.graph.mul_bcast(x, att)
    }
}

/// Shifted tokenized MLP over an `[N, E, H, W]` feature map.
///
/// Pass 1 shifts along width, tokenizes (3x3 conv), applies a token-wise
/// linear layer, a depthwise 3x3 conv and GELU. Pass 2 shifts that result
/// along height, tokenizes, applies GELU and a second linear layer, adds
/// the pass-1 tokens, then layer norm and GELU.
pub struct TokenizedMlpBlock {
    pub(crate) embed: usize,
    pub(crate) hidden: usize,
    tok1: Conv,
    fc1_w: ParamId,
    fc1_b: ParamId,
    dw_w: ParamId,
    dw_b: ParamId,
    tok2: Conv,
    fc2_w: ParamId,
    fc2_b: ParamId,
    ln_g: ParamId,
    ln_b: ParamId,
}

impl TokenizedMlpBlock {
    pub(crate) fn new<T: Element>(reg: &mut Registry<T>, name: &str, embed: usize, ratio: usize) -> Self {
        let hidden = embed * ratio.max(1);
        Self {
            embed,
            hidden,
            tok1: Conv::new(reg, &format!("{name}.tokenize_w"), embed, embed, 3, 1, false),
            fc1_w: reg.param(format!("{name}.fc1.weight"), &[hidden, embed], Init::Kaiming { fan_in: embed }),
            fc1_b: reg.param(format!("{name}.fc1.bias"), &[hidden], Init::Zeros),
            dw_w: reg.param(format!("{name}.dwconv.weight"), &[hidden, 1, 3, 3], Init::Kaiming { fan_in: 9 }),
            dw_b: reg.param(format!("{name}.dwconv.bias"), &[hidden], Init::Zeros),
            tok2: Conv::new(reg, &format!("{name}.tokenize_h"), hidden, embed, 3, 1, false),
            fc2_w: reg.param(format!("{name}.fc2.weight"), &[embed, embed], Init::Kaiming { fan_in: embed }),
            fc2_b: reg.param(format!("{name}.fc2.bias"), &[embed], Init::Zeros),
            ln_g: reg.param(format!("{name}.norm.weight"), &[embed], Init::Ones),
            ln_b: reg.param(format!("{name}.norm.bias"), &[embed], Init::Zeros),
        }
    }

    pub(crate) fn forward<T: Element>(&self, cx: &mut Ctx<'_, T>, x: Var) -> Result<Var> {
        let shape = cx.graph.shape(x).to_vec();
        if shape.len() != 4 || shape[1] != self.embed {
            return Err(Error::Shape(format!(
                "tokenized block expects [N, {}, H, W], got {shape:?}",
                self.embed
            )));
        }
        let (h, w) = (shape[2], shape[3]);

        let s = cx.graph.axial_shift(x, ShiftAxis::Width, shift_offsets(self.embed))?;
        let t = self.tok1.forward(cx, s)?;
        let tokens = cx.graph.to_tokens(t)?;
        let (w1, b1) = (cx.p(self.fc1_w), cx.p(self.fc1_b));
        let a = cx.graph.linear(tokens, w1, Some(b1))?;
        let a = cx.graph.from_tokens(a, h, w)?;
        let (dw, db) = (cx.p(self.dw_w), cx.p(self.dw_b));
        let y = cx.graph.depthwise_conv2d(a, dw, Some(db), 1, 1)?;
        let y = cx.graph.gelu(y);

        let s = cx.graph.axial_shift(y, ShiftAxis::Height, shift_offsets(self.hidden))?;
        let u = self.tok2.forward(cx, s)?;
        let u = cx.graph.to_tokens(u)?;
        let u = cx.graph.gelu(u);
        let (w2, b2) = (cx.p(self.fc2_w), cx.p(self.fc2_b));
        let v = cx.graph.linear(u, w2, Some(b2))?;
        let z = cx.graph.add(tokens, v)?;
        let (lg, lb) = (cx.p(self.ln_g), cx.p(self.ln_b));
        let z = cx.graph.layer_norm(z, lg, lb, LN_EPS)?;
        let z = cx.graph.gelu(z);
        cx.graph.from_tokens(z, h, w)
    }
}

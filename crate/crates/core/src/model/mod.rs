//! The segmentation network: a five-stage encoder (three convolutional
//! stages, two tokenized-MLP stages) and a mirrored five-stage decoder with
//! skip connections, producing a per-pixel probability of "virtual image".

mod layers;

pub use layers::{shift_offsets, Cbam, Ctx, TokenizedMlpBlock};

use std::path::{Path, PathBuf};

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::imageio::{load_checkpoint, read_file, save_checkpoint, write_file};
use crate::tensor::{Element, Graph, Tensor, Var};
use layers::{BufferId, Conv, ConvBlock, ConvBnRelu, Registry};

/// Spatial dimensions must be multiples of this.
pub const DOWNSAMPLE: usize = 32;
/// Weight of the current batch in running batch-norm statistics.
pub const BN_MOMENTUM: f64 = 0.1;

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default)]
pub struct ModelConfig {
    pub stage_channels: [usize; 5],
    pub cbam_reduction: usize,
    pub cbam_spatial_kernel: usize,
    /// Hidden width of the token MLP as a multiple of the embedding width.
    pub token_mlp_ratio: usize,
    pub input_channels: usize,
    pub seed: u64,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            stage_channels: [16, 32, 64, 100, 150],
            cbam_reduction: 8,
            cbam_spatial_kernel: 7,
            token_mlp_ratio: 1,
            input_channels: 2,
            seed: 0,
        }
    }
}

impl ModelConfig {
    /// Small configuration for tests and desk-scale training.
    pub fn tiny() -> Self {
        Self {
            stage_channels: [4, 8, 16, 16, 32],
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.stage_channels.contains(&0) || self.input_channels == 0 || self.token_mlp_ratio == 0 {
            return Err(Error::Config(format!(
                "channel counts and MLP ratio must be positive: {:?}, input {}, ratio {}",
                self.stage_channels, self.input_channels, self.token_mlp_ratio
            )));
        }
        Ok(())
    }
}

pub struct Marvis<T: Element> {
    config: ModelConfig,
    params: Vec<(String, Tensor<T>)>,
    buffers: Vec<(String, Tensor<T>)>,
    enc1: ConvBlock,
    enc2: ConvBlock,
    enc2_att: Cbam,
    enc3: ConvBlock,
    enc3_att: Cbam,
    enc4_embed: Conv,
    enc4: TokenizedMlpBlock,
    enc4_att: Cbam,
    enc5_embed: Conv,
    enc5: TokenizedMlpBlock,
    dec1_fuse: ConvBnRelu,
    dec1: TokenizedMlpBlock,
    dec2_fuse: ConvBnRelu,
    dec2: TokenizedMlpBlock,
    dec3: ConvBlock,
    dec4: ConvBlock,
    dec5: ConvBlock,
    head: Conv,
}

/// Handles produced by one forward pass.
pub struct Forward<T: Element> {
    /// `[N, 1, H, W]` probabilities.
    pub output: Var,
    vars: Vec<Option<Var>>,
    bn_stats: Vec<(BufferId, BufferId, crate::tensor::BatchStats<T>)>,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Mode {
    /// Batch statistics in batch norm; parameters receive gradients.
    Train,
    /// Running statistics; parameters are constants.
    Eval,
}

impl<T: Element> Marvis<T> {
    pub fn new(config: ModelConfig) -> Result<Self> {
        config.validate()?;
        let [c1, c2, c3, c4, c5] = config.stage_channels;
        let (r, k, ratio) = (config.cbam_reduction, config.cbam_spatial_kernel, config.token_mlp_ratio);
        let mut registry = Registry {
            params: Vec::new(),
            buffers: Vec::new(),
            rng: ChaCha8Rng::seed_from_u64(config.seed),
        };
        let reg = &mut registry;
        let enc1 = ConvBlock::new(reg, "enc1.block", config.input_channels, c1);
        let enc2 = ConvBlock::new(reg, "enc2.block", c1, c2);
        let enc2_att = Cbam::new(reg, "enc2.cbam", c2, r, k)?;
        let enc3 = ConvBlock::new(reg, "enc3.block", c2, c3);
        let enc3_att = Cbam::new(reg, "enc3.cbam", c3, r, k)?;
        let enc4_embed = Conv::new(reg, "enc4.embed", c3, c4, 3, 2, true);
        let enc4 = TokenizedMlpBlock::new(reg, "enc4.mlp", c4, ratio);
        let enc4_att = Cbam::new(reg, "enc4.cbam", c4, r, k)?;
        let enc5_embed = Conv::new(reg, "enc5.embed", c4, c5, 3, 2, true);
        let enc5 = TokenizedMlpBlock::new(reg, "enc5.mlp", c5, ratio);
        let dec1_fuse = ConvBnRelu::new(reg, "dec1.fuse", c5 + c4, c4);
        let dec1 = TokenizedMlpBlock::new(reg, "dec1.mlp", c4, ratio);
        let dec2_fuse = ConvBnRelu::new(reg, "dec2.fuse", c4 + c3, c3);
        let dec2 = TokenizedMlpBlock::new(reg, "dec2.mlp", c3, ratio);
        let dec3 = ConvBlock::new(reg, "dec3.block", c3 + c2, c2);
        let dec4 = ConvBlock::new(reg, "dec4.block", c2 + c1, c1);
        let dec5 = ConvBlock::new(reg, "dec5.block", c1 + config.input_channels, c1);
        let head = Conv::new(reg, "head", c1, 1, 1, 1, true);
        let Registry { params, buffers, .. } = registry;
        Ok(Self {
            config,
            params,
            buffers,
            enc1,
            enc2,
            enc2_att,
            enc3,
            enc3_att,
            enc4_embed,
            enc4,
            enc4_att,
            enc5_embed,
            enc5,
            dec1_fuse,
            dec1,
            dec2_fuse,
            dec2,
            dec3,
            dec4,
            dec5,
            head,
        })
    }

    pub fn config(&self) -> &ModelConfig {
        &self.config
    }

    /// Trainable tensors in registration order.
    pub fn params(&self) -> &[(String, Tensor<T>)] {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut [(String, Tensor<T>)] {
        &mut self.params
    }

    /// Batch-norm running statistics.
    pub fn buffers(&self) -> &[(String, Tensor<T>)] {
        &self.buffers
    }

    pub fn num_parameters(&self) -> usize {
        self.params.iter().map(|(_, t)| t.numel()).sum()
    }

    /// Add the network to `graph`. `input` is `[N, input_channels, H, W]`
    /// with `H` and `W` multiples of 32.
    pub fn forward(&self, graph: &mut Graph<T>, input: Var, mode: Mode) -> Result<Forward<T>> {
        let shape = graph.shape(input).to_vec();
        match shape[..] {
            [_, c, h, w] if c == self.config.input_channels => {
                if h == 0 || w == 0 || h % DOWNSAMPLE != 0 || w % DOWNSAMPLE != 0 {
                    return Err(Error::Shape(format!(
                        "input {h}x{w} must be a nonzero multiple of {DOWNSAMPLE} in each dimension"
                    )));
                }
            }
            _ => {
                return Err(Error::Shape(format!(
                    "model input must be [N, {}, H, W], got {shape:?}",
                    self.config.input_channels
                )))
            }
        }
        let mut cx = Ctx {
            graph,
            params: &self.params,
            buffers: &self.buffers,
            vars: vec![None; self.params.len()],
            training: mode == Mode::Train,
            trainable: mode == Mode::Train,
            bn_stats: Vec::new(),
        };
        let cx = &mut cx;

        let e1 = self.enc1.forward(cx, input)?;
        let e1 = cx.graph.maxpool2(e1)?;
        let e2 = self.enc2.forward(cx, e1)?;
        let e2 = self.enc2_att.forward(cx, e2)?;
        let e2 = cx.graph.maxpool2(e2)?;
        let e3 = self.enc3.forward(cx, e2)?;
        let e3 = self.enc3_att.forward(cx, e3)?;
        let e3 = cx.graph.maxpool2(e3)?;
        let e4 = self.enc4_embed.forward(cx, e3)?;
        let e4 = self.enc4.forward(cx, e4)?;
        let e4 = self.enc4_att.forward(cx, e4)?;
        let e5 = self.enc5_embed.forward(cx, e4)?;
        let e5 = self.enc5.forward(cx, e5)?;

        let up = |cx: &mut Ctx<'_, T>, x: Var, skip: Var| -> Result<Var> {
            let u = cx.graph.upsample2(x)?;
            cx.graph.concat(&[u, skip], 1)
        };
        let d = up(cx, e5, e4)?;
        let d = self.dec1_fuse.forward(cx, d)?;
        let d = self.dec1.forward(cx, d)?;
        let d = up(cx, d, e3)?;
        let d = self.dec2_fuse.forward(cx, d)?;
        let d = self.dec2.forward(cx, d)?;
        let d = up(cx, d, e2)?;
        let d = self.dec3.forward(cx, d)?;
        let d = up(cx, d, e1)?;
        let d = self.dec4.forward(cx, d)?;
        let d = up(cx, d, input)?;
        let d = self.dec5.forward(cx, d)?;
        let logits = self.head.forward(cx, d)?;
        let output = cx.graph.sigmoid(logits);
        Ok(Forward {
            output,
            vars: std::mem::take(&mut cx.vars),
            bn_stats: std::mem::take(&mut cx.bn_stats),
        })
    }

    /// Gradient of every parameter after `graph.backward`, zeros where a
    /// parameter did not take part.
    pub fn gradients(&self, graph: &Graph<T>, fwd: &Forward<T>) -> Vec<Vec<T>> {
        self.params
            .iter()
            .zip(&fwd.vars)
            .map(|((_, t), v)| {
                v.and_then(|v| graph.grad(v).map(<[T]>::to_vec))
                    .unwrap_or_else(|| vec![T::zero(); t.numel()])
            })
            .collect()
    }

    /// Fold the batch statistics of a training forward pass into the
    /// running estimates.
    pub fn update_running_stats(&mut self, fwd: &Forward<T>) {
        let m = T::from_f64(BN_MOMENTUM);
        let keep = T::one() - m;
        for (mean_id, var_id, stats) in &fwd.bn_stats {
            for (r, &b) in self.buffers[mean_id.0].1.data_mut().iter_mut().zip(&stats.mean) {
                *r = keep * *r + m * b;
            }
            for (r, &b) in self.buffers[var_id.0].1.data_mut().iter_mut().zip(&stats.var) {
                *r = keep * *r + m * b;
            }
        }
    }

    /// Inference with running statistics: `[N, C, H, W]` to `[N, 1, H, W]`.
    pub fn predict(&self, input: Tensor<T>) -> Result<Tensor<T>> {
        let mut g = Graph::new();
        let x = g.constant(input);
        let fwd = self.forward(&mut g, x, Mode::Eval)?;
        Ok(g.value(fwd.output).clone())
    }

    pub fn cast<U: Element>(&self) -> Result<Marvis<U>> {
        let mut out = Marvis::<U>::new(self.config.clone())?;
        for (dst, (_, src)) in out.params.iter_mut().zip(&self.params) {
            dst.1 = src.cast();
        }
        for (dst, (_, src)) in out.buffers.iter_mut().zip(&self.buffers) {
            dst.1 = src.cast();
        }
        Ok(out)
    }

    /// Parameters then buffers, as stored in a checkpoint.
    pub fn named_tensors(&self) -> Vec<(String, Tensor<f32>)> {
        self.params
            .iter()
            .chain(&self.buffers)
            .map(|(n, t)| (n.clone(), t.cast()))
            .collect()
    }

    /// Replace every parameter and buffer from checkpoint entries; the
    /// names and shapes must match this configuration exactly.
    pub fn load_named_tensors(&mut self, entries: Vec<(String, Tensor<f32>)>) -> Result<()> {
        let expected = self.params.len() + self.buffers.len();
        if entries.len() != expected {
            return Err(Error::Validation(format!(
                "checkpoint holds {} tensors, model expects {expected}",
                entries.len()
            )));
        }
        let mut by_name: std::collections::HashMap<String, Tensor<f32>> = entries.into_iter().collect();
        for (name, dst) in self.params.iter_mut().chain(self.buffers.iter_mut()) {
            let src = by_name
                .remove(name.as_str())
                .ok_or_else(|| Error::Validation(format!("checkpoint lacks tensor {name:?}")))?;
            if src.shape() != dst.shape() {
                return Err(Error::Shape(format!(
                    "tensor {name:?}: checkpoint shape {:?}, model shape {:?}",
                    src.shape(),
                    dst.shape()
                )));
            }
            *dst = src.cast();
        }
        Ok(())
    }

    /// Write `path` (MRVS) and the configuration next to it as JSON.
    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        save_checkpoint(&self.named_tensors(), path)?;
        let mut text = serde_json::to_string_pretty(&self.config)?;
        text.push('\n');
        write_file(&config_sidecar(path), text.as_bytes())
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let config: ModelConfig = serde_json::from_slice(&read_file(&config_sidecar(path))?)?;
        let mut model = Self::new(config)?;
        model.load_named_tensors(load_checkpoint(path)?)?;
        Ok(model)
    }
}

/// `best.mrvs` keeps its configuration in `best.json`.
pub fn config_sidecar(checkpoint: &Path) -> PathBuf {
    checkpoint.with_extension("json")
}

/// Number of trainable scalars in a model built from `cfg`.
pub fn count_parameters(cfg: &ModelConfig) -> Result<usize> {
    Ok(Marvis::<f32>::new(cfg.clone())?.num_parameters())
}

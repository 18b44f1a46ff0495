//! Four-stage pyramid transformer over the concatenated image and noisy mask.
//!
//! Each stage: overlapping patch embedding, a learned time token prepended to the patch
//! sequence, `blocks_per_stage` pre-norm transformer blocks with spatial-reduction attention,
//! then the time token is dropped and the patch tokens are folded back into a feature map.

use candle_core::{Tensor, D};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::nn::{self, Conv2d, ConvOpts, LayerNorm, Linear, Scope};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BackboneConfig {
    pub channels: [usize; 4],
    pub blocks_per_stage: usize,
    pub heads: [usize; 4],
    /// Key/value spatial reduction per stage.
    pub sr_ratios: [usize; 4],
    pub mlp_ratio: usize,
    /// When false no time token is prepended and the pyramid does not depend on `t`.
    pub time_token: bool,
}

impl Default for BackboneConfig {
    fn default() -> Self {
        Self {
            channels: [32, 64, 128, 256],
            blocks_per_stage: 2,
            heads: [1, 2, 4, 8],
            sr_ratios: [4, 2, 1, 1],
            mlp_ratio: 4,
            time_token: true,
        }
    }
}

/// Features at strides 4, 8, 16 and 32.
#[derive(Debug, Clone)]
pub struct FeaturePyramid {
    pub levels: [Tensor; 4],
}

impl FeaturePyramid {
    pub fn level(&self, i: usize) -> &Tensor {
        &self.levels[i]
    }
}

/// Sinusoidal timestep code followed by a learned two-layer projection.
#[derive(Debug, Clone)]
pub struct TimeEmbedding {
    dim: usize,
    lin1: Linear,
    lin2: Linear,
}

impl TimeEmbedding {
    pub fn new(scope: &Scope, dim: usize, out_dim: usize) -> Result<Self> {
        if !dim.is_multiple_of(2) {
            return Err(Error::invalid(format!("time embedding dim must be even, got {dim}")));
        }
        Ok(Self {
            dim,
            lin1: Linear::new(&scope.pp("lin1"), dim, out_dim)?,
            lin2: Linear::new(&scope.pp("lin2"), out_dim, out_dim)?,
        })
    }

    /// `(batch, out_dim)` embeddings of the given timesteps.
    pub fn forward(&self, ts: &[usize], like: &Tensor) -> Result<Tensor> {
        let code = nn::sinusoidal_batch(ts, self.dim, like.dtype(), like.device())?;
        let h = nn::silu(&self.lin1.forward(&code)?)?;
        self.lin2.forward(&h)
    }
}

/// Numerically stable softmax over the last dimension, built from differentiable primitives.
pub(crate) fn softmax_last(x: &Tensor) -> Result<Tensor> {
    let m = x.max_keepdim(D::Minus1)?.detach();
    let e = x.broadcast_sub(&m)?.exp()?;
    let s = e.sum_keepdim(D::Minus1)?;
    Ok(e.broadcast_div(&s)?)
}

#[derive(Debug, Clone)]
struct Attention {
    heads: usize,
    q: Linear,
    kv: Linear,
    proj: Linear,
    sr: Option<(Conv2d, LayerNorm)>,
}

impl Attention {
    fn new(scope: &Scope, dim: usize, heads: usize, sr_ratio: usize) -> Result<Self> {
        if !dim.is_multiple_of(heads) {
            return Err(Error::invalid(format!("dim {dim} not divisible by {heads} heads")));
        }
        let sr = if sr_ratio > 1 {
            let conv = Conv2d::new(
                &scope.pp("sr"),
                dim,
                dim,
                (sr_ratio, sr_ratio),
                ConvOpts {
                    stride: sr_ratio,
                    padding: Some((0, 0)),
                    ..Default::default()
                },
            )?;
            Some((conv, LayerNorm::new(&scope.pp("sr_norm"), dim)?))
        } else {
            None
        };
        Ok(Self {
            heads,
            q: Linear::new(&scope.pp("q"), dim, dim)?,
            kv: Linear::new(&scope.pp("kv"), dim, 2 * dim)?,
            proj: Linear::new(&scope.pp("proj"), dim, dim)?,
            sr,
        })
    }

    /// `x` is `(b, extra + h*w, c)` where the first `extra` tokens are not spatial.
    fn forward(&self, x: &Tensor, extra: usize, h: usize, w: usize) -> Result<Tensor> {
        let (b, n, c) = x.dims3()?;
        let hd = c / self.heads;
        let kv_src = match &self.sr {
            Some((conv, norm)) => {
                let patches = x.narrow(1, extra, h * w)?;
                let map = patches.transpose(1, 2)?.reshape((b, c, h, w))?;
                let red = conv.forward(&map)?.flatten_from(2)?.transpose(1, 2)?;
                let red = norm.forward(&red)?;
                if extra > 0 {
                    Tensor::cat(&[&x.narrow(1, 0, extra)?, &red], 1)?
                } else {
                    red
                }
            }
            None => x.clone(),
        };
        let m = kv_src.dim(1)?;
        let q = self
            .q
            .forward(x)?
            .reshape((b, n, self.heads, hd))?
            .transpose(1, 2)?
            .contiguous()?;
        let kv = self.kv.forward(&kv_src)?.reshape((b, m, 2, self.heads, hd))?;
        let k = kv.narrow(2, 0, 1)?.squeeze(2)?.transpose(1, 2)?.contiguous()?;
        let v = kv.narrow(2, 1, 1)?.squeeze(2)?.transpose(1, 2)?.contiguous()?;
        let att = (q.matmul(&k.t()?)? * (1.0 / (hd as f64).sqrt()))?;
        let att = softmax_last(&att)?;
        let out = att.matmul(&v)?.transpose(1, 2)?.reshape((b, n, c))?;
        self.proj.forward(&out)
    }
}

#[derive(Debug, Clone)]
struct Block {
    norm1: LayerNorm,
    attn: Attention,
    norm2: LayerNorm,
    fc1: Linear,
    fc2: Linear,
}

impl Block {
    fn new(scope: &Scope, dim: usize, heads: usize, sr: usize, mlp_ratio: usize) -> Result<Self> {
        Ok(Self {
            norm1: LayerNorm::new(&scope.pp("norm1"), dim)?,
            attn: Attention::new(&scope.pp("attn"), dim, heads, sr)?,
            norm2: LayerNorm::new(&scope.pp("norm2"), dim)?,
            fc1: Linear::new(&scope.pp("fc1"), dim, dim * mlp_ratio)?,
            fc2: Linear::new(&scope.pp("fc2"), dim * mlp_ratio, dim)?,
        })
    }

    fn forward(&self, x: &Tensor, extra: usize, h: usize, w: usize) -> Result<Tensor> {
        let x = (x + self.attn.forward(&self.norm1.forward(x)?, extra, h, w)?)?;
        let y = self.fc2.forward(&self.fc1.forward(&self.norm2.forward(&x)?)?.gelu()?)?;
        Ok((x + y)?)
    }
}

#[derive(Debug, Clone)]
struct Stage {
    patch: Conv2d,
    patch_norm: LayerNorm,
    time: Option<TimeEmbedding>,
    blocks: Vec<Block>,
    norm: LayerNorm,
}

impl Stage {
    fn forward(&self, x: &Tensor, ts: &[usize]) -> Result<Tensor> {
        let map = self.patch.forward(x)?;
        let (b, c, h, w) = map.dims4()?;
        let mut tokens = self.patch_norm.forward(&map.flatten_from(2)?.transpose(1, 2)?)?;
        let extra = match &self.time {
            Some(te) => {
                let tok = te.forward(ts, x)?.unsqueeze(1)?;
                tokens = Tensor::cat(&[&tok, &tokens], 1)?;
                1
            }
            None => 0,
        };
        for blk in &self.blocks {
            tokens = blk.forward(&tokens, extra, h, w)?;
        }
        let tokens = self.norm.forward(&tokens)?.narrow(1, extra, h * w)?;
        Ok(tokens.transpose(1, 2)?.reshape((b, c, h, w))?)
    }
}

#[derive(Debug, Clone)]
pub struct Backbone {
    cfg: BackboneConfig,
    in_channels: usize,
    stages: Vec<Stage>,
}

impl Backbone {
    /// `in_channels` is 4 for an RGB image concatenated with a one-channel mask.
    pub fn new(scope: &Scope, in_channels: usize, cfg: &BackboneConfig) -> Result<Self> {
        if cfg.blocks_per_stage == 0 {
            return Err(Error::invalid("blocks_per_stage must be positive"));
        }
        let mut stages = Vec::with_capacity(4);
        let mut prev = in_channels;
        for i in 0..4 {
            let s = scope.pp(format!("stage{}", i + 1));
            let dim = cfg.channels[i];
            let (k, stride) = if i == 0 { (7, 4) } else { (3, 2) };
            let patch = Conv2d::new(
                &s.pp("patch"),
                prev,
                dim,
                (k, k),
                ConvOpts {
                    stride,
                    padding: Some((k / 2, k / 2)),
                    ..Default::default()
                },
            )?;
            let time = if cfg.time_token {
                Some(TimeEmbedding::new(&s.pp("time"), dim, dim)?)
            } else {
                None
            };
            let blocks = (0..cfg.blocks_per_stage)
                .map(|j| {
                    Block::new(
                        &s.pp(format!("block{j}")),
                        dim,
                        cfg.heads[i],
                        cfg.sr_ratios[i],
                        cfg.mlp_ratio,
                    )
                })
                .collect::<Result<Vec<_>>>()?;
            stages.push(Stage {
                patch,
                patch_norm: LayerNorm::new(&s.pp("patch_norm"), dim)?,
                time,
                blocks,
                norm: LayerNorm::new(&s.pp("norm"), dim)?,
            });
            prev = dim;
        }
        Ok(Self {
            cfg: cfg.clone(),
            in_channels,
            stages,
        })
    }

    pub fn config(&self) -> &BackboneConfig {
        &self.cfg
    }

    /// Runs the pyramid on `image` (`b x 3 x h x w`) and `x_t` (`b x 1 x h' x w'`). The mask is
    /// resized to the image resolution when the sizes differ.
    pub fn forward(&self, image: &Tensor, x_t: &Tensor, ts: &[usize]) -> Result<FeaturePyramid> {
        let (b, _, h, w) = image.dims4()?;
        let (bm, _, hm, wm) = x_t.dims4()?;
        if b != bm || ts.len() != b {
            return Err(Error::shape(format!(
                "batch sizes differ: image {b}, mask {bm}, timesteps {}",
                ts.len()
            )));
        }
        if h % 32 != 0 || w % 32 != 0 || h == 0 || w == 0 {
            return Err(Error::shape(format!(
                "spatial size {h}x{w} must be a positive multiple of 32"
            )));
        }
        let x_t = if (hm, wm) != (h, w) {
            nn::resize_bilinear(x_t, h, w)?
        } else {
            x_t.clone()
        };
        let mut x = Tensor::cat(&[image, &x_t], 1)?;
        if x.dim(1)? != self.in_channels {
            return Err(Error::shape(format!(
                "expected {} input channels, got {}",
                self.in_channels,
                x.dim(1)?
            )));
        }
        ensure_finite(&x, "backbone input")?;
        let mut levels = Vec::with_capacity(4);
        for stage in &self.stages {
            x = stage.forward(&x, ts)?;
            levels.push(x.clone());
        }
        let levels: [Tensor; 4] = levels.try_into().expect("four stages");
        Ok(FeaturePyramid { levels })
    }
}

pub(crate) fn ensure_finite(x: &Tensor, what: &str) -> Result<()> {
    // NaN and inf both survive a sum, unlike a max reduction.
    let s = x
        .to_dtype(candle_core::DType::F64)?
        .sum_all()?
        .to_scalar::<f64>()?;
    if !s.is_finite() {
        return Err(Error::NonFinite(what.to_string()));
    }
    Ok(())
}

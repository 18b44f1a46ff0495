//! U-shaped denoiser over the noisy mask with a mask decoder and an edge decoder.
//!
//! The encoder sees only `x_t` (optionally the image too). The mask decoder fuses the semantic
//! condition at every stride; the edge decoder fuses the edge condition at stride 4. Every
//! convolution block applies adaptive group normalization:
//! `h <- GN(h) * (1 + scale(t)) + shift(t)`.

use candle_core::Tensor;
use serde::{Deserialize, Serialize};

use crate::conditions::ConditionSet;
use crate::error::{Error, Result};
use crate::nn::{self, Conv2d, ConvOpts, Linear, Scope};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DenoiserConfig {
    /// Encoder widths at strides 4, 8, 16, 32; mirrored by both decoders.
    pub channels: [usize; 4],
    /// Width of the full-resolution stem.
    pub stem: usize,
    pub groups: usize,
    pub time_dim: usize,
    /// Always `"concat"`: conditions are concatenated then mixed by a 1x1 block.
    pub fusion: String,
    /// Concatenate the image to the encoder input.
    pub image_input: bool,
}

impl Default for DenoiserConfig {
    fn default() -> Self {
        Self {
            channels: [32, 64, 128, 256],
            stem: 16,
            groups: 8,
            time_dim: 128,
            fusion: "concat".into(),
            image_input: false,
        }
    }
}

#[derive(Debug, Clone)]
pub struct DenoiseOutput {
    pub mask_logits: Tensor,
    pub edge_logits: Tensor,
}

/// Convolution + adaptive group normalization + SiLU.
#[derive(Debug, Clone)]
pub struct AdaGnBlock {
    conv: Conv2d,
    emb: Linear,
    groups: usize,
    out_c: usize,
}

impl AdaGnBlock {
    pub fn new(
        scope: &Scope,
        in_c: usize,
        out_c: usize,
        k: usize,
        groups: usize,
        time_dim: usize,
    ) -> Result<Self> {
        let groups = groups.min(out_c);
        if !out_c.is_multiple_of(groups) {
            return Err(Error::invalid(format!(
                "{out_c} channels not divisible into {groups} groups"
            )));
        }
        Ok(Self {
            conv: Conv2d::square(&scope.pp("conv"), in_c, out_c, k)?,
            emb: Linear::new(&scope.pp("emb"), time_dim, 2 * out_c)?,
            groups,
            out_c,
        })
    }

    /// Per-example `(scale, shift)`, each `b x c x 1 x 1`.
    pub fn modulation(&self, temb: &Tensor) -> Result<(Tensor, Tensor)> {
        let b = temb.dim(0)?;
        let ss = self.emb.forward(&nn::silu(temb)?)?;
        let scale = ss.narrow(1, 0, self.out_c)?.reshape((b, self.out_c, 1, 1))?;
        let shift = ss.narrow(1, self.out_c, self.out_c)?.reshape((b, self.out_c, 1, 1))?;
        Ok((scale, shift))
    }

    pub fn forward(&self, x: &Tensor, temb: &Tensor) -> Result<Tensor> {
        let h = nn::group_norm(&self.conv.forward(x)?, self.groups, 1e-5)?;
        let (scale, shift) = self.modulation(temb)?;
        let h = h.broadcast_mul(&(scale + 1.0)?)?.broadcast_add(&shift)?;
        nn::silu(&h)
    }
}

#[derive(Debug, Clone)]
struct Level {
    fuse: AdaGnBlock,
    refine: AdaGnBlock,
}

impl Level {
    fn new(scope: &Scope, in_c: usize, out_c: usize, cfg: &DenoiserConfig) -> Result<Self> {
        Ok(Self {
            fuse: AdaGnBlock::new(&scope.pp("fuse"), in_c, out_c, 1, cfg.groups, cfg.time_dim)?,
            refine: AdaGnBlock::new(&scope.pp("refine"), out_c, out_c, 3, cfg.groups, cfg.time_dim)?,
        })
    }

    fn forward(&self, parts: &[&Tensor], temb: &Tensor) -> Result<Tensor> {
        let x = if parts.len() == 1 {
            parts[0].clone()
        } else {
            Tensor::cat(parts, 1)?
        };
        let h = self.fuse.forward(&x, temb)?;
        self.refine.forward(&h, temb)
    }
}

#[derive(Debug, Clone)]
struct Encoder {
    stem: AdaGnBlock,
    downs: Vec<Conv2d>,
    blocks: Vec<AdaGnBlock>,
}

struct Features {
    full: Tensor,
    levels: [Tensor; 4],
}

impl Encoder {
    fn new(scope: &Scope, in_c: usize, cfg: &DenoiserConfig) -> Result<Self> {
        let stem = AdaGnBlock::new(&scope.pp("stem"), in_c, cfg.stem, 3, cfg.groups, cfg.time_dim)?;
        let mut downs = Vec::new();
        let mut blocks = Vec::new();
        let mut prev = cfg.stem;
        for (i, &c) in cfg.channels.iter().enumerate() {
            let s = scope.pp(format!("level{}", i + 1));
            let (k, stride, pad) = if i == 0 { (4, 4, 0) } else { (3, 2, 1) };
            downs.push(Conv2d::new(
                &s.pp("down"),
                prev,
                c,
                (k, k),
                ConvOpts {
                    stride,
                    padding: Some((pad, pad)),
                    ..Default::default()
                },
            )?);
            blocks.push(AdaGnBlock::new(&s.pp("block"), c, c, 3, cfg.groups, cfg.time_dim)?);
            prev = c;
        }
        Ok(Self {
            stem,
            downs,
            blocks,
        })
    }

    fn forward(&self, x: &Tensor, temb: &Tensor) -> Result<Features> {
        let full = self.stem.forward(x, temb)?;
        let mut h = full.clone();
        let mut levels = Vec::with_capacity(4);
        for (down, block) in self.downs.iter().zip(&self.blocks) {
            h = block.forward(&down.forward(&h)?, temb)?;
            levels.push(h.clone());
        }
        Ok(Features {
            full,
            levels: levels.try_into().expect("four levels"),
        })
    }
}

/// Which conditions a decoder fuses.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum DecoderKind {
    Mask,
    Edge,
}

#[derive(Debug, Clone)]
struct Decoder {
    kind: DecoderKind,
    levels: Vec<Level>,
    full: AdaGnBlock,
    head: Conv2d,
}

impl Decoder {
    fn new(scope: &Scope, kind: DecoderKind, c_cond: usize, cfg: &DenoiserConfig) -> Result<Self> {
        let ch = cfg.channels;
        let mut levels = Vec::with_capacity(4);
        // Deepest first: level 4 (stride 32) down to level 1 (stride 4).
        for i in (0..4).rev() {
            let mut in_c = ch[i];
            if i < 3 {
                in_c += ch[i + 1];
            }
            let cond = match kind {
                DecoderKind::Mask => c_cond,
                DecoderKind::Edge if i == 0 => c_cond,
                DecoderKind::Edge => 0,
            };
            levels.push(Level::new(
                &scope.pp(format!("level{}", i + 1)),
                in_c + cond,
                ch[i],
                cfg,
            )?);
        }
        Ok(Self {
            kind,
            levels,
            full: AdaGnBlock::new(
                &scope.pp("full"),
                ch[0] + cfg.stem,
                cfg.stem,
                3,
                cfg.groups,
                cfg.time_dim,
            )?,
            head: Conv2d::square(&scope.pp("head"), cfg.stem, 1, 1)?,
        })
    }

    fn forward(&self, feats: &Features, conds: &ConditionSet, temb: &Tensor) -> Result<Tensor> {
        let mut h: Option<Tensor> = None;
        for (j, level) in self.levels.iter().enumerate() {
            let i = 3 - j;
            let skip = &feats.levels[i];
            let (_, _, sh, sw) = skip.dims4()?;
            let up = match &h {
                Some(prev) => Some(nn::resize_bilinear(prev, sh, sw)?),
                None => None,
            };
            let cond = match self.kind {
                DecoderKind::Mask => Some(&conds.semantic[i]),
                DecoderKind::Edge if i == 0 => Some(&conds.edge),
                DecoderKind::Edge => None,
            };
            if let Some(c) = cond {
                let (_, _, ch, cw) = c.dims4()?;
                if (ch, cw) != (sh, sw) {
                    return Err(Error::shape(format!(
                        "condition at level {} is {ch}x{cw}, expected {sh}x{sw}",
                        i + 1
                    )));
                }
            }
            let mut parts: Vec<&Tensor> = vec![skip];
            if let Some(u) = &up {
                parts.push(u);
            }
            if let Some(c) = cond {
                parts.push(c);
            }
            h = Some(level.forward(&parts, temb)?);
        }
        let h = h.expect("at least one level");
        let (_, _, fh, fw) = feats.full.dims4()?;
        let up = nn::resize_bilinear(&h, fh, fw)?;
        let h = self.full.forward(&Tensor::cat(&[&up, &feats.full], 1)?, temb)?;
        self.head.forward(&h)
    }
}

#[derive(Debug, Clone)]
pub struct Denoiser {
    cfg: DenoiserConfig,
    time: crate::backbone::TimeEmbedding,
    encoder: Encoder,
    mask_decoder: Decoder,
    edge_decoder: Decoder,
}

/// Parameter-name prefixes of the two decoders, relative to the denoiser scope.
pub const MASK_DECODER: &str = "mask_decoder";
pub const EDGE_DECODER: &str = "edge_decoder";

impl Denoiser {
    pub fn new(scope: &Scope, c_cond: usize, cfg: &DenoiserConfig) -> Result<Self> {
        if cfg.fusion != "concat" {
            return Err(Error::invalid(format!(
                "unsupported fusion `{}`; only `concat` is implemented",
                cfg.fusion
            )));
        }
        let in_c = if cfg.image_input { 4 } else { 1 };
        Ok(Self {
            cfg: cfg.clone(),
            time: crate::backbone::TimeEmbedding::new(&scope.pp("time"), 64, cfg.time_dim)?,
            encoder: Encoder::new(&scope.pp("encoder"), in_c, cfg)?,
            mask_decoder: Decoder::new(&scope.pp(MASK_DECODER), DecoderKind::Mask, c_cond, cfg)?,
            edge_decoder: Decoder::new(&scope.pp(EDGE_DECODER), DecoderKind::Edge, c_cond, cfg)?,
        })
    }

    pub fn config(&self) -> &DenoiserConfig {
        &self.cfg
    }

    /// `x_t` is `b x 1 x h x w`; `image` is required when the config asks for it.
    pub fn forward(
        &self,
        x_t: &Tensor,
        image: Option<&Tensor>,
        conds: &ConditionSet,
        ts: &[usize],
        t_train: usize,
    ) -> Result<DenoiseOutput> {
        let (b, _, h, w) = x_t.dims4()?;
        if h % 32 != 0 || w % 32 != 0 {
            return Err(Error::shape(format!(
                "mask size {h}x{w} must be a multiple of 32"
            )));
        }
        if ts.len() != b {
            return Err(Error::shape(format!("{} timesteps for batch of {b}", ts.len())));
        }
        if let Some(&t) = ts.iter().find(|&&t| t > t_train) {
            return Err(Error::Timestep {
                t,
                lo: 0,
                hi: t_train,
            });
        }
        let input = if self.cfg.image_input {
            let img = image.ok_or_else(|| Error::invalid("denoiser configured for image input"))?;
            let img = nn::resize_bilinear(img, h, w)?;
            Tensor::cat(&[x_t, &img], 1)?
        } else {
            x_t.clone()
        };
        let temb = self.time.forward(ts, x_t)?;
        let feats = self.encoder.forward(&input, &temb)?;
        let mask_logits = self.mask_decoder.forward(&feats, conds, &temb)?;
        let edge_logits = self.edge_decoder.forward(&feats, conds, &temb)?;
        Ok(DenoiseOutput {
            mask_logits,
            edge_logits,
        })
    }
}

/// Maps mask logits to the signal domain: `2 * logistic(logits) - 1`.
pub fn logits_to_x0hat(logits: &Tensor) -> Result<Tensor> {
    Ok(nn::sigmoid(logits)?.affine(2.0, -1.0)?)
}

#[cfg(test)]
mod tests {
    use super::*;
    use candle_core::Device;

    #[test]
    fn x0hat_mapping() {
        let l = Tensor::new(&[0.0f64, 20.0, -20.0, 1.0, 2.0], &Device::Cpu).unwrap();
        let v = logits_to_x0hat(&l).unwrap().to_vec1::<f64>().unwrap();
        assert_eq!(v[0], 0.0);
        assert!((v[1] - 1.0).abs() < 1e-8);
        assert!((v[2] + 1.0).abs() < 1e-8);
        assert!(v[3] < v[4]);
    }

    use crate::losses::{total_loss, LossWeights};
    use crate::model::{LocalizationModel, ModelConfig, DENOISER};
    use crate::nn::fd;
    use candle_core::DType;

    fn model(cfg: &ModelConfig, seed: u64) -> LocalizationModel {
        LocalizationModel::new(cfg, seed, DType::F64, &Device::Cpu).unwrap()
    }

    fn inputs(b: usize, size: usize) -> (Tensor, Tensor) {
        (
            Tensor::rand(0f64, 1.0, (b, 3, size, size), &Device::Cpu).unwrap(),
            Tensor::randn(0f64, 1.0, (b, 1, size, size), &Device::Cpu).unwrap(),
        )
    }

    fn max_abs_diff(a: &Tensor, b: &Tensor) -> f64 {
        (a - b).unwrap().abs().unwrap().flatten_all().unwrap().max(0).unwrap().to_scalar().unwrap()
    }

    #[test]
    fn output_shapes_follow_the_mask() {
        let m = model(&ModelConfig::compact(), 0);
        for size in [64, 128] {
            let (img, xt) = inputs(2, size);
            let out = m.forward(&img, &xt, &[3, 800], 1000).unwrap().denoised;
            assert_eq!(out.mask_logits.dims(), &[2, 1, size, size]);
            assert_eq!(out.edge_logits.dims(), &[2, 1, size, size]);
        }
    }

    #[test]
    fn logits_depend_on_t() {
        let m = model(&ModelConfig::compact(), 1);
        let (img, xt) = inputs(1, 64);
        let conds = m.conditions().forward(&m.backbone().forward(&img, &xt, &[500]).unwrap()).unwrap();
        let a = m.denoiser().forward(&xt, None, &conds, &[1], 1000).unwrap();
        let b = m.denoiser().forward(&xt, None, &conds, &[1000], 1000).unwrap();
        assert!(max_abs_diff(&a.mask_logits, &b.mask_logits) > 0.0);
        assert!(max_abs_diff(&a.edge_logits, &b.edge_logits) > 0.0);
        assert!(matches!(
            m.denoiser().forward(&xt, None, &conds, &[1001], 1000),
            Err(Error::Timestep { t: 1001, .. })
        ));
    }

    #[test]
    fn zeroing_edge_decoder_leaves_mask_logits() {
        let m = model(&ModelConfig::compact(), 2);
        let (img, xt) = inputs(1, 64);
        let before = m.forward(&img, &xt, &[100], 1000).unwrap().denoised;
        let n = m.store().zero_prefix(&format!("{DENOISER}.{EDGE_DECODER}.")).unwrap();
        assert!(n > 0);
        let after = m.forward(&img, &xt, &[100], 1000).unwrap().denoised;
        assert_eq!(max_abs_diff(&before.mask_logits, &after.mask_logits), 0.0);
        assert!(max_abs_diff(&before.edge_logits, &after.edge_logits) > 0.0);
    }

    #[test]
    fn image_input_flag_widens_encoder() {
        let mut cfg = ModelConfig::compact();
        cfg.denoiser.image_input = true;
        let with = model(&cfg, 3);
        let without = model(&ModelConfig::compact(), 3);
        assert!(with.store().num_params() > without.store().num_params());
        let (img, xt) = inputs(1, 64);
        assert!(with.forward(&img, &xt, &[9], 1000).is_ok());
        let mut bad = ModelConfig::compact();
        bad.denoiser.fusion = "add".into();
        assert!(LocalizationModel::new(&bad, 0, DType::F64, &Device::Cpu).is_err());
    }

    #[test]
    fn parameter_count_is_stable() {
        let a = model(&ModelConfig::default(), 0).store().num_params();
        let b = model(&ModelConfig::default(), 99).store().num_params();
        assert_eq!(a, b);
        assert!(a > 1_000_000 && a < 20_000_000, "{a}");
    }

    fn gt(size: usize) -> (Tensor, Tensor) {
        let (s, _) = crate::data::synthetic_sample(0, size, 5).unwrap();
        let m = Tensor::from_vec(s.gt_mask.iter().map(|&v| v as f64).collect(), (1, 1, size, size), &Device::Cpu).unwrap();
        let e = Tensor::from_vec(s.gt_edge.iter().map(|&v| v as f64).collect(), (1, 1, size, size), &Device::Cpu).unwrap();
        (m, e)
    }

    #[test]
    fn end_to_end_gradients_match_finite_differences() {
        let m = model(&ModelConfig::compact(), 4);
        let (img, xt) = inputs(1, 64);
        let (gm, ge) = gt(64);
        let loss = || {
            let out = m.forward(&img, &xt, &[250], 1000)?.denoised;
            total_loss(&out, &gm, &ge, &LossWeights::default())
        };
        let picks = fd::pick(m.store(), 50, 7, |_| true);
        let probes = fd::check(m.store(), loss, &picks, 1e-5).unwrap();
        for p in &probes {
            assert!(p.rel_error(1e-7) < 1e-2, "{p:?}");
        }
    }

    #[test]
    fn edge_supervision_off_cuts_edge_decoder_gradient() {
        let m = model(&ModelConfig::compact(), 5);
        let (img, xt) = inputs(1, 64);
        let (gm, ge) = gt(64);
        let w = LossWeights {
            lambda_mask: 0.7,
            mu_edge: 0.0,
        };
        let out = m.forward(&img, &xt, &[250], 1000).unwrap().denoised;
        let grads = total_loss(&out, &gm, &ge, &w).unwrap().backward().unwrap();
        let edge = format!("{DENOISER}.{EDGE_DECODER}.");
        let mask = format!("{DENOISER}.{MASK_DECODER}.");
        let mut mask_live = false;
        for (name, var) in m.store().vars() {
            let norm = grads
                .get(var.as_tensor())
                .map(|g| g.abs().unwrap().sum_all().unwrap().to_scalar::<f64>().unwrap())
                .unwrap_or(0.0);
            if name.starts_with(&edge) {
                assert_eq!(norm, 0.0, "{name}");
            }
            if name.starts_with(&mask) && norm > 0.0 {
                mask_live = true;
            }
        }
        assert!(mask_live);
    }
}

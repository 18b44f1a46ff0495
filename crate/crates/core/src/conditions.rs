//! Semantic and edge conditions assembled from the feature pyramid.
//!
//! Semantic maps are refined top-down: `s4 = B(f4)`, `s_i = B(f_i) + P(up2(s_{i+1}))` for
//! `i = 3, 2, 1`, where `B` is a context block and `P` a 1x1 projection. The edge condition
//! merges the stride-4 level with the upsampled stride-32 level through one more block.

use candle_core::Tensor;
use serde::{Deserialize, Serialize};

use crate::backbone::FeaturePyramid;
use crate::dmfe::{ConvUnit, DmfeBlock, DmfeConfig};
use crate::error::{Error, Result};
use crate::nn::{self, Conv2d, Scope};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ConditionConfig {
    pub c_cond: usize,
    /// Context blocks are DMFE blocks when true, plain 3x3 conv units otherwise.
    pub dmfe: bool,
    pub dmfe_mid: usize,
    pub groups: usize,
    pub dmfe_shortcut: bool,
}

impl Default for ConditionConfig {
    fn default() -> Self {
        Self {
            c_cond: 64,
            dmfe: true,
            dmfe_mid: 32,
            groups: 8,
            dmfe_shortcut: true,
        }
    }
}

#[derive(Debug, Clone)]
pub struct ConditionSet {
    /// Strides 4, 8, 16, 32.
    pub semantic: [Tensor; 4],
    /// Stride 4.
    pub edge: Tensor,
}

#[derive(Debug, Clone)]
pub enum ContextBlock {
    Dmfe(Box<DmfeBlock>),
    Plain(ConvUnit),
}

impl ContextBlock {
    fn new(scope: &Scope, in_c: usize, cfg: &ConditionConfig) -> Result<Self> {
        if cfg.dmfe {
            let dc = DmfeConfig {
                in_channels: in_c,
                mid_channels: cfg.dmfe_mid.min(in_c),
                out_channels: cfg.c_cond,
                norm: true,
                groups: cfg.groups,
                shortcut: cfg.dmfe_shortcut,
                // Deep pyramid levels are only 2x2 or 4x4 at desk resolution.
                require_context: false,
            };
            Ok(Self::Dmfe(Box::new(DmfeBlock::new(scope, &dc)?)))
        } else {
            Ok(Self::Plain(ConvUnit::new(
                scope,
                in_c,
                cfg.c_cond,
                (3, 3),
                1,
                Some(cfg.groups),
            )?))
        }
    }

    pub fn forward(&self, x: &Tensor) -> Result<Tensor> {
        match self {
            Self::Dmfe(b) => b.forward(x),
            Self::Plain(u) => u.forward(x),
        }
    }
}

#[derive(Debug, Clone)]
pub struct ConditionNet {
    cfg: ConditionConfig,
    semantic: Vec<ContextBlock>,
    top_down: Vec<Conv2d>,
    edge: ContextBlock,
}

impl ConditionNet {
    pub fn new(scope: &Scope, pyramid_channels: [usize; 4], cfg: &ConditionConfig) -> Result<Self> {
        let semantic = (0..4)
            .map(|i| ContextBlock::new(&scope.pp(format!("sem{}", i + 1)), pyramid_channels[i], cfg))
            .collect::<Result<Vec<_>>>()?;
        let top_down = (0..3)
            .map(|i| Conv2d::square(&scope.pp(format!("top_down{}", i + 1)), cfg.c_cond, cfg.c_cond, 1))
            .collect::<Result<Vec<_>>>()?;
        let edge = ContextBlock::new(
            &scope.pp("edge"),
            pyramid_channels[0] + pyramid_channels[3],
            cfg,
        )?;
        Ok(Self {
            cfg: cfg.clone(),
            semantic,
            top_down,
            edge,
        })
    }

    pub fn config(&self) -> &ConditionConfig {
        &self.cfg
    }

    /// Context blocks for strides 4, 8, 16, 32.
    pub fn semantic_blocks(&self) -> &[ContextBlock] {
        &self.semantic
    }

    pub fn semantic(&self, fp: &FeaturePyramid) -> Result<[Tensor; 4]> {
        let mut out: Vec<Tensor> = Vec::with_capacity(4);
        let mut above = self.semantic[3].forward(fp.level(3))?;
        out.push(above.clone());
        for i in (0..3).rev() {
            let local = self.semantic[i].forward(fp.level(i))?;
            let (_, _, h, w) = local.dims4()?;
            let (_, _, ha, wa) = above.dims4()?;
            if ha * 2 != h || wa * 2 != w {
                return Err(Error::shape(format!(
                    "level {} is {h}x{w} but the level above is {ha}x{wa}",
                    i + 1
                )));
            }
            let up = self.top_down[i].forward(&nn::resize_bilinear(&above, h, w)?)?;
            above = (local + up)?;
            out.push(above.clone());
        }
        out.reverse();
        Ok(out.try_into().expect("four levels"))
    }

    pub fn edge(&self, fp: &FeaturePyramid) -> Result<Tensor> {
        let low = fp.level(0);
        let high = fp.level(3);
        let (_, _, h, w) = low.dims4()?;
        let (_, _, hh, wh) = high.dims4()?;
        if hh * 8 != h || wh * 8 != w {
            return Err(Error::shape(format!(
                "stride-32 level {hh}x{wh} does not upsample to stride-4 level {h}x{w}"
            )));
        }
        let up = nn::resize_bilinear(high, h, w)?;
        self.edge.forward(&Tensor::cat(&[low, &up], 1)?)
    }

    pub fn forward(&self, fp: &FeaturePyramid) -> Result<ConditionSet> {
        Ok(ConditionSet {
            semantic: self.semantic(fp)?,
            edge: self.edge(fp)?,
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::ParamStore;
    use candle_core::{DType, Device};

    const CH: [usize; 4] = [8, 8, 16, 16];

    fn pyramid(size: usize) -> FeaturePyramid {
        let dev = Device::Cpu;
        let levels: Vec<Tensor> = (0..4)
            .map(|i| {
                let s = size >> (i + 2);
                Tensor::randn(0f64, 1.0, (2, CH[i], s, s), &dev).unwrap()
            })
            .collect();
        FeaturePyramid {
            levels: levels.try_into().unwrap(),
        }
    }

    fn net(dmfe: bool) -> ConditionNet {
        let store = ParamStore::new(9, DType::F64, &Device::Cpu);
        let cfg = ConditionConfig {
            c_cond: 8,
            dmfe,
            dmfe_mid: 4,
            groups: 2,
            dmfe_shortcut: true,
        };
        ConditionNet::new(&store.root().pp("conditions"), CH, &cfg).unwrap()
    }

    fn dims(c: &ConditionSet) -> Vec<Vec<usize>> {
        c.semantic
            .iter()
            .chain(std::iter::once(&c.edge))
            .map(|t| t.dims().to_vec())
            .collect()
    }

    #[test]
    fn shapes_match_with_and_without_dmfe() {
        let fp = pyramid(64);
        let on = net(true).forward(&fp).unwrap();
        let off = net(false).forward(&fp).unwrap();
        assert!(matches!(net(true).semantic[0], ContextBlock::Dmfe(_)));
        assert!(matches!(net(false).semantic[0], ContextBlock::Plain(_)));
        let expect = vec![
            vec![2, 8, 16, 16],
            vec![2, 8, 8, 8],
            vec![2, 8, 4, 4],
            vec![2, 8, 2, 2],
            vec![2, 8, 16, 16],
        ];
        assert_eq!(dims(&on), expect);
        assert_eq!(dims(&off), expect);
    }

    #[test]
    fn edge_depends_on_lowest_and_highest_levels() {
        let n = net(true);
        let fp = pyramid(64);
        let base = n.edge(&fp).unwrap();
        for (level, expect_change) in [(0, true), (1, false), (2, false), (3, true)] {
            let mut p = fp.clone();
            p.levels[level] = (&p.levels[level] + 0.5).unwrap();
            let e = n.edge(&p).unwrap();
            let d = (&e - &base).unwrap().abs().unwrap().sum_all().unwrap().to_scalar::<f64>().unwrap();
            assert_eq!(d > 0.0, expect_change, "level {level}");
        }
    }

    #[test]
    fn coarse_levels_feed_fine_semantics() {
        let n = net(false);
        let fp = pyramid(64);
        let base = n.semantic(&fp).unwrap();
        let mut p = fp.clone();
        p.levels[3] = (&p.levels[3] * 2.0).unwrap();
        let moved = n.semantic(&p).unwrap();
        for i in 0..4 {
            let d = (&moved[i] - &base[i]).unwrap().abs().unwrap().sum_all().unwrap().to_scalar::<f64>().unwrap();
            assert!(d > 0.0, "level {i}");
        }
    }

    #[test]
    fn mismatched_pyramid_is_rejected() {
        let n = net(false);
        let mut fp = pyramid(64);
        fp.levels[3] = Tensor::zeros((2, 16, 3, 3), DType::F64, &Device::Cpu).unwrap();
        assert!(matches!(n.forward(&fp), Err(Error::Shape(_))));
    }
}

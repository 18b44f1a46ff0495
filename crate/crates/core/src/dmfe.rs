//! Dual-stream multi-scale feature extractor.
//!
//! After a shared 1x1 channel reduction `r`, stream one cascades dilated stacks with rates
//! 3, 5, 7 and stream two with 7, 5, 3; every branch adds the reduction to the previous branch
//! output before processing it. Each stream's four branch outputs are summed, the two sums
//! concatenated and fused by a 3x3 convolution.

use candle_core::Tensor;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::nn::{self, Conv2d, ConvOpts, GroupNorm, Scope};

pub const ASCENDING: [usize; 3] = [3, 5, 7];
pub const DESCENDING: [usize; 3] = [7, 5, 3];

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DmfeConfig {
    pub in_channels: usize,
    pub mid_channels: usize,
    pub out_channels: usize,
    /// Group normalization after every convolution.
    pub norm: bool,
    pub groups: usize,
    /// Adds a 1x1-projected copy of the input to the fused output.
    pub shortcut: bool,
    /// Reject inputs smaller than 8x8.
    pub require_context: bool,
}

impl DmfeConfig {
    pub fn new(in_channels: usize, out_channels: usize) -> Self {
        Self {
            in_channels,
            mid_channels: 32.min(in_channels),
            out_channels,
            norm: true,
            groups: 8,
            shortcut: true,
            require_context: true,
        }
    }
}

/// Convolution followed by optional group normalization and SiLU.
#[derive(Debug, Clone)]
pub struct ConvUnit {
    conv: Conv2d,
    norm: Option<GroupNorm>,
}

impl ConvUnit {
    pub fn new(
        scope: &Scope,
        in_c: usize,
        out_c: usize,
        kernel: (usize, usize),
        dilation: usize,
        norm_groups: Option<usize>,
    ) -> Result<Self> {
        let conv = Conv2d::new(
            &scope.pp("conv"),
            in_c,
            out_c,
            kernel,
            ConvOpts {
                dilation,
                ..Default::default()
            },
        )?;
        let norm = match norm_groups {
            Some(g) => Some(GroupNorm::new(&scope.pp("norm"), g.min(out_c), out_c)?),
            None => None,
        };
        Ok(Self { conv, norm })
    }

    pub fn forward(&self, x: &Tensor) -> Result<Tensor> {
        let h = self.conv.forward(x)?;
        let h = match &self.norm {
            Some(n) => n.forward(&h)?,
            None => h,
        };
        nn::silu(&h)
    }
}

/// The stacked unit `Cov_s`: 1x3, then 3x1, then a 3x3 convolution with dilation `d`.
#[derive(Debug, Clone)]
pub struct CovS {
    dilation: usize,
    c1x3: ConvUnit,
    c3x1: ConvUnit,
    dilated: ConvUnit,
}

impl CovS {
    pub fn new(scope: &Scope, channels: usize, dilation: usize, norm: Option<usize>) -> Result<Self> {
        if !matches!(dilation, 3 | 5 | 7) {
            return Err(Error::invalid(format!(
                "unsupported dilation {dilation}; expected 3, 5 or 7"
            )));
        }
        Ok(Self {
            dilation,
            c1x3: ConvUnit::new(&scope.pp("c1x3"), channels, channels, (1, 3), 1, norm)?,
            c3x1: ConvUnit::new(&scope.pp("c3x1"), channels, channels, (3, 1), 1, norm)?,
            dilated: ConvUnit::new(&scope.pp("dilated"), channels, channels, (3, 3), dilation, norm)?,
        })
    }

    pub fn dilation(&self) -> usize {
        self.dilation
    }

    pub fn forward(&self, h: &Tensor) -> Result<Tensor> {
        let h = self.c1x3.forward(h)?;
        let h = self.c3x1.forward(&h)?;
        self.dilated.forward(&h)
    }
}

/// Intermediate tensors of one forward pass, for inspection.
#[derive(Debug, Clone)]
pub struct DmfeBranches {
    pub reduced: Tensor,
    pub dout: [Tensor; 4],
    pub uout: [Tensor; 4],
}

#[derive(Debug, Clone)]
pub struct DmfeBlock {
    cfg: DmfeConfig,
    reduce: ConvUnit,
    d1: (ConvUnit, ConvUnit),
    d_stack: [CovS; 3],
    u_stack: [CovS; 3],
    u4: (ConvUnit, ConvUnit),
    fuse: ConvUnit,
    shortcut: Option<Conv2d>,
}

impl DmfeBlock {
    pub fn new(scope: &Scope, cfg: &DmfeConfig) -> Result<Self> {
        if cfg.mid_channels == 0 || cfg.mid_channels > cfg.in_channels {
            return Err(Error::invalid(format!(
                "mid_channels {} must be in 1..={}",
                cfg.mid_channels, cfg.in_channels
            )));
        }
        let m = cfg.mid_channels;
        let norm = cfg.norm.then_some(cfg.groups);
        let stack = |name: &str, rates: [usize; 3]| -> Result<[CovS; 3]> {
            let v = rates
                .iter()
                .enumerate()
                .map(|(i, &d)| CovS::new(&scope.pp(format!("{name}{}", i + 2)), m, d, norm))
                .collect::<Result<Vec<_>>>()?;
            Ok(v.try_into().expect("three stacks"))
        };
        let shortcut = if cfg.shortcut {
            Some(Conv2d::square(
                &scope.pp("shortcut"),
                cfg.in_channels,
                cfg.out_channels,
                1,
            )?)
        } else {
            None
        };
        Ok(Self {
            cfg: cfg.clone(),
            reduce: ConvUnit::new(&scope.pp("reduce"), cfg.in_channels, m, (1, 1), 1, norm)?,
            d1: (
                ConvUnit::new(&scope.pp("d1.c1x3"), m, m, (1, 3), 1, norm)?,
                ConvUnit::new(&scope.pp("d1.c3x1"), m, m, (3, 1), 1, norm)?,
            ),
            d_stack: stack("d", ASCENDING)?,
            u_stack: stack("u", DESCENDING)?,
            u4: (
                ConvUnit::new(&scope.pp("u4.c1x3"), m, m, (1, 3), 1, norm)?,
                ConvUnit::new(&scope.pp("u4.c3x1"), m, m, (3, 1), 1, norm)?,
            ),
            fuse: ConvUnit::new(&scope.pp("fuse"), 2 * m, cfg.out_channels, (3, 3), 1, norm)?,
            shortcut,
        })
    }

    pub fn config(&self) -> &DmfeConfig {
        &self.cfg
    }

    /// The dilated stack of stream one (`0`) or two (`1`) feeding branch `k` (2..=4 for stream
    /// one, 1..=3 for stream two).
    pub fn cov_s(&self, stream: usize, branch: usize) -> Option<&CovS> {
        match stream {
            0 if (2..=4).contains(&branch) => Some(&self.d_stack[branch - 2]),
            1 if (1..=3).contains(&branch) => Some(&self.u_stack[branch - 1]),
            _ => None,
        }
    }

    fn check(&self, f: &Tensor) -> Result<()> {
        let (_, c, h, w) = f.dims4()?;
        if c != self.cfg.in_channels {
            return Err(Error::shape(format!(
                "DMFE expects {} channels, got {c}",
                self.cfg.in_channels
            )));
        }
        if self.cfg.require_context && (h < 8 || w < 8) {
            return Err(Error::shape(format!(
                "DMFE input {h}x{w} is smaller than 8x8"
            )));
        }
        Ok(())
    }

    pub fn branches(&self, f: &Tensor) -> Result<DmfeBranches> {
        self.check(f)?;
        let r = self.reduce.forward(f)?;
        let d1 = self.d1.1.forward(&self.d1.0.forward(&r)?)?;
        let d2 = self.d_stack[0].forward(&(&r + &d1)?)?;
        let d3 = self.d_stack[1].forward(&(&r + &d2)?)?;
        let d4 = self.d_stack[2].forward(&(&r + &d3)?)?;
        let u1 = self.u_stack[0].forward(&r)?;
        let u2 = self.u_stack[1].forward(&(&r + &u1)?)?;
        let u3 = self.u_stack[2].forward(&(&r + &u2)?)?;
        let u4 = self.u4.1.forward(&self.u4.0.forward(&(&r + &u3)?)?)?;
        Ok(DmfeBranches {
            reduced: r,
            dout: [d1, d2, d3, d4],
            uout: [u1, u2, u3, u4],
        })
    }

    pub fn forward(&self, f: &Tensor) -> Result<Tensor> {
        let br = self.branches(f)?;
        let sum = |xs: &[Tensor; 4]| -> Result<Tensor> {
            Ok((((&xs[0] + &xs[1])? + &xs[2])? + &xs[3])?)
        };
        let cat = Tensor::cat(&[&sum(&br.dout)?, &sum(&br.uout)?], 1)?;
        let out = self.fuse.forward(&cat)?;
        match &self.shortcut {
            Some(s) => Ok((out + s.forward(f)?)?),
            None => Ok(out),
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::ParamStore;
    use candle_core::{DType, Device};

    fn block(cfg: &DmfeConfig, seed: u64) -> (ParamStore, DmfeBlock) {
        let store = ParamStore::new(seed, DType::F64, &Device::Cpu);
        let b = DmfeBlock::new(&store.root().pp("dmfe"), cfg).unwrap();
        (store, b)
    }

    #[test]
    fn preserves_shape() {
        let (_, b) = block(&DmfeConfig::new(16, 24), 1);
        for (h, w) in [(8, 8), (16, 12), (32, 32)] {
            let x = Tensor::randn(0f64, 1.0, (2, 16, h, w), &Device::Cpu).unwrap();
            assert_eq!(b.forward(&x).unwrap().dims(), &[2, 24, h, w]);
        }
    }

    #[test]
    fn rejects_bad_inputs() {
        let (_, b) = block(&DmfeConfig::new(16, 24), 1);
        let small = Tensor::zeros((1, 16, 4, 8), DType::F64, &Device::Cpu).unwrap();
        assert!(b.forward(&small).is_err());
        let wrong_c = Tensor::zeros((1, 8, 8, 8), DType::F64, &Device::Cpu).unwrap();
        assert!(b.forward(&wrong_c).is_err());
        let store = ParamStore::new(0, DType::F64, &Device::Cpu);
        assert!(CovS::new(&store.root(), 8, 4, None).is_err());
        let mut cfg = DmfeConfig::new(16, 24);
        cfg.mid_channels = 32;
        assert!(DmfeBlock::new(&store.root().pp("x"), &cfg).is_err());
    }

    #[test]
    fn small_inputs_allowed_without_context_requirement() {
        let mut cfg = DmfeConfig::new(16, 24);
        cfg.require_context = false;
        let (_, b) = block(&cfg, 1);
        let x = Tensor::randn(0f64, 1.0, (1, 16, 2, 2), &Device::Cpu).unwrap();
        assert_eq!(b.forward(&x).unwrap().dims(), &[1, 24, 2, 2]);
    }

    #[test]
    fn zero_in_zero_bias_gives_zero_out() {
        let (store, b) = block(&DmfeConfig::new(16, 16), 3);
        for (name, var) in store.vars() {
            if name.ends_with("bias") || name.ends_with("beta") {
                var.set(&var.as_tensor().zeros_like().unwrap()).unwrap();
            }
        }
        let x = Tensor::zeros((1, 16, 12, 12), DType::F64, &Device::Cpu).unwrap();
        let y = b.forward(&x).unwrap();
        let m = y.abs().unwrap().flatten_all().unwrap().max(0).unwrap();
        assert_eq!(m.to_scalar::<f64>().unwrap(), 0.0);
    }

    #[test]
    fn branch_additivity_by_weight_surgery() {
        let (store, b) = block(&DmfeConfig::new(16, 16), 5);
        // Silence branch one of stream one: Dout_2 must then equal Cov_s(r) alone.
        store.zero_prefix("dmfe.d1.").unwrap();
        let x = Tensor::randn(0f64, 1.0, (1, 16, 16, 16), &Device::Cpu).unwrap();
        let br = b.branches(&x).unwrap();
        let zero = br.dout[0].abs().unwrap().sum_all().unwrap().to_scalar::<f64>().unwrap();
        assert_eq!(zero, 0.0);
        let direct = b.cov_s(0, 2).unwrap().forward(&br.reduced).unwrap();
        let diff = (&direct - &br.dout[1])
            .unwrap()
            .abs()
            .unwrap()
            .sum_all()
            .unwrap()
            .to_scalar::<f64>()
            .unwrap();
        assert_eq!(diff, 0.0);
    }

    type Support = std::collections::BTreeSet<(i64, i64)>;

    fn offsets(kh: i64, kw: i64, d: i64) -> Support {
        let mut s = Support::new();
        for i in -(kh / 2)..=kh / 2 {
            for j in -(kw / 2)..=kw / 2 {
                s.insert((i * d, j * d));
            }
        }
        s
    }

    fn minkowski(a: &Support, b: &Support) -> Support {
        a.iter()
            .flat_map(|p| b.iter().map(move |q| (p.0 + q.0, p.1 + q.1)))
            .collect()
    }

    fn with_origin(a: &Support) -> Support {
        let mut s = a.clone();
        s.insert((0, 0));
        s
    }

    fn cov_s_support(d: i64) -> Support {
        minkowski(&minkowski(&offsets(1, 3, 1), &offsets(3, 1, 1)), &offsets(3, 3, d))
    }

    /// Nonzero positions of `t` over batch and channels, relative to `centre`.
    fn support(t: &Tensor, centre: i64) -> Support {
        let (_, _, h, w) = t.dims4().unwrap();
        let a = t.abs().unwrap().sum(0).unwrap().sum(0).unwrap();
        let v = a.to_vec2::<f64>().unwrap();
        let mut s = Support::new();
        for y in 0..h {
            for x in 0..w {
                if v[y][x] != 0.0 {
                    s.insert((y as i64 - centre, x as i64 - centre));
                }
            }
        }
        s
    }

    fn zero_biases(store: &ParamStore) {
        for (name, var) in store.vars() {
            if name.ends_with("bias") {
                var.set(&var.as_tensor().zeros_like().unwrap()).unwrap();
            }
        }
    }

    const N: usize = 48;
    const C: i64 = 24;

    fn impulse(channels: usize) -> Tensor {
        let mut v = vec![0.0f64; channels * N * N];
        v[(C as usize) * N + C as usize] = 1.0;
        Tensor::from_vec(v, (1, channels, N, N), &Device::Cpu).unwrap()
    }

    fn radius(s: &Support) -> i64 {
        s.iter().map(|p| p.0.abs().max(p.1.abs())).max().unwrap()
    }

    #[test]
    fn cov_s_impulse_support_matches_oracle() {
        for d in [3usize, 5, 7] {
            let store = ParamStore::new(d as u64, DType::F64, &Device::Cpu);
            let c = CovS::new(&store.root().pp("c"), 3, d, None).unwrap();
            zero_biases(&store);
            let y = c.forward(&impulse(3)).unwrap();
            assert_eq!(y.dims(), &[1, 3, N, N]);
            assert_eq!(support(&y, C), cov_s_support(d as i64), "dilation {d}");
        }
    }

    #[test]
    fn branch_supports_match_receptive_field_oracle() {
        let mut cfg = DmfeConfig::new(4, 4);
        cfg.mid_channels = 3;
        cfg.norm = false;
        let (store, b) = block(&cfg, 11);
        zero_biases(&store);
        let br = b.branches(&impulse(4)).unwrap();

        let pair = minkowski(&offsets(1, 3, 1), &offsets(3, 1, 1));
        let mut expect_d = vec![pair.clone()];
        for d in ASCENDING {
            let prev = with_origin(expect_d.last().unwrap());
            expect_d.push(minkowski(&cov_s_support(d as i64), &prev));
        }
        let mut expect_u = vec![cov_s_support(7)];
        for d in [5, 3] {
            let prev = with_origin(expect_u.last().unwrap());
            expect_u.push(minkowski(&cov_s_support(d), &prev));
        }
        expect_u.push(minkowski(&pair, &with_origin(expect_u.last().unwrap())));

        for k in 0..4 {
            assert_eq!(support(&br.dout[k], C), expect_d[k], "Dout_{}", k + 1);
            assert_eq!(support(&br.uout[k], C), expect_u[k], "Uout_{}", k + 1);
        }
        // The deepest stream-one path composes 1 + 3 + 5 + 7 plus the asymmetric pairs.
        assert!(radius(&expect_d[3]) >= 1 + 3 + 5 + 7);
        assert!(radius(&expect_d[3]) > radius(&expect_d[0]));

        let mut all = Support::new();
        for s in expect_d.iter().chain(&expect_u) {
            all.extend(s.iter().copied());
        }
        let mut expect_out = minkowski(&offsets(3, 3, 1), &all);
        expect_out.insert((0, 0));
        let y = b.forward(&impulse(4)).unwrap();
        assert_eq!(support(&y, C), expect_out);
    }

    #[test]
    fn constant_input_gives_constant_interior() {
        let (_, b) = block(&DmfeConfig::new(8, 8), 12);
        let x = Tensor::full(0.7f64, (1, 8, N, N), &Device::Cpu).unwrap();
        let br = b.branches(&x).unwrap();
        let m = 20;
        let inner = |t: &Tensor| t.narrow(2, m, N - 2 * m).unwrap().narrow(3, m, N - 2 * m).unwrap();
        let out = b.forward(&x).unwrap();
        for t in br.dout.iter().chain(&br.uout).chain(std::iter::once(&out)) {
            let v = inner(t).flatten_from(2).unwrap();
            let var = v.var_keepdim(2).unwrap().max_keepdim(1).unwrap();
            let var = var.flatten_all().unwrap().to_vec1::<f64>().unwrap()[0];
            assert!(var < 1e-10, "{var}");
        }
    }

    #[test]
    fn every_parameter_receives_gradient() {
        let (store, b) = block(&DmfeConfig::new(8, 16), 13);
        let x = Tensor::randn(0f64, 1.0, (2, 8, 16, 16), &Device::Cpu).unwrap();
        let w = Tensor::randn(0f64, 1.0, (2, 16, 16, 16), &Device::Cpu).unwrap();
        let grads = (b.forward(&x).unwrap() * w).unwrap().sum_all().unwrap().backward().unwrap();
        for (name, var) in store.vars() {
            let g = grads.get(var.as_tensor()).unwrap_or_else(|| panic!("{name} has no gradient"));
            let n = g.abs().unwrap().sum_all().unwrap().to_scalar::<f64>().unwrap();
            assert!(n > 0.0, "{name} has zero gradient");
        }
    }
}

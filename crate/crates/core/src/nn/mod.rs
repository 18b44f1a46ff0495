//! Minimal layer toolkit over `candle_core` with seeded, name-addressed parameters.
//!
//! Every parameter is created through a [`Scope`] and owned by a [`ParamStore`]. Initial
//! values are drawn from a ChaCha stream keyed by `(store seed, parameter name)`, so a model's
//! initialization does not depend on construction order.

use std::collections::{BTreeMap, HashMap};
use std::path::Path;
use std::sync::{Arc, Mutex};

use candle_core::{DType, Device, Tensor, Var, D};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal, Uniform};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};

pub mod im2col;
#[cfg(test)]
pub(crate) mod fd;

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Init {
    Zeros,
    Ones,
    Normal(f64),
    /// Uniform in `[-b, b]`.
    Uniform(f64),
}

impl Init {
    /// Kaiming-uniform bound for a layer with the given fan-in.
    pub fn fan_in(fan_in: usize) -> Self {
        Init::Uniform(1.0 / (fan_in.max(1) as f64).sqrt())
    }
}

/// Derives a 64-bit stream seed from a base seed and a label.
pub fn derive_seed(seed: u64, label: &str) -> u64 {
    let mut h = Sha256::new();
    h.update(seed.to_le_bytes());
    h.update(label.as_bytes());
    let digest = h.finalize();
    let mut out = [0u8; 8];
    out.copy_from_slice(&digest[..8]);
    u64::from_le_bytes(out)
}

struct StoreInner {
    vars: BTreeMap<String, Var>,
}

#[derive(Clone)]
pub struct ParamStore {
    inner: Arc<Mutex<StoreInner>>,
    seed: u64,
    dtype: DType,
    device: Device,
}

impl ParamStore {
    pub fn new(seed: u64, dtype: DType, device: &Device) -> Self {
        Self {
            inner: Arc::new(Mutex::new(StoreInner {
                vars: BTreeMap::new(),
            })),
            seed,
            dtype,
            device: device.clone(),
        }
    }

    pub fn root(&self) -> Scope {
        Scope {
            store: self.clone(),
            prefix: String::new(),
        }
    }

    pub fn dtype(&self) -> DType {
        self.dtype
    }

    pub fn device(&self) -> &Device {
        &self.device
    }

    /// All parameters sorted by name.
    pub fn vars(&self) -> Vec<(String, Var)> {
        let inner = self.inner.lock().unwrap();
        inner
            .vars
            .iter()
            .map(|(k, v)| (k.clone(), v.clone()))
            .collect()
    }

    pub fn get(&self, name: &str) -> Option<Var> {
        self.inner.lock().unwrap().vars.get(name).cloned()
    }

    pub fn num_params(&self) -> usize {
        self.inner
            .lock()
            .unwrap()
            .vars
            .values()
            .map(|v| v.elem_count())
            .sum()
    }

    /// Number of scalars in parameters whose name starts with `prefix`.
    pub fn num_params_with_prefix(&self, prefix: &str) -> usize {
        self.inner
            .lock()
            .unwrap()
            .vars
            .iter()
            .filter(|(k, _)| k.starts_with(prefix))
            .map(|(_, v)| v.elem_count())
            .sum()
    }

    /// Overwrites every parameter under `prefix` with zeros. Returns how many were touched.
    pub fn zero_prefix(&self, prefix: &str) -> Result<usize> {
        let inner = self.inner.lock().unwrap();
        let mut n = 0;
        for (k, v) in inner.vars.iter() {
            if k.starts_with(prefix) {
                v.set(&v.as_tensor().zeros_like()?)?;
                n += 1;
            }
        }
        Ok(n)
    }

    pub fn to_tensors(&self) -> Result<HashMap<String, Tensor>> {
        let inner = self.inner.lock().unwrap();
        let mut map = HashMap::with_capacity(inner.vars.len());
        for (k, v) in inner.vars.iter() {
            map.insert(k.clone(), v.as_tensor().copy()?);
        }
        Ok(map)
    }

    /// Saves a flat `name -> tensor` map (safetensors, shapes embedded).
    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let map = self.to_tensors()?;
        candle_core::safetensors::save(&map, path.as_ref())?;
        Ok(())
    }

    /// Loads values into already-created parameters; names and shapes must match exactly.
    pub fn load(&self, path: impl AsRef<Path>) -> Result<()> {
        let map = candle_core::safetensors::load(path.as_ref(), &self.device)?;
        self.assign(&map)
    }

    pub fn assign(&self, map: &HashMap<String, Tensor>) -> Result<()> {
        let inner = self.inner.lock().unwrap();
        for (k, v) in inner.vars.iter() {
            let t = map
                .get(k)
                .ok_or_else(|| Error::invalid(format!("checkpoint lacks parameter `{k}`")))?;
            if t.dims() != v.dims() {
                return Err(Error::shape(format!(
                    "parameter `{k}`: checkpoint {:?} vs model {:?}",
                    t.dims(),
                    v.dims()
                )));
            }
            v.set(&t.to_dtype(self.dtype)?)?;
        }
        if map.len() != inner.vars.len() {
            let extra: Vec<_> = map.keys().filter(|k| !inner.vars.contains_key(*k)).collect();
            return Err(Error::invalid(format!(
                "checkpoint has unknown parameters: {extra:?}"
            )));
        }
        Ok(())
    }

    fn create(&self, name: String, shape: &[usize], init: Init) -> Result<Tensor> {
        let mut inner = self.inner.lock().unwrap();
        if let Some(v) = inner.vars.get(&name) {
            if v.dims() != shape {
                return Err(Error::shape(format!(
                    "parameter `{name}` re-requested with shape {shape:?}, has {:?}",
                    v.dims()
                )));
            }
            return Ok(v.as_tensor().clone());
        }
        let n: usize = shape.iter().product();
        let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(self.seed, &name));
        let values: Vec<f64> = match init {
            Init::Zeros => vec![0.0; n],
            Init::Ones => vec![1.0; n],
            Init::Normal(std) => {
                let d = Normal::new(0.0, std).map_err(|e| Error::invalid(e.to_string()))?;
                (0..n).map(|_| d.sample(&mut rng)).collect()
            }
            Init::Uniform(b) => {
                let d = Uniform::new_inclusive(-b, b).map_err(|e| Error::invalid(e.to_string()))?;
                (0..n).map(|_| d.sample(&mut rng)).collect()
            }
        };
        let t = Tensor::from_vec(values, shape, &self.device)?.to_dtype(self.dtype)?;
        let var = Var::from_tensor(&t)?;
        let out = var.as_tensor().clone();
        inner.vars.insert(name, var);
        Ok(out)
    }
}

/// A name prefix inside a [`ParamStore`].
#[derive(Clone)]
pub struct Scope {
    store: ParamStore,
    prefix: String,
}

impl Scope {
    pub fn pp(&self, name: impl AsRef<str>) -> Scope {
        let name = name.as_ref();
        let prefix = if self.prefix.is_empty() {
            name.to_string()
        } else {
            format!("{}.{}", self.prefix, name)
        };
        Scope {
            store: self.store.clone(),
            prefix,
        }
    }

    pub fn param(&self, name: &str, shape: &[usize], init: Init) -> Result<Tensor> {
        let full = if self.prefix.is_empty() {
            name.to_string()
        } else {
            format!("{}.{}", self.prefix, name)
        };
        self.store.create(full, shape, init)
    }

    pub fn prefix(&self) -> &str {
        &self.prefix
    }

    pub fn dtype(&self) -> DType {
        self.store.dtype
    }

    pub fn device(&self) -> &Device {
        &self.store.device
    }
}

#[derive(Debug, Clone, Copy)]
pub struct ConvOpts {
    pub stride: usize,
    pub dilation: usize,
    /// `None` pads to keep the spatial size at stride 1.
    pub padding: Option<(usize, usize)>,
    pub bias: bool,
}

impl Default for ConvOpts {
    fn default() -> Self {
        Self {
            stride: 1,
            dilation: 1,
            padding: None,
            bias: true,
        }
    }
}

/// 2-D convolution with independent vertical/horizontal padding.
#[derive(Debug, Clone)]
pub struct Conv2d {
    weight: Tensor,
    bias: Option<Tensor>,
    pad: (usize, usize),
    stride: usize,
    dilation: usize,
}

impl Conv2d {
    pub fn new(
        scope: &Scope,
        in_c: usize,
        out_c: usize,
        kernel: (usize, usize),
        opts: ConvOpts,
    ) -> Result<Self> {
        let (kh, kw) = kernel;
        let fan_in = in_c * kh * kw;
        let weight = scope.param("weight", &[out_c, in_c, kh, kw], Init::fan_in(fan_in))?;
        let bias = if opts.bias {
            Some(scope.param("bias", &[out_c], Init::fan_in(fan_in))?)
        } else {
            None
        };
        let pad = opts
            .padding
            .unwrap_or((opts.dilation * (kh - 1) / 2, opts.dilation * (kw - 1) / 2));
        Ok(Self {
            weight,
            bias,
            pad,
            stride: opts.stride,
            dilation: opts.dilation,
        })
    }

    pub fn square(scope: &Scope, in_c: usize, out_c: usize, k: usize) -> Result<Self> {
        Self::new(scope, in_c, out_c, (k, k), ConvOpts::default())
    }

    pub fn in_channels(&self) -> usize {
        self.weight.dims()[1]
    }

    pub fn out_channels(&self) -> usize {
        self.weight.dims()[0]
    }

    pub fn forward(&self, x: &Tensor) -> Result<Tensor> {
        let (ph, pw) = self.pad;
        Ok(im2col::conv2d(
            x,
            &self.weight,
            self.bias.as_ref(),
            self.stride,
            self.dilation,
            (ph, pw),
        )?)
    }
}

#[derive(Debug, Clone)]
pub struct Linear {
    weight: Tensor,
    bias: Tensor,
}

impl Linear {
    pub fn new(scope: &Scope, in_f: usize, out_f: usize) -> Result<Self> {
        let weight = scope.param("weight", &[out_f, in_f], Init::fan_in(in_f))?;
        let bias = scope.param("bias", &[out_f], Init::fan_in(in_f))?;
        Ok(Self { weight, bias })
    }

    pub fn forward(&self, x: &Tensor) -> Result<Tensor> {
        let dims = x.dims().to_vec();
        let in_f = *dims.last().ok_or_else(|| Error::shape("linear on a scalar"))?;
        let rows = x.elem_count() / in_f.max(1);
        let y = x.reshape((rows, in_f))?.matmul(&self.weight.t()?)?;
        let y = y.broadcast_add(&self.bias)?;
        let mut out = dims;
        *out.last_mut().unwrap() = self.bias.dim(0)?;
        Ok(y.reshape(out)?)
    }
}

/// Layer normalization over the last dimension.
#[derive(Debug, Clone)]
pub struct LayerNorm {
    gamma: Tensor,
    beta: Tensor,
    eps: f64,
}

impl LayerNorm {
    pub fn new(scope: &Scope, dim: usize) -> Result<Self> {
        Ok(Self {
            gamma: scope.param("gamma", &[dim], Init::Ones)?,
            beta: scope.param("beta", &[dim], Init::Zeros)?,
            eps: 1e-5,
        })
    }

    pub fn forward(&self, x: &Tensor) -> Result<Tensor> {
        let mean = x.mean_keepdim(D::Minus1)?;
        let xc = x.broadcast_sub(&mean)?;
        let var = xc.sqr()?.mean_keepdim(D::Minus1)?;
        let xn = xc.broadcast_div(&(var + self.eps)?.sqrt()?)?;
        Ok(xn.broadcast_mul(&self.gamma)?.broadcast_add(&self.beta)?)
    }
}

/// Group normalization of an NCHW tensor without affine parameters.
pub fn group_norm(x: &Tensor, groups: usize, eps: f64) -> Result<Tensor> {
    let (b, c, h, w) = x.dims4()?;
    if groups == 0 || c % groups != 0 {
        return Err(Error::shape(format!(
            "{c} channels not divisible into {groups} groups"
        )));
    }
    let xg = x.reshape((b, groups, (c / groups) * h * w))?;
    let mean = xg.mean_keepdim(D::Minus1)?;
    let xc = xg.broadcast_sub(&mean)?;
    let var = xc.sqr()?.mean_keepdim(D::Minus1)?;
    let xn = xc.broadcast_div(&(var + eps)?.sqrt()?)?;
    Ok(xn.reshape((b, c, h, w))?)
}

/// Group normalization with learned per-channel scale and shift.
#[derive(Debug, Clone)]
pub struct GroupNorm {
    gamma: Tensor,
    beta: Tensor,
    groups: usize,
}

impl GroupNorm {
    pub fn new(scope: &Scope, groups: usize, channels: usize) -> Result<Self> {
        if !channels.is_multiple_of(groups) {
            return Err(Error::shape(format!(
                "{channels} channels not divisible into {groups} groups"
            )));
        }
        Ok(Self {
            gamma: scope.param("gamma", &[channels], Init::Ones)?,
            beta: scope.param("beta", &[channels], Init::Zeros)?,
            groups,
        })
    }

    pub fn forward(&self, x: &Tensor) -> Result<Tensor> {
        let c = x.dim(1)?;
        let xn = group_norm(x, self.groups, 1e-5)?;
        Ok(xn
            .broadcast_mul(&self.gamma.reshape((1, c, 1, 1))?)?
            .broadcast_add(&self.beta.reshape((1, c, 1, 1))?)?)
    }
}

/// Logistic function, evaluated through `tanh` so large-magnitude inputs keep finite gradients.
pub fn sigmoid(x: &Tensor) -> Result<Tensor> {
    Ok(((x * 0.5)?.tanh()? + 1.0)?.affine(0.5, 0.0)?)
}

pub fn silu(x: &Tensor) -> Result<Tensor> {
    Ok(x.silu()?)
}

/// Row-stochastic matrix (`dst x src`) of 1-D linear interpolation with half-pixel centers.
pub fn interp_matrix(src: usize, dst: usize) -> Vec<f64> {
    let mut m = vec![0.0; dst * src];
    let scale = src as f64 / dst as f64;
    for i in 0..dst {
        let pos = ((i as f64 + 0.5) * scale - 0.5).max(0.0);
        let lo = (pos.floor() as usize).min(src - 1);
        let hi = (lo + 1).min(src - 1);
        let frac = pos - lo as f64;
        m[i * src + lo] += 1.0 - frac;
        m[i * src + hi] += frac;
    }
    m
}

/// Bilinear resize of an NCHW tensor, built from two matrix products so it is differentiable.
pub fn resize_bilinear(x: &Tensor, out_h: usize, out_w: usize) -> Result<Tensor> {
    let (b, c, h, w) = x.dims4()?;
    if h == out_h && w == out_w {
        return Ok(x.clone());
    }
    let dev = x.device();
    let dt = x.dtype();
    let mw = Tensor::from_vec(interp_matrix(w, out_w), (out_w, w), dev)?.to_dtype(dt)?;
    let mh = Tensor::from_vec(interp_matrix(h, out_h), (out_h, h), dev)?.to_dtype(dt)?;
    // (b*c*h, w) x (w, out_w)
    let y = x.reshape((b * c * h, w))?.matmul(&mw.t()?)?;
    let y = y.reshape((b * c, h, out_w))?;
    // (out_h, h) x (b*c, h, out_w)
    let y = mh.broadcast_matmul(&y)?;
    Ok(y.reshape((b, c, out_h, out_w))?)
}

/// Sinusoidal embedding with interleaved `(sin, cos)` pairs: `e[2i] = sin(t w_i)`,
/// `e[2i+1] = cos(t w_i)`, `w_i = 10000^(-2i/dim)`.
pub fn sinusoidal(t: f64, dim: usize) -> Result<Vec<f64>> {
    if dim == 0 || !dim.is_multiple_of(2) {
        return Err(Error::invalid(format!(
            "sinusoidal dimension must be even and positive, got {dim}"
        )));
    }
    let half = dim / 2;
    let mut out = Vec::with_capacity(dim);
    for i in 0..half {
        let freq = (-(10000f64.ln()) * (2 * i) as f64 / dim as f64).exp();
        out.push((t * freq).sin());
        out.push((t * freq).cos());
    }
    Ok(out)
}

/// Stacks per-example sinusoidal embeddings into a `(batch, dim)` tensor.
pub fn sinusoidal_batch(ts: &[usize], dim: usize, dtype: DType, dev: &Device) -> Result<Tensor> {
    let mut data = Vec::with_capacity(ts.len() * dim);
    for &t in ts {
        data.extend(sinusoidal(t as f64, dim)?);
    }
    Ok(Tensor::from_vec(data, (ts.len(), dim), dev)?.to_dtype(dtype)?)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn init_is_order_independent() {
        let dev = Device::Cpu;
        let a = ParamStore::new(7, DType::F64, &dev);
        let b = ParamStore::new(7, DType::F64, &dev);
        let a1 = a.root().param("x", &[4], Init::Normal(1.0)).unwrap();
        let _ = a.root().param("y", &[4], Init::Normal(1.0)).unwrap();
        let _ = b.root().param("y", &[4], Init::Normal(1.0)).unwrap();
        let b1 = b.root().param("x", &[4], Init::Normal(1.0)).unwrap();
        assert_eq!(
            a1.to_vec1::<f64>().unwrap(),
            b1.to_vec1::<f64>().unwrap()
        );
    }

    #[test]
    fn interp_matrix_rows_sum_to_one() {
        for (s, d) in [(2, 4), (4, 16), (16, 64), (5, 3)] {
            let m = interp_matrix(s, d);
            for r in 0..d {
                let sum: f64 = m[r * s..(r + 1) * s].iter().sum();
                assert!((sum - 1.0).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn resize_preserves_constants() {
        let x = Tensor::full(3.5f64, (1, 2, 4, 4), &Device::Cpu).unwrap();
        let y = resize_bilinear(&x, 16, 16).unwrap();
        assert_eq!(y.dims(), &[1, 2, 16, 16]);
        let v = y.flatten_all().unwrap().to_vec1::<f64>().unwrap();
        assert!(v.iter().all(|&a| (a - 3.5).abs() < 1e-12));
    }

    #[test]
    fn asymmetric_conv_keeps_size() {
        let store = ParamStore::new(0, DType::F32, &Device::Cpu);
        let c = Conv2d::new(&store.root().pp("c"), 3, 5, (1, 3), ConvOpts::default()).unwrap();
        let x = Tensor::ones((2, 3, 9, 11), DType::F32, &Device::Cpu).unwrap();
        assert_eq!(c.forward(&x).unwrap().dims(), &[2, 5, 9, 11]);
        let c = Conv2d::new(
            &store.root().pp("d"),
            3,
            5,
            (3, 3),
            ConvOpts {
                dilation: 7,
                ..Default::default()
            },
        )
        .unwrap();
        assert_eq!(c.forward(&x).unwrap().dims(), &[2, 5, 9, 11]);
    }

    #[test]
    fn sinusoidal_rejects_odd() {
        assert!(sinusoidal(1.0, 7).is_err());
        let e = sinusoidal(0.0, 8).unwrap();
        assert_eq!(e, vec![0.0, 1.0, 0.0, 1.0, 0.0, 1.0, 0.0, 1.0]);
    }
}

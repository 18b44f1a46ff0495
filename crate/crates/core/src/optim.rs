//! AdamW with global-norm clipping and a cosine learning-rate schedule.

use std::collections::{BTreeMap, HashMap};
use std::path::Path;

use candle_core::backprop::GradStore;
use candle_core::{DType, Device, Tensor, Var};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AdamWConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
    /// Gradients are rescaled so their joint L2 norm is at most this. `None` disables clipping.
    pub clip_norm: Option<f64>,
}

impl Default for AdamWConfig {
    fn default() -> Self {
        Self {
            lr: 1e-3,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            weight_decay: 0.01,
            clip_norm: Some(1.0),
        }
    }
}

/// `lr * (1 + cos(pi * step / total)) / 2`, constant at zero past `total`.
pub fn cosine_lr(base: f64, step: usize, total: usize) -> f64 {
    if total == 0 {
        return base;
    }
    let frac = (step.min(total) as f64) / total as f64;
    0.5 * base * (1.0 + (std::f64::consts::PI * frac).cos())
}

/// What one update did, for logging and NaN diagnostics.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct StepStats {
    pub lr: f64,
    /// Global gradient norm before clipping.
    pub grad_norm: f64,
    pub updated: usize,
}

struct Moments {
    m: Tensor,
    v: Tensor,
}

pub struct AdamW {
    cfg: AdamWConfig,
    params: Vec<(String, Var)>,
    state: BTreeMap<String, Moments>,
    step: usize,
}

impl AdamW {
    pub fn new(params: Vec<(String, Var)>, cfg: AdamWConfig) -> Result<Self> {
        if !(cfg.lr > 0.0 && (0.0..1.0).contains(&cfg.beta1) && (0.0..1.0).contains(&cfg.beta2)) {
            return Err(Error::invalid(format!("bad optimizer settings {cfg:?}")));
        }
        if cfg.eps <= 0.0 || cfg.weight_decay < 0.0 || cfg.clip_norm.is_some_and(|c| c <= 0.0) {
            return Err(Error::invalid(format!("bad optimizer settings {cfg:?}")));
        }
        Ok(Self {
            cfg,
            params,
            state: BTreeMap::new(),
            step: 0,
        })
    }

    pub fn config(&self) -> &AdamWConfig {
        &self.cfg
    }

    /// Number of updates applied so far.
    pub fn step_count(&self) -> usize {
        self.step
    }

    /// Joint L2 norm of every gradient present in `grads`.
    pub fn grad_norm(&self, grads: &GradStore) -> Result<f64> {
        let mut sq = 0.0;
        for (_, var) in &self.params {
            if let Some(g) = grads.get(var.as_tensor()) {
                sq += g.sqr()?.sum_all()?.to_dtype(DType::F64)?.to_scalar::<f64>()?;
            }
        }
        Ok(sq.sqrt())
    }

    /// Applies one update at learning rate `lr`. Parameters without a gradient, such as a
    /// decoder cut from the loss, are left untouched, weight decay included.
    pub fn step(&mut self, grads: &GradStore, lr: f64) -> Result<StepStats> {
        let grad_norm = self.grad_norm(grads)?;
        if !grad_norm.is_finite() {
            return Err(Error::NonFinite(format!(
                "gradient norm {grad_norm} at optimizer step {}",
                self.step + 1
            )));
        }
        let scale = match self.cfg.clip_norm {
            Some(c) if grad_norm > c => c / (grad_norm + 1e-12),
            _ => 1.0,
        };
        self.step += 1;
        let t = self.step as i32;
        let (b1, b2) = (self.cfg.beta1, self.cfg.beta2);
        let bc1 = 1.0 - b1.powi(t);
        let bc2 = 1.0 - b2.powi(t);
        let mut updated = 0;
        for (name, var) in &self.params {
            let Some(g) = grads.get(var.as_tensor()) else {
                continue;
            };
            let g = if scale != 1.0 { (g * scale)? } else { g.clone() };
            let st = match self.state.remove(name) {
                Some(s) => s,
                None => Moments {
                    m: var.zeros_like()?,
                    v: var.zeros_like()?,
                },
            };
            let m = ((st.m * b1)? + (&g * (1.0 - b1))?)?;
            let v = ((st.v * b2)? + (g.sqr()? * (1.0 - b2))?)?;
            let denom = ((&v / bc2)?.sqrt()? + self.cfg.eps)?;
            let upd = ((&m / bc1)? / denom)?;
            let theta = var.as_tensor();
            let decayed = if self.cfg.weight_decay > 0.0 && theta.rank() >= 2 {
                (theta * (1.0 - lr * self.cfg.weight_decay))?
            } else {
                theta.clone()
            };
            var.set(&(decayed - (upd * lr)?)?)?;
            self.state.insert(name.clone(), Moments { m, v });
            updated += 1;
        }
        Ok(StepStats {
            lr,
            grad_norm,
            updated,
        })
    }

    /// Moments and step counter as named tensors.
    pub fn state_tensors(&self) -> Result<HashMap<String, Tensor>> {
        let mut map = HashMap::new();
        for (k, s) in &self.state {
            map.insert(format!("m.{k}"), s.m.clone());
            map.insert(format!("v.{k}"), s.v.clone());
        }
        map.insert(
            "step".into(),
            Tensor::new(&[self.step as u32], &Device::Cpu)?,
        );
        Ok(map)
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        candle_core::safetensors::save(&self.state_tensors()?, path.as_ref())?;
        Ok(())
    }

    pub fn load(&mut self, path: impl AsRef<Path>) -> Result<()> {
        let device = self
            .params
            .first()
            .map(|(_, v)| v.device().clone())
            .unwrap_or(Device::Cpu);
        let map = candle_core::safetensors::load(path.as_ref(), &device)?;
        self.load_state(map)
    }

    pub fn load_state(&mut self, mut map: HashMap<String, Tensor>) -> Result<()> {
        let step = map
            .remove("step")
            .ok_or_else(|| Error::invalid("optimizer state has no step counter"))?
            .to_vec1::<u32>()?;
        let mut state = BTreeMap::new();
        for (name, var) in &self.params {
            match (map.remove(&format!("m.{name}")), map.remove(&format!("v.{name}"))) {
                (Some(m), Some(v)) => {
                    if m.dims() != var.dims() || v.dims() != var.dims() {
                        return Err(Error::shape(format!("optimizer state for `{name}`")));
                    }
                    let dt = var.dtype();
                    state.insert(
                        name.clone(),
                        Moments {
                            m: m.to_dtype(dt)?,
                            v: v.to_dtype(dt)?,
                        },
                    );
                }
                (None, None) => {}
                _ => return Err(Error::invalid(format!("half of the moments for `{name}`"))),
            }
        }
        if let Some(k) = map.keys().next() {
            return Err(Error::invalid(format!("optimizer state for unknown parameter `{k}`")));
        }
        self.state = state;
        self.step = step.first().copied().unwrap_or(0) as usize;
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn scalar_var(x: f64) -> Var {
        Var::from_tensor(&Tensor::new(&[[x]], &Device::Cpu).unwrap()).unwrap()
    }

    #[test]
    fn first_step_moves_by_lr() {
        // With bias correction the first update is lr * g / (|g| + eps).
        let p = scalar_var(2.0);
        let mut opt = AdamW::new(
            vec![("p".into(), p.clone())],
            AdamWConfig {
                weight_decay: 0.0,
                clip_norm: None,
                ..Default::default()
            },
        )
        .unwrap();
        let loss = p.as_tensor().sqr().unwrap().sum_all().unwrap();
        opt.step(&loss.backward().unwrap(), 0.1).unwrap();
        let v = p.as_tensor().to_vec2::<f64>().unwrap()[0][0];
        assert!((v - 1.9).abs() < 1e-7, "{v}");
    }

    #[test]
    fn decoupled_decay_applies_to_matrices_only() {
        let w = scalar_var(1.0);
        let b = Var::from_tensor(&Tensor::new(&[1.0f64], &Device::Cpu).unwrap()).unwrap();
        let mut opt = AdamW::new(
            vec![("w".into(), w.clone()), ("b".into(), b.clone())],
            AdamWConfig {
                weight_decay: 0.5,
                clip_norm: None,
                ..Default::default()
            },
        )
        .unwrap();
        // Unit gradients: both take a full Adam step, only the matrix also shrinks.
        let loss = (w.as_tensor().sum_all().unwrap() + b.as_tensor().sum_all().unwrap()).unwrap();
        opt.step(&loss.backward().unwrap(), 0.1).unwrap();
        let wv = w.as_tensor().to_vec2::<f64>().unwrap()[0][0];
        let bv = b.as_tensor().to_vec1::<f64>().unwrap()[0];
        assert!((wv - 0.85).abs() < 1e-6, "{wv}");
        assert!((bv - 0.9).abs() < 1e-6, "{bv}");
    }

    #[test]
    fn clipping_reports_raw_norm() {
        let p = scalar_var(3.0);
        let mut opt = AdamW::new(vec![("p".into(), p.clone())], AdamWConfig::default()).unwrap();
        let loss = p.as_tensor().sqr().unwrap().sum_all().unwrap();
        let s = opt.step(&loss.backward().unwrap(), 1e-3).unwrap();
        assert!((s.grad_norm - 6.0).abs() < 1e-12);
        assert_eq!(s.updated, 1);
    }

    #[test]
    fn params_without_gradient_are_untouched() {
        let used = scalar_var(1.0);
        let unused = scalar_var(1.0);
        let mut opt = AdamW::new(
            vec![("a".into(), used.clone()), ("b".into(), unused.clone())],
            AdamWConfig::default(),
        )
        .unwrap();
        let loss = used.as_tensor().sqr().unwrap().sum_all().unwrap();
        let s = opt.step(&loss.backward().unwrap(), 0.1).unwrap();
        assert_eq!(s.updated, 1);
        assert_eq!(unused.as_tensor().to_vec2::<f64>().unwrap()[0][0], 1.0);
    }

    #[test]
    fn state_round_trip_reproduces_updates() {
        let run = |restore: bool| {
            let p = scalar_var(1.5);
            let mut opt =
                AdamW::new(vec![("p".into(), p.clone())], AdamWConfig::default()).unwrap();
            for i in 0..6 {
                if restore && i == 3 {
                    let state = opt.state_tensors().unwrap();
                    let mut fresh =
                        AdamW::new(vec![("p".into(), p.clone())], AdamWConfig::default()).unwrap();
                    fresh.load_state(state).unwrap();
                    opt = fresh;
                }
                let loss = p.as_tensor().powf(4.0).unwrap().sum_all().unwrap();
                opt.step(&loss.backward().unwrap(), 0.05).unwrap();
            }
            p.as_tensor().to_vec2::<f64>().unwrap()[0][0]
        };
        assert_eq!(run(false).to_bits(), run(true).to_bits());
    }

    #[test]
    fn cosine_endpoints() {
        assert_eq!(cosine_lr(1e-3, 0, 100), 1e-3);
        assert!((cosine_lr(1e-3, 50, 100) - 5e-4).abs() < 1e-15);
        assert!(cosine_lr(1e-3, 100, 100).abs() < 1e-18);
        assert!(cosine_lr(1e-3, 200, 100).abs() < 1e-18);
    }

    #[test]
    fn rejects_bad_settings() {
        for cfg in [
            AdamWConfig { lr: 0.0, ..Default::default() },
            AdamWConfig { beta1: 1.0, ..Default::default() },
            AdamWConfig { clip_norm: Some(0.0), ..Default::default() },
        ] {
            assert!(AdamW::new(vec![], cfg).is_err());
        }
    }

    #[test]
    fn nan_gradient_is_an_error() {
        let p = scalar_var(1.0);
        let mut opt = AdamW::new(vec![("p".into(), p.clone())], AdamWConfig::default()).unwrap();
        let loss = (p.as_tensor() * f64::NAN).unwrap().sum_all().unwrap();
        assert!(matches!(
            opt.step(&loss.backward().unwrap(), 0.1),
            Err(Error::NonFinite(_))
        ));
    }
}

//! Central finite differences against autodiff.

use candle_core::{DType, Tensor};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::ParamStore;
use crate::error::Result;

#[derive(Debug, Clone)]
pub(crate) struct Probe {
    pub name: String,
    pub analytic: f64,
    pub numeric: f64,
}

impl Probe {
    /// `|a - n| / max(|a|, |n|, floor)`.
    pub fn rel_error(&self, floor: f64) -> f64 {
        let scale = self.analytic.abs().max(self.numeric.abs()).max(floor);
        (self.analytic - self.numeric).abs() / scale
    }
}

fn scalar(t: &Tensor) -> Result<f64> {
    Ok(t.to_dtype(DType::F64)?.to_scalar::<f64>()?)
}

/// `n` scalar positions drawn uniformly over all parameters whose name passes `keep`.
pub(crate) fn pick(
    store: &ParamStore,
    n: usize,
    seed: u64,
    keep: impl Fn(&str) -> bool,
) -> Vec<(String, usize)> {
    let vars: Vec<_> = store.vars().into_iter().filter(|(k, _)| keep(k)).collect();
    let total: usize = vars.iter().map(|(_, v)| v.elem_count()).sum();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..n)
        .map(|_| {
            let mut i = rng.random_range(0..total);
            for (k, v) in &vars {
                if i < v.elem_count() {
                    return (k.clone(), i);
                }
                i -= v.elem_count();
            }
            unreachable!()
        })
        .collect()
}

/// Compares the autodiff gradient of `loss` with `(L(p + eps) - L(p - eps)) / 2 eps` at each
/// chosen scalar. Parameters are restored afterwards.
pub(crate) fn check(
    store: &ParamStore,
    loss: impl Fn() -> Result<Tensor>,
    picks: &[(String, usize)],
    eps: f64,
) -> Result<Vec<Probe>> {
    let grads = loss()?.backward()?;
    let mut out = Vec::with_capacity(picks.len());
    for (name, index) in picks {
        let var = store.get(name).expect("picked parameter exists");
        let analytic = match grads.get(var.as_tensor()) {
            Some(g) => g.flatten_all()?.to_dtype(DType::F64)?.to_vec1::<f64>()?[*index],
            None => 0.0,
        };
        let orig = var.as_tensor().copy()?;
        let flat = orig.flatten_all()?.to_dtype(DType::F64)?.to_vec1::<f64>()?;
        let eval_at = |delta: f64| -> Result<f64> {
            let mut v = flat.clone();
            v[*index] += delta;
            let t = Tensor::from_vec(v, orig.shape(), orig.device())?.to_dtype(orig.dtype())?;
            var.set(&t)?;
            scalar(&loss()?)
        };
        let numeric = (eval_at(eps)? - eval_at(-eps)?) / (2.0 * eps);
        var.set(&orig)?;
        out.push(Probe {
            name: name.clone(),
            analytic,
            numeric,
        });
    }
    Ok(out)
}

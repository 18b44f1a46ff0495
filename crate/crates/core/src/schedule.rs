//! Variance schedule and the closed-form forward/reverse transitions on masks.
//!
//! The schedule is defined in log-SNR space: a cosine log-SNR curve bounded to
//! `[-LOG_SNR_BOUND, LOG_SNR_BOUND]`, plus an additive shift. `alpha_bar(t)` is the logistic of
//! the shifted curve at `u = t / t_train`; `alpha_bar(0) = 1`.

use candle_core::Tensor;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Magnitude bound of the unshifted cosine log-SNR curve.
pub const LOG_SNR_BOUND: f64 = 15.0;

/// The default log-SNR shift, `-2 ln 6`.
pub fn default_snr_shift() -> f64 {
    -2.0 * 6f64.ln()
}

/// Serialized form of a schedule. The sequences are always rebuilt from these two numbers.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ScheduleConfig {
    pub t_train: usize,
    pub snr_shift: f64,
}

impl Default for ScheduleConfig {
    fn default() -> Self {
        Self {
            t_train: 1000,
            snr_shift: default_snr_shift(),
        }
    }
}

/// Unshifted cosine log-SNR at `u in [0, 1]`, reparameterized so that
/// `logsnr(0) = LOG_SNR_BOUND` and `logsnr(1) = -LOG_SNR_BOUND`. The curve is
/// `-2 ln tan(a u + b)`, which is `-2 ln tan(pi u / 2)` up to the endpoint bounds and is
/// exactly zero at `u = 1/2`.
pub fn cosine_log_snr(u: f64) -> f64 {
    let b = (-LOG_SNR_BOUND / 2.0).exp().atan();
    let a = (LOG_SNR_BOUND / 2.0).exp().atan() - b;
    -2.0 * (a * u + b).tan().ln()
}

/// `1 - ab_t / ab_s`. Near `ab ~ 1` the difference is formed from the complements so that
/// small betas keep their precision.
fn stride_beta(ab: &[f64], om: &[f64], t: usize, s: usize) -> f64 {
    if ab[s] > 0.5 {
        (om[t] - om[s]) / ab[s]
    } else {
        1.0 - ab[t] / ab[s]
    }
}

fn logistic(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct DiffusionSchedule {
    config: ScheduleConfig,
    log_snr: Vec<f64>,
    alpha_bar: Vec<f64>,
    one_minus_alpha_bar: Vec<f64>,
    beta: Vec<f64>,
    posterior_var: Vec<f64>,
}

/// How a reverse transition between two (possibly non-adjacent) timesteps is taken.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ReverseKind {
    /// Gaussian posterior `q(x_s | x_t, x0_hat)` with the strided `alpha`/`beta`.
    #[default]
    Ancestral,
    /// Deterministic DDIM update (eta = 0).
    Ddim,
}

/// Mean coefficients and variance of the reverse transition `t -> s`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PosteriorCoeffs {
    pub coef_xt: f64,
    pub coef_x0: f64,
    pub var: f64,
}

/// A mask in signal space together with its diffusion timestep.
#[derive(Debug, Clone)]
pub struct NoisyMask {
    pub values: Tensor,
    pub t: usize,
}

impl NoisyMask {
    /// Encodes a binary mask `M` as `x0 = 2 M - 1`.
    pub fn from_binary(mask: &Tensor) -> Result<Self> {
        Ok(Self {
            values: mask.affine(2.0, -1.0)?,
            t: 0,
        })
    }
}

impl DiffusionSchedule {
    pub fn new(t_train: usize, snr_shift: f64) -> Result<Self> {
        if t_train < 2 {
            return Err(Error::invalid(format!(
                "t_train must be at least 2, got {t_train}"
            )));
        }
        if !snr_shift.is_finite() {
            return Err(Error::invalid(format!(
                "snr_shift must be finite, got {snr_shift}"
            )));
        }
        let n = t_train + 1;
        let mut log_snr = vec![f64::INFINITY; n];
        let mut alpha_bar = vec![1.0; n];
        let mut one_minus = vec![0.0; n];
        let mut beta = vec![0.0; n];
        let mut posterior_var = vec![0.0; n];
        for t in 1..n {
            let l = cosine_log_snr(t as f64 / t_train as f64) + snr_shift;
            log_snr[t] = l;
            alpha_bar[t] = logistic(l);
            one_minus[t] = logistic(-l);
        }
        for t in 1..n {
            let b = stride_beta(&alpha_bar, &one_minus, t, t - 1);
            beta[t] = b;
            posterior_var[t] = one_minus[t - 1] / one_minus[t] * b;
        }
        Ok(Self {
            config: ScheduleConfig {
                t_train,
                snr_shift,
            },
            log_snr,
            alpha_bar,
            one_minus_alpha_bar: one_minus,
            beta,
            posterior_var,
        })
    }

    pub fn from_config(cfg: &ScheduleConfig) -> Result<Self> {
        Self::new(cfg.t_train, cfg.snr_shift)
    }

    pub fn config(&self) -> ScheduleConfig {
        self.config
    }

    pub fn t_train(&self) -> usize {
        self.config.t_train
    }

    pub fn snr_shift(&self) -> f64 {
        self.config.snr_shift
    }

    fn check_t(&self, t: usize, lo: usize) -> Result<()> {
        if t < lo || t > self.config.t_train {
            return Err(Error::Timestep {
                t,
                lo,
                hi: self.config.t_train,
            });
        }
        Ok(())
    }

    /// `alpha_bar(t)` for `t in 0..=t_train`.
    pub fn alpha_bar(&self, t: usize) -> f64 {
        self.alpha_bar[t]
    }

    pub fn one_minus_alpha_bar(&self, t: usize) -> f64 {
        self.one_minus_alpha_bar[t]
    }

    /// `beta(t)` for `t in 1..=t_train`.
    pub fn beta(&self, t: usize) -> f64 {
        self.beta[t]
    }

    /// Posterior variance of the adjacent transition `t -> t-1`. Zero at `t = 1`.
    pub fn posterior_var(&self, t: usize) -> f64 {
        self.posterior_var[t]
    }

    /// The shifted log-SNR at `t >= 1`.
    pub fn log_snr(&self, t: usize) -> f64 {
        self.log_snr[t]
    }

    pub fn snr(&self, t: usize) -> f64 {
        self.alpha_bar[t] / self.one_minus_alpha_bar[t]
    }

    /// Coefficients of the reverse transition from `t` to `s < t`, using
    /// `alpha = alpha_bar(t) / alpha_bar(s)` and `beta = 1 - alpha` for the stride.
    pub fn posterior_coeffs(&self, t: usize, s: usize) -> Result<PosteriorCoeffs> {
        self.check_t(t, 1)?;
        if s >= t {
            return Err(Error::invalid(format!(
                "reverse step must go backwards, got {t} -> {s}"
            )));
        }
        let ab_t = self.alpha_bar[t];
        let ab_s = self.alpha_bar[s];
        let om_t = self.one_minus_alpha_bar[t];
        let om_s = self.one_minus_alpha_bar[s];
        let alpha = ab_t / ab_s;
        let beta = stride_beta(&self.alpha_bar, &self.one_minus_alpha_bar, t, s);
        Ok(PosteriorCoeffs {
            coef_xt: alpha.sqrt() * om_s / om_t,
            coef_x0: ab_s.sqrt() * beta / om_t,
            var: om_s / om_t * beta,
        })
    }

    /// Closed-form `q(x_t | x0)`: `sqrt(ab_t) x0 + sqrt(1 - ab_t) noise`.
    pub fn add_noise(&self, x0: &NoisyMask, t: usize, noise: &Tensor) -> Result<NoisyMask> {
        if x0.t != 0 {
            return Err(Error::invalid(format!(
                "add_noise expects a clean mask (t = 0), got t = {}",
                x0.t
            )));
        }
        self.check_t(t, 1)?;
        if x0.values.dims() != noise.dims() {
            return Err(Error::shape(format!(
                "noise {:?} vs mask {:?}",
                noise.dims(),
                x0.values.dims()
            )));
        }
        let values = ((&x0.values * self.alpha_bar[t].sqrt())?
            + (noise * self.one_minus_alpha_bar[t].sqrt())?)?;
        Ok(NoisyMask { values, t })
    }

    /// Batched `q(x_t | x0)` with one timestep per leading-dimension entry.
    pub fn add_noise_batch(&self, x0: &Tensor, ts: &[usize], noise: &Tensor) -> Result<Tensor> {
        let b = x0.dim(0)?;
        if ts.len() != b {
            return Err(Error::shape(format!("{} timesteps for batch of {b}", ts.len())));
        }
        if x0.dims() != noise.dims() {
            return Err(Error::shape(format!(
                "noise {:?} vs mask {:?}",
                noise.dims(),
                x0.dims()
            )));
        }
        for &t in ts {
            self.check_t(t, 1)?;
        }
        let mut bshape = vec![1usize; x0.rank()];
        bshape[0] = b;
        let sa: Vec<f64> = ts.iter().map(|&t| self.alpha_bar[t].sqrt()).collect();
        let so: Vec<f64> = ts
            .iter()
            .map(|&t| self.one_minus_alpha_bar[t].sqrt())
            .collect();
        let dev = x0.device();
        let sa = Tensor::from_vec(sa, bshape.as_slice(), dev)?.to_dtype(x0.dtype())?;
        let so = Tensor::from_vec(so, bshape.as_slice(), dev)?.to_dtype(x0.dtype())?;
        Ok((x0.broadcast_mul(&sa)? + noise.broadcast_mul(&so)?)?)
    }

    /// Adjacent reverse transition `t -> t-1`; `z` may be `None` for the mean.
    pub fn posterior_step(
        &self,
        x_t: &NoisyMask,
        x0_hat: &Tensor,
        z: Option<&Tensor>,
    ) -> Result<NoisyMask> {
        if x_t.t == 0 {
            return Err(Error::Timestep {
                t: 0,
                lo: 1,
                hi: self.config.t_train,
            });
        }
        self.reverse_to(x_t, x0_hat, x_t.t - 1, z, ReverseKind::Ancestral)
    }

    /// Reverse transition from `x_t.t` to `s`. `x0_hat` is clamped to `[-1, 1]`. Landing on
    /// `s = 0` returns the clamped `x0_hat` exactly.
    pub fn reverse_to(
        &self,
        x_t: &NoisyMask,
        x0_hat: &Tensor,
        s: usize,
        z: Option<&Tensor>,
        kind: ReverseKind,
    ) -> Result<NoisyMask> {
        let t = x_t.t;
        self.check_t(t, 1)?;
        if x0_hat.dims() != x_t.values.dims() {
            return Err(Error::shape(format!(
                "x0_hat {:?} vs x_t {:?}",
                x0_hat.dims(),
                x_t.values.dims()
            )));
        }
        if let Some(z) = z {
            if z.dims() != x_t.values.dims() {
                return Err(Error::shape(format!(
                    "z {:?} vs x_t {:?}",
                    z.dims(),
                    x_t.values.dims()
                )));
            }
        }
        let x0_hat = x0_hat.clamp(-1.0, 1.0)?;
        if s == 0 {
            return Ok(NoisyMask {
                values: x0_hat,
                t: 0,
            });
        }
        let values = match kind {
            ReverseKind::Ancestral => {
                let c = self.posterior_coeffs(t, s)?;
                let mean = ((&x_t.values * c.coef_xt)? + (&x0_hat * c.coef_x0)?)?;
                match z {
                    Some(z) if c.var > 0.0 => (mean + (z * c.var.sqrt())?)?,
                    _ => mean,
                }
            }
            ReverseKind::Ddim => {
                let sa_t = self.alpha_bar[t].sqrt();
                let so_t = self.one_minus_alpha_bar[t].sqrt();
                let eps = ((&x_t.values - (&x0_hat * sa_t)?)? / so_t)?;
                ((&x0_hat * self.alpha_bar[s].sqrt())?
                    + (eps * self.one_minus_alpha_bar[s].sqrt())?)?
            }
        };
        Ok(NoisyMask { values, t: s })
    }
}

/// Uniformly spaced, strictly decreasing timesteps from `t_train` down to 1:
/// `round(linspace(t_train, 1, t_sample))`.
pub fn sampling_subsequence(t_train: usize, t_sample: usize) -> Result<Vec<usize>> {
    if t_sample == 0 || t_sample > t_train {
        return Err(Error::invalid(format!(
            "need 1 <= t_sample <= t_train, got t_sample = {t_sample}, t_train = {t_train}"
        )));
    }
    if t_sample == 1 {
        return Ok(vec![t_train]);
    }
    let step = (t_train - 1) as f64 / (t_sample - 1) as f64;
    Ok((0..t_sample)
        .map(|i| (t_train as f64 - step * i as f64).round() as usize)
        .collect())
}

/// Reverse-transition pairs `(t_i, t_{i+1})` of a subsequence, ending with `(t_last, 0)`.
pub fn transition_pairs(seq: &[usize]) -> Vec<(usize, usize)> {
    seq.iter()
        .enumerate()
        .map(|(i, &t)| (t, seq.get(i + 1).copied().unwrap_or(0)))
        .collect()
}

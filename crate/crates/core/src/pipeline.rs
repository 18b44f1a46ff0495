//! Training loop, reverse-chain sampler, ensembles and checkpoints.

use std::path::Path;

use candle_core::{DType, Device, Tensor};
use ndarray::Array2;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::data::{self, Sample};
use crate::denoiser::logits_to_x0hat;
use crate::error::{Error, Result};
use crate::losses::{self, LossWeights};
use crate::model::{LocalizationModel, ModelConfig, DENOISER};
use crate::nn::{self, derive_seed};
use crate::optim::{cosine_lr, AdamW, AdamWConfig};
use crate::schedule::{self, default_snr_shift, DiffusionSchedule, NoisyMask, ReverseKind};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LrSchedule {
    #[default]
    Cosine,
    Constant,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    /// Overrides `epochs` when set.
    pub max_steps: Option<usize>,
    pub lr: f64,
    pub lr_schedule: LrSchedule,
    pub weight_decay: f64,
    pub clip_norm: Option<f64>,
    pub t_train: usize,
    pub t_sample: usize,
    pub snr_shift: f64,
    pub reverse: ReverseKind,
    pub lambda_mask: f64,
    pub mu_edge: f64,
    pub seed: u64,
    pub dmfe_on: bool,
    pub es_on: bool,
    pub model: ModelConfig,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            epochs: 150,
            batch_size: 32,
            max_steps: None,
            lr: 1e-3,
            lr_schedule: LrSchedule::Cosine,
            weight_decay: 0.01,
            clip_norm: Some(1.0),
            t_train: 1000,
            t_sample: 10,
            snr_shift: default_snr_shift(),
            reverse: ReverseKind::Ancestral,
            lambda_mask: 0.7,
            mu_edge: 0.3,
            seed: 0,
            dmfe_on: true,
            es_on: true,
            model: ModelConfig::default(),
        }
    }
}

impl TrainConfig {
    /// Settings sized for a single CPU: batch 8, at most 50 epochs.
    pub fn desk() -> Self {
        Self {
            epochs: 50,
            batch_size: 8,
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::invalid(format!("train config: {m}")));
        if self.batch_size == 0 {
            return bad("batch_size must be positive");
        }
        if self.epochs == 0 && self.max_steps.is_none() {
            return bad("epochs must be positive");
        }
        if self.max_steps == Some(0) {
            return bad("max_steps must be positive");
        }
        if !(self.lr > 0.0) {
            return bad("lr must be positive");
        }
        if self.t_sample == 0 || self.t_sample > self.t_train {
            return bad("need 1 <= t_sample <= t_train");
        }
        if !(self.lambda_mask >= 0.0 && self.mu_edge >= 0.0) {
            return bad("loss weights must be non-negative");
        }
        Ok(())
    }

    /// The model configuration with the ablation flags applied.
    pub fn model_config(&self) -> ModelConfig {
        let mut m = self.model.clone();
        m.conditions.dmfe = self.dmfe_on;
        m
    }

    /// Loss weights with edge supervision removed when `es_on` is false.
    pub fn loss_weights(&self) -> LossWeights {
        LossWeights {
            lambda_mask: self.lambda_mask,
            mu_edge: if self.es_on { self.mu_edge } else { 0.0 },
        }
    }

    pub fn schedule(&self) -> Result<DiffusionSchedule> {
        DiffusionSchedule::new(self.t_train, self.snr_shift)
    }

    pub fn sampler(&self) -> SamplerConfig {
        SamplerConfig {
            t_sample: self.t_sample,
            reverse: self.reverse,
        }
    }

    pub fn total_steps(&self, dataset_len: usize) -> usize {
        self.max_steps
            .unwrap_or_else(|| self.epochs * dataset_len.div_ceil(self.batch_size).max(1))
    }

    /// Short hex digest of this config together with the dataset seed.
    pub fn fingerprint(&self, dataset_seed: u64) -> String {
        let mut h = Sha256::new();
        h.update(serde_json::to_vec(self).expect("config serializes"));
        h.update(dataset_seed.to_le_bytes());
        hex::encode(&h.finalize()[..8])
    }

    pub fn from_json_file(path: &Path) -> Result<Self> {
        let cfg: Self = serde_json::from_str(&std::fs::read_to_string(path)?)?;
        cfg.validate()?;
        Ok(cfg)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct StepReport {
    pub step: usize,
    pub loss: f64,
    pub lr: f64,
    pub grad_norm: f64,
    pub ts: Vec<usize>,
}

pub struct Trainer {
    cfg: TrainConfig,
    model: LocalizationModel,
    sched: DiffusionSchedule,
    opt: AdamW,
    total_steps: usize,
}

impl Trainer {
    /// A freshly initialized model; `total_steps` sets the length of the learning-rate decay.
    pub fn new(cfg: &TrainConfig, total_steps: usize, device: &Device) -> Result<Self> {
        cfg.validate()?;
        let model = LocalizationModel::new(&cfg.model_config(), cfg.seed, DType::F32, device)?;
        Self::with_model(cfg, model, total_steps)
    }

    pub fn with_model(cfg: &TrainConfig, model: LocalizationModel, total_steps: usize) -> Result<Self> {
        cfg.validate()?;
        let opt = AdamW::new(
            model.store().vars(),
            AdamWConfig {
                lr: cfg.lr,
                weight_decay: cfg.weight_decay,
                clip_norm: cfg.clip_norm,
                ..Default::default()
            },
        )?;
        Ok(Self {
            sched: cfg.schedule()?,
            cfg: cfg.clone(),
            model,
            opt,
            total_steps: total_steps.max(1),
        })
    }

    pub fn config(&self) -> &TrainConfig {
        &self.cfg
    }

    pub fn model(&self) -> &LocalizationModel {
        &self.model
    }

    pub fn schedule(&self) -> &DiffusionSchedule {
        &self.sched
    }

    /// Completed optimizer steps.
    pub fn step(&self) -> usize {
        self.opt.step_count()
    }

    pub fn total_steps(&self) -> usize {
        self.total_steps
    }

    pub fn current_lr(&self) -> f64 {
        match self.cfg.lr_schedule {
            LrSchedule::Cosine => cosine_lr(self.cfg.lr, self.step(), self.total_steps),
            LrSchedule::Constant => self.cfg.lr,
        }
    }

    /// Per-example timesteps and noise for the next step, drawn from a stream keyed by
    /// `(seed, step, index)`.
    fn draw_noise(&self, b: usize, h: usize, w: usize) -> Result<(Vec<usize>, Tensor)> {
        let step = self.step();
        let mut ts = Vec::with_capacity(b);
        let mut noise = Vec::with_capacity(b * h * w);
        for i in 0..b {
            let mut rng =
                ChaCha8Rng::seed_from_u64(derive_seed(self.cfg.seed, &format!("train/{step}/{i}")));
            ts.push(rng.random_range(1..=self.cfg.t_train));
            noise.extend((0..h * w).map(|_| rng.sample::<f32, _>(StandardNormal)));
        }
        let noise = Tensor::from_vec(noise, (b, 1, h, w), self.model.device())?;
        Ok((ts, noise))
    }

    /// Loss of a batch at the timesteps and noise the next step would use, without updating.
    pub fn batch_loss(&self, batch: &[&Sample]) -> Result<(Tensor, Vec<usize>)> {
        let dev = self.model.device().clone();
        let dt = self.model.dtype();
        let image = data::images_tensor(batch, dt, &dev)?;
        let gt_mask = data::maps_tensor(batch, |s| &s.gt_mask, dt, &dev)?;
        let gt_edge = data::maps_tensor(batch, |s| &s.gt_edge, dt, &dev)?;
        let (b, _, h, w) = gt_mask.dims4()?;
        let (ts, noise) = self.draw_noise(b, h, w)?;
        let x0 = NoisyMask::from_binary(&gt_mask)?.values;
        let x_t = self.sched.add_noise_batch(&x0, &ts, &noise.to_dtype(dt)?)?;
        let out = self.model.forward(&image, &x_t, &ts, self.cfg.t_train)?;
        let loss = losses::total_loss(&out.denoised, &gt_mask, &gt_edge, &self.cfg.loss_weights())?;
        Ok((loss, ts))
    }

    /// One optimizer update on `batch`.
    pub fn train_step(&mut self, batch: &[&Sample]) -> Result<StepReport> {
        let (loss, ts) = self.batch_loss(batch)?;
        let lr = self.current_lr();
        let value = loss.to_dtype(DType::F64)?.to_scalar::<f64>()?;
        let grads = loss.backward()?;
        let grad_norm = self.opt.grad_norm(&grads)?;
        let step = self.step() + 1;
        if !value.is_finite() || !grad_norm.is_finite() {
            return Err(Error::Diverged {
                step,
                loss: value,
                lr,
                grad_norm,
                ts,
            });
        }
        self.opt.step(&grads, lr)?;
        Ok(StepReport {
            step,
            loss: value,
            lr,
            grad_norm,
            ts,
        })
    }

    /// Trains until `total_steps`, reshuffling `data` each epoch. `on_step` sees every report.
    pub fn fit(
        &mut self,
        data: &[Sample],
        mut on_step: impl FnMut(&StepReport),
    ) -> Result<Vec<StepReport>> {
        if data.is_empty() {
            return Err(Error::invalid("empty training set"));
        }
        let mut reports = Vec::new();
        while self.step() < self.total_steps {
            let idx = epoch_batch(&self.cfg, data.len(), self.step());
            let batch: Vec<&Sample> = idx.iter().map(|&i| &data[i]).collect();
            let r = self.train_step(&batch)?;
            on_step(&r);
            reports.push(r);
        }
        Ok(reports)
    }

    pub fn save_checkpoint(&self, dir: &Path) -> Result<()> {
        std::fs::create_dir_all(dir)?;
        self.model.store().save(dir.join(WEIGHTS))?;
        self.opt.save(dir.join(OPTIMIZER))?;
        std::fs::write(dir.join(CONFIG), serde_json::to_string_pretty(&self.cfg)?)?;
        std::fs::write(
            dir.join(STEP),
            format!("{}\n{}\n", self.step(), self.total_steps),
        )?;
        Ok(())
    }

    /// Restores model weights, optimizer moments and the step counter.
    pub fn resume(dir: &Path, device: &Device) -> Result<Self> {
        let ck = Checkpoint::load(dir, device)?;
        let mut t = Self::with_model(&ck.config, ck.model, ck.total_steps)?;
        t.opt.load(dir.join(OPTIMIZER))?;
        if t.step() != ck.step {
            return Err(Error::invalid(format!(
                "checkpoint step {} disagrees with optimizer step {}",
                ck.step,
                t.step()
            )));
        }
        Ok(t)
    }
}

/// Indices of the examples `Trainer::fit` uses at `step` over a dataset of `n` examples. Each
/// epoch is a fresh permutation; the last batch of an epoch may be short.
pub fn epoch_batch(cfg: &TrainConfig, n: usize, step: usize) -> Vec<usize> {
    let bs = cfg.batch_size.min(n).max(1);
    let per_epoch = n.div_ceil(bs);
    let within = step % per_epoch;
    let order = epoch_order(cfg.seed, step / per_epoch, n);
    order[within * bs..((within + 1) * bs).min(n)].to_vec()
}

fn epoch_order(seed: u64, epoch: usize, n: usize) -> Vec<usize> {
    use rand::seq::SliceRandom;
    let mut order: Vec<usize> = (0..n).collect();
    let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(seed, &format!("epoch/{epoch}")));
    order.shuffle(&mut rng);
    order
}

pub const WEIGHTS: &str = "weights.safetensors";
pub const OPTIMIZER: &str = "optimizer.safetensors";
pub const CONFIG: &str = "config.json";
pub const STEP: &str = "step";

/// A checkpoint directory loaded for inference.
pub struct Checkpoint {
    pub config: TrainConfig,
    pub model: LocalizationModel,
    pub step: usize,
    pub total_steps: usize,
}

impl Checkpoint {
    pub fn load(dir: &Path, device: &Device) -> Result<Self> {
        for f in [WEIGHTS, CONFIG, STEP] {
            if !dir.join(f).is_file() {
                return Err(Error::MissingCheckpoint(dir.join(f)));
            }
        }
        let config: TrainConfig = serde_json::from_str(&std::fs::read_to_string(dir.join(CONFIG))?)?;
        config.validate()?;
        let model = LocalizationModel::new(&config.model_config(), config.seed, DType::F32, device)?;
        model.store().load(dir.join(WEIGHTS))?;
        let text = std::fs::read_to_string(dir.join(STEP))?;
        let mut nums = text.split_whitespace().map(|s| {
            s.parse::<usize>()
                .map_err(|e| Error::invalid(format!("step file: {e}")))
        });
        let step = nums.next().ok_or_else(|| Error::invalid("empty step file"))??;
        let total_steps = nums.next().transpose()?.unwrap_or(step);
        Ok(Self {
            config,
            model,
            step,
            total_steps,
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct SamplerConfig {
    pub t_sample: usize,
    pub reverse: ReverseKind,
}

impl Default for SamplerConfig {
    fn default() -> Self {
        Self {
            t_sample: 10,
            reverse: ReverseKind::Ancestral,
        }
    }
}

/// One stage of the reverse chain: the input `x_t` and what the denoiser made of it.
#[derive(Debug, Clone, PartialEq)]
pub struct TraceStep {
    pub t: usize,
    pub x_t: Array2<f32>,
    pub x0_hat: Array2<f32>,
    /// Edge probabilities.
    pub edge: Array2<f32>,
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct SampleTrace {
    pub steps: Vec<TraceStep>,
}

impl SampleTrace {
    pub fn len(&self) -> usize {
        self.steps.len()
    }

    pub fn is_empty(&self) -> bool {
        self.steps.is_empty()
    }

    pub fn timesteps(&self) -> Vec<usize> {
        self.steps.iter().map(|s| s.t).collect()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SampleOutput {
    /// Tamper probability per pixel, `(x0_hat + 1) / 2` of the last stage.
    pub prob: Array2<f32>,
    pub trace: Option<SampleTrace>,
}

fn to_maps(t: &Tensor) -> Result<Vec<Array2<f32>>> {
    let (b, _, h, w) = t.dims4()?;
    let v = t.to_dtype(DType::F32)?.flatten_all()?.to_vec1::<f32>()?;
    Ok((0..b)
        .map(|i| Array2::from_shape_vec((h, w), v[i * h * w..(i + 1) * h * w].to_vec()).expect("shape"))
        .collect())
}

fn ensure_finite(t: &Tensor, what: &str) -> Result<()> {
    let s = t.to_dtype(DType::F64)?.sum_all()?.to_scalar::<f64>()?;
    if !s.is_finite() {
        return Err(Error::NonFinite(what.to_string()));
    }
    Ok(())
}

/// Runs the reverse chain for a batch of images (`b x 3 x h x w` in `[0, 1]`). Image `i` draws
/// all of its noise from a ChaCha stream seeded with `seeds[i]`.
pub fn sample_batch(
    model: &LocalizationModel,
    sched: &DiffusionSchedule,
    cfg: &SamplerConfig,
    images: &Tensor,
    seeds: &[u64],
    keep_trace: bool,
) -> Result<Vec<SampleOutput>> {
    let (b, c, h, w) = images.dims4()?;
    if c != 3 {
        return Err(Error::shape(format!("expected 3 image channels, got {c}")));
    }
    if seeds.len() != b {
        return Err(Error::shape(format!("{} seeds for {b} images", seeds.len())));
    }
    if h % 32 != 0 || w % 32 != 0 {
        return Err(Error::shape(format!("image {h}x{w} must be a multiple of 32")));
    }
    let seq = schedule::sampling_subsequence(sched.t_train(), cfg.t_sample)?;
    let dev = model.device();
    let dt = model.dtype();
    let mut rngs: Vec<ChaCha8Rng> = seeds.iter().map(|&s| ChaCha8Rng::seed_from_u64(s)).collect();
    let gauss = |rngs: &mut [ChaCha8Rng]| -> Result<Tensor> {
        let mut v = Vec::with_capacity(b * h * w);
        for r in rngs.iter_mut() {
            v.extend((0..h * w).map(|_| r.sample::<f32, _>(StandardNormal)));
        }
        Ok(Tensor::from_vec(v, (b, 1, h, w), dev)?.to_dtype(dt)?)
    };
    let images = images.to_dtype(dt)?;
    let mut x = NoisyMask {
        values: gauss(&mut rngs)?,
        t: seq[0],
    };
    let mut traces: Vec<SampleTrace> = vec![SampleTrace::default(); if keep_trace { b } else { 0 }];
    let mut last_x0 = None;
    for (k, (t, s)) in schedule::transition_pairs(&seq).into_iter().enumerate() {
        let ts = vec![t; b];
        let out = model.forward(&images, &x.values, &ts, sched.t_train())?;
        let x0_hat = logits_to_x0hat(&out.denoised.mask_logits)?.detach();
        ensure_finite(&x0_hat, &format!("sampling stage {k} (t = {t})"))?;
        if keep_trace {
            let xs = to_maps(&x.values)?;
            let x0s = to_maps(&x0_hat)?;
            let es = to_maps(&nn::sigmoid(&out.denoised.edge_logits)?)?;
            for (i, tr) in traces.iter_mut().enumerate() {
                tr.steps.push(TraceStep {
                    t,
                    x_t: xs[i].clone(),
                    x0_hat: x0s[i].clone(),
                    edge: es[i].clone(),
                });
            }
        }
        let z = if s > 0 && cfg.reverse == ReverseKind::Ancestral {
            Some(gauss(&mut rngs)?)
        } else {
            None
        };
        x = sched.reverse_to(&x, &x0_hat, s, z.as_ref(), cfg.reverse)?;
        ensure_finite(&x.values, &format!("sampling stage {k} (t = {t} -> {s})"))?;
        last_x0 = Some(x0_hat);
    }
    let x0 = last_x0.expect("at least one stage").clamp(-1.0, 1.0)?;
    let probs = to_maps(&x0.affine(0.5, 0.5)?)?;
    let mut traces = traces.into_iter();
    Ok(probs
        .into_iter()
        .map(|prob| SampleOutput {
            prob,
            trace: if keep_trace { traces.next() } else { None },
        })
        .collect())
}

fn single_image(model: &LocalizationModel, image: &ndarray::Array3<f32>) -> Result<Tensor> {
    let (h, w, c) = image.dim();
    let v: Vec<f32> = image.view().permuted_axes([2, 0, 1]).iter().copied().collect();
    Ok(Tensor::from_vec(v, (1, c, h, w), model.device())?.to_dtype(model.dtype())?)
}

/// One reverse chain for one `h x w x 3` image.
pub fn sample(
    model: &LocalizationModel,
    sched: &DiffusionSchedule,
    cfg: &SamplerConfig,
    image: &ndarray::Array3<f32>,
    seed: u64,
) -> Result<SampleOutput> {
    let t = single_image(model, image)?;
    Ok(sample_batch(model, sched, cfg, &t, &[seed], true)?.remove(0))
}

#[derive(Debug, Clone, PartialEq)]
pub struct Ensemble {
    pub mean: Array2<f32>,
    /// Population variance across members.
    pub var: Array2<f32>,
    pub members: usize,
}

/// Pixel-wise mean and variance of `k` chains seeded `seed, seed + 1, ..`.
pub fn sample_ensemble(
    model: &LocalizationModel,
    sched: &DiffusionSchedule,
    cfg: &SamplerConfig,
    image: &ndarray::Array3<f32>,
    k: usize,
    seed: u64,
) -> Result<Ensemble> {
    if k == 0 {
        return Err(Error::invalid("ensemble size must be at least 1"));
    }
    let t = single_image(model, image)?;
    let mut probs = Vec::with_capacity(k);
    for j in 0..k {
        let out = sample_batch(model, sched, cfg, &t, &[seed + j as u64], false)?;
        probs.push(out.into_iter().next().expect("one output").prob);
    }
    let n = k as f32;
    let mean = probs.iter().fold(Array2::zeros(probs[0].dim()), |acc, p| acc + p) / n;
    let var = probs
        .iter()
        .fold(Array2::zeros(mean.dim()), |acc: Array2<f32>, p| acc + (p - &mean).mapv(|d| d * d))
        / n;
    let mean = if k == 1 { probs.remove(0) } else { mean };
    Ok(Ensemble {
        mean,
        var,
        members: k,
    })
}

/// Parameter names of the edge decoder.
pub fn edge_decoder_prefix() -> String {
    format!("{DENOISER}.{}.", crate::denoiser::EDGE_DECODER)
}

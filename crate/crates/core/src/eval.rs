//! Pixel AUC, evaluation reports, robustness and ablation harnesses, and figure rendering.

use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use image::{GrayImage, Luma, Rgb, RgbImage};
use imageproc::drawing::{draw_filled_circle_mut, draw_hollow_rect_mut, draw_line_segment_mut};
use imageproc::rect::Rect;
use ndarray::Array2;
use serde::{Deserialize, Serialize};

use crate::data::{self, AttackKind, AttackSpec, Sample};
use crate::error::{Error, Result};
use crate::model::LocalizationModel;
use crate::nn::derive_seed;
use crate::pipeline::{self, Checkpoint, SampleTrace, SamplerConfig, TrainConfig, Trainer};
use crate::schedule::DiffusionSchedule;

/// How per-image scores are combined; written into every report header.
pub const AGGREGATION: &str = "per-image mean of pixel AUC; images with constant ground truth excluded";

/// ROC AUC of `prob` against binary `gt` via the Mann-Whitney rank statistic, with tied
/// scores sharing their average rank. `None` when `gt` has a single class.
pub fn pixel_auc(prob: &Array2<f32>, gt: &Array2<f32>) -> Result<Option<f64>> {
    if prob.dim() != gt.dim() {
        return Err(Error::shape(format!("prob {:?} vs gt {:?}", prob.dim(), gt.dim())));
    }
    let mut pairs: Vec<(f32, bool)> = Vec::with_capacity(prob.len());
    for (&p, &g) in prob.iter().zip(gt.iter()) {
        if g != 0.0 && g != 1.0 {
            return Err(Error::invalid("ground truth must be binary"));
        }
        if !p.is_finite() {
            return Err(Error::NonFinite("probability map".into()));
        }
        pairs.push((p, g == 1.0));
    }
    let n_pos = pairs.iter().filter(|p| p.1).count();
    let n_neg = pairs.len() - n_pos;
    if n_pos == 0 || n_neg == 0 {
        return Ok(None);
    }
    pairs.sort_by(|a, b| a.0.total_cmp(&b.0));
    let mut rank_sum = 0.0;
    let mut i = 0;
    while i < pairs.len() {
        let mut j = i;
        while j < pairs.len() && pairs[j].0 == pairs[i].0 {
            j += 1;
        }
        // Ranks i+1 ..= j share their mean.
        let avg = (i + 1 + j) as f64 / 2.0;
        rank_sum += avg * pairs[i..j].iter().filter(|p| p.1).count() as f64;
        i = j;
    }
    let (np, nn) = (n_pos as f64, n_neg as f64);
    Ok(Some((rank_sum - np * (np + 1.0) / 2.0) / (np * nn)))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ImageScore {
    pub id: String,
    pub auc: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub fingerprint: String,
    pub aggregation: String,
    pub per_image: Vec<ImageScore>,
    pub mean_auc: Option<f64>,
    pub excluded: usize,
}

impl EvalReport {
    pub fn from_scores(fingerprint: &str, per_image: Vec<ImageScore>) -> Self {
        let defined: Vec<f64> = per_image.iter().filter_map(|s| s.auc).collect();
        let mean_auc = if defined.is_empty() {
            None
        } else {
            Some(defined.iter().sum::<f64>() / defined.len() as f64)
        };
        Self {
            fingerprint: fingerprint.to_string(),
            aggregation: AGGREGATION.to_string(),
            excluded: per_image.len() - defined.len(),
            per_image,
            mean_auc,
        }
    }

    pub fn to_text(&self) -> String {
        let mut s = String::new();
        writeln!(s, "# config fingerprint: {}", self.fingerprint).unwrap();
        writeln!(s, "# aggregation: {}", self.aggregation).unwrap();
        writeln!(s, "images: {}", self.per_image.len()).unwrap();
        writeln!(s, "excluded (undefined AUC): {}", self.excluded).unwrap();
        match self.mean_auc {
            Some(m) => writeln!(s, "mean pixel AUC: {m:.4}").unwrap(),
            None => writeln!(s, "mean pixel AUC: undefined").unwrap(),
        }
        s
    }

    pub fn to_csv(&self) -> String {
        let mut s = format!("# fingerprint {}\nid,auc\n", self.fingerprint);
        for r in &self.per_image {
            match r.auc {
                Some(a) => writeln!(s, "{},{a:.6}", r.id).unwrap(),
                None => writeln!(s, "{},", r.id).unwrap(),
            }
        }
        s
    }
}

/// Per-sample sampler seed, so a sample's prediction does not depend on its batch.
pub fn sample_seed(seed: u64, id: &str) -> u64 {
    derive_seed(seed, &format!("sample/{id}"))
}

/// Samples each image once and scores it. Samples are processed in chunks of `batch`.
pub fn evaluate(
    model: &LocalizationModel,
    sched: &DiffusionSchedule,
    cfg: &SamplerConfig,
    samples: &[Sample],
    seed: u64,
    batch: usize,
    fingerprint: &str,
) -> Result<EvalReport> {
    let mut scores = Vec::with_capacity(samples.len());
    for chunk in samples.chunks(batch.max(1)) {
        let refs: Vec<&Sample> = chunk.iter().collect();
        let images = data::images_tensor(&refs, model.dtype(), model.device())?;
        let seeds: Vec<u64> = chunk.iter().map(|s| sample_seed(seed, &s.id)).collect();
        let outs = pipeline::sample_batch(model, sched, cfg, &images, &seeds, false)?;
        for (s, out) in chunk.iter().zip(outs) {
            let auc = pixel_auc(&out.prob, &s.gt_mask).map_err(|e| Error::Sample {
                id: s.id.clone(),
                reason: e.to_string(),
            })?;
            scores.push(ImageScore {
                id: s.id.clone(),
                auc,
            });
        }
    }
    Ok(EvalReport::from_scores(fingerprint, scores))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AttackGrid {
    pub kinds: Vec<(AttackKind, Vec<f64>)>,
    pub seed: u64,
}

impl Default for AttackGrid {
    /// Every curve starts at strength zero, the clean point.
    fn default() -> Self {
        Self {
            kinds: vec![
                (AttackKind::GaussianNoise, vec![0.0, 0.02, 0.05, 0.1]),
                (AttackKind::GaussianBlur, vec![0.0, 1.0, 2.0, 3.0]),
                (AttackKind::Scaling, vec![0.0, 0.25, 0.5]),
                (AttackKind::Distortion, vec![0.0, 2.0, 4.0]),
            ],
            seed: 0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CurvePoint {
    pub strength: f64,
    pub mean_auc: Option<f64>,
    pub excluded: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RobustnessCurve {
    pub kind: AttackKind,
    pub points: Vec<CurvePoint>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RobustnessReport {
    pub fingerprint: String,
    pub clean: EvalReport,
    pub curves: Vec<RobustnessCurve>,
}

impl RobustnessReport {
    pub fn curve(&self, kind: AttackKind) -> Option<&RobustnessCurve> {
        self.curves.iter().find(|c| c.kind == kind)
    }

    pub fn to_csv(&self) -> String {
        let mut s = format!(
            "# fingerprint {}\n# aggregation: {AGGREGATION}\nattack,strength,mean_auc,excluded\n",
            self.fingerprint
        );
        for c in &self.curves {
            for p in &c.points {
                let auc = p.mean_auc.map(|a| format!("{a:.6}")).unwrap_or_default();
                writeln!(s, "{},{},{auc},{}", c.kind, p.strength, p.excluded).unwrap();
            }
        }
        s
    }

    pub fn to_text(&self) -> String {
        let mut s = self.clean.to_text();
        for c in &self.curves {
            let pts: Vec<String> = c
                .points
                .iter()
                .map(|p| match p.mean_auc {
                    Some(a) => format!("{}: {a:.4}", p.strength),
                    None => format!("{}: undefined", p.strength),
                })
                .collect();
            writeln!(s, "{}: {}", c.kind, pts.join(", ")).unwrap();
        }
        s
    }
}

/// Attacks the test split at every grid point, then samples and scores it.
pub fn run_robustness(
    model: &LocalizationModel,
    sched: &DiffusionSchedule,
    cfg: &SamplerConfig,
    samples: &[Sample],
    grid: &AttackGrid,
    seed: u64,
    batch: usize,
    fingerprint: &str,
) -> Result<RobustnessReport> {
    let clean = evaluate(model, sched, cfg, samples, seed, batch, fingerprint)?;
    let mut curves = Vec::with_capacity(grid.kinds.len());
    for (kind, strengths) in &grid.kinds {
        let mut points = Vec::with_capacity(strengths.len());
        for &strength in strengths {
            let spec = AttackSpec {
                kind: *kind,
                strength,
                seed: grid.seed,
            };
            let report = if strength == 0.0 {
                clean.clone()
            } else {
                let attacked = samples
                    .iter()
                    .map(|s| {
                        data::apply_attack(s, &spec).map_err(|e| Error::Sample {
                            id: s.id.clone(),
                            reason: e.to_string(),
                        })
                    })
                    .collect::<Result<Vec<_>>>()?;
                evaluate(model, sched, cfg, &attacked, seed, batch, fingerprint)?
            };
            log::info!("{kind} {strength}: {:?}", report.mean_auc);
            points.push(CurvePoint {
                strength,
                mean_auc: report.mean_auc,
                excluded: report.excluded,
            });
        }
        curves.push(RobustnessCurve {
            kind: *kind,
            points,
        });
    }
    Ok(RobustnessReport {
        fingerprint: fingerprint.to_string(),
        clean,
        curves,
    })
}

const PANEL: u32 = 200;
const PAD: u32 = 20;

/// One panel per attack: strength on x, mean AUC in `[0, 1]` on y. Dashed grey line at 0.5.
pub fn render_robustness_plot(report: &RobustnessReport, out: &Path) -> Result<()> {
    let cols = 2u32;
    let rows = (report.curves.len() as u32).div_ceil(cols).max(1);
    let (w, h) = (cols * (PANEL + 2 * PAD), rows * (PANEL + 2 * PAD));
    let mut img = RgbImage::from_pixel(w, h, Rgb([255, 255, 255]));
    let palette = [
        Rgb([200, 40, 40]),
        Rgb([40, 110, 200]),
        Rgb([30, 150, 60]),
        Rgb([150, 60, 170]),
    ];
    for (k, curve) in report.curves.iter().enumerate() {
        let ox = (k as u32 % cols) * (PANEL + 2 * PAD) + PAD;
        let oy = (k as u32 / cols) * (PANEL + 2 * PAD) + PAD;
        draw_hollow_rect_mut(
            &mut img,
            Rect::at(ox as i32, oy as i32).of_size(PANEL, PANEL),
            Rgb([0, 0, 0]),
        );
        let half_y = oy as f32 + PANEL as f32 * 0.5;
        let mut x = ox as f32;
        while x < (ox + PANEL) as f32 {
            draw_line_segment_mut(&mut img, (x, half_y), ((x + 4.0).min((ox + PANEL) as f32), half_y), Rgb([170, 170, 170]));
            x += 8.0;
        }
        let max_s = curve
            .points
            .iter()
            .map(|p| p.strength)
            .fold(0.0f64, f64::max)
            .max(1e-12);
        let pts: Vec<(f32, f32)> = curve
            .points
            .iter()
            .filter_map(|p| {
                p.mean_auc.map(|a| {
                    (
                        ox as f32 + (p.strength / max_s) as f32 * PANEL as f32,
                        oy as f32 + (1.0 - a as f32) * PANEL as f32,
                    )
                })
            })
            .collect();
        let colour = palette[k % palette.len()];
        for pair in pts.windows(2) {
            draw_line_segment_mut(&mut img, pair[0], pair[1], colour);
        }
        for &(px, py) in &pts {
            draw_filled_circle_mut(&mut img, (px.round() as i32, py.round() as i32), 3, colour);
        }
    }
    img.save(out)?;
    Ok(())
}

const GUTTER: u32 = 2;

/// Grid image with rows `x_t`, `x0_hat`, edge and one column per sampling stage. Signal-space
/// maps are shown as `(v + 1) / 2`.
pub fn render_trace(trace: &SampleTrace, out: &Path) -> Result<()> {
    let first = trace
        .steps
        .first()
        .ok_or_else(|| Error::invalid("cannot render an empty trace"))?;
    let (h, w) = first.x_t.dim();
    let n = trace.len() as u32;
    let (h, w) = (h as u32, w as u32);
    let mut img = GrayImage::from_pixel(
        n * w + (n + 1) * GUTTER,
        3 * h + 4 * GUTTER,
        Luma([128]),
    );
    let to_byte = |v: f32| (v.clamp(0.0, 1.0) * 255.0).round() as u8;
    for (c, step) in trace.steps.iter().enumerate() {
        let x0 = GUTTER + c as u32 * (w + GUTTER);
        let rows: [(&Array2<f32>, bool); 3] =
            [(&step.x_t, true), (&step.x0_hat, true), (&step.edge, false)];
        for (r, (map, signed)) in rows.iter().enumerate() {
            let y0 = GUTTER + r as u32 * (h + GUTTER);
            for ((y, x), &v) in map.indexed_iter() {
                let v = if *signed { (v + 1.0) * 0.5 } else { v };
                img.put_pixel(x0 + x as u32, y0 + y as u32, Luma([to_byte(v)]));
            }
        }
    }
    img.save(out)?;
    Ok(())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AblationRow {
    pub dmfe_on: bool,
    pub es_on: bool,
    pub mean_auc: Option<f64>,
    pub excluded: usize,
    pub fingerprint: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AblationReport {
    pub rows: Vec<AblationRow>,
}

impl AblationReport {
    pub fn cell(&self, dmfe_on: bool, es_on: bool) -> Option<&AblationRow> {
        self.rows
            .iter()
            .find(|r| r.dmfe_on == dmfe_on && r.es_on == es_on)
    }

    pub fn to_text(&self) -> String {
        let mut s = format!("# aggregation: {AGGREGATION}\nDMFE  ES   mean AUC  excluded  fingerprint\n");
        let mark = |b: bool| if b { "on " } else { "off" };
        for r in &self.rows {
            let auc = r.mean_auc.map(|a| format!("{a:.4}")).unwrap_or_else(|| "  n/a ".into());
            writeln!(
                s,
                "{}   {}  {auc}    {:>8}  {}",
                mark(r.dmfe_on),
                mark(r.es_on),
                r.excluded,
                r.fingerprint
            )
            .unwrap();
        }
        s
    }

    pub fn to_csv(&self) -> String {
        let mut s = String::from("dmfe,es,mean_auc,excluded,fingerprint\n");
        for r in &self.rows {
            let auc = r.mean_auc.map(|a| format!("{a:.6}")).unwrap_or_default();
            writeln!(s, "{},{},{auc},{},{}", r.dmfe_on, r.es_on, r.excluded, r.fingerprint).unwrap();
        }
        s
    }
}

/// The four `(DMFE, ES)` cells in report order, both components off first.
pub const ABLATION_CELLS: [(bool, bool); 4] = [(false, false), (false, true), (true, false), (true, true)];

pub struct AblationSetup<'a> {
    pub base: &'a TrainConfig,
    pub train: &'a [Sample],
    pub test: &'a [Sample],
    pub dataset_seed: u64,
    /// Per-cell checkpoints live in `<dir>/dmfe-<on|off>_es-<on|off>`.
    pub checkpoint_dir: Option<&'a Path>,
    /// Train missing cells instead of failing.
    pub allow_training: bool,
    pub eval_seed: u64,
    pub eval_batch: usize,
}

pub fn cell_dir(root: &Path, dmfe_on: bool, es_on: bool) -> PathBuf {
    let f = |b: bool| if b { "on" } else { "off" };
    root.join(format!("dmfe-{}_es-{}", f(dmfe_on), f(es_on)))
}

/// Trains (or loads) one model per cell and evaluates each on the test split.
pub fn run_ablation(setup: &AblationSetup<'_>) -> Result<AblationReport> {
    let device = candle_core::Device::Cpu;
    let mut rows = Vec::with_capacity(4);
    for (dmfe_on, es_on) in ABLATION_CELLS {
        let mut cfg = setup.base.clone();
        cfg.dmfe_on = dmfe_on;
        cfg.es_on = es_on;
        let dir = setup.checkpoint_dir.map(|d| cell_dir(d, dmfe_on, es_on));
        let existing = dir.as_ref().filter(|d| d.join(pipeline::WEIGHTS).is_file());
        let model = match existing {
            Some(d) => {
                let ck = Checkpoint::load(d, &device)?;
                if ck.config != cfg {
                    return Err(Error::invalid(format!(
                        "checkpoint {} was trained with a different config",
                        d.display()
                    )));
                }
                ck.model
            }
            None if setup.allow_training => {
                let total = cfg.total_steps(setup.train.len());
                let mut trainer = Trainer::new(&cfg, total, &device)?;
                trainer.fit(setup.train, |r| {
                    if r.step % 50 == 0 {
                        log::info!("dmfe={dmfe_on} es={es_on} step {} loss {:.4}", r.step, r.loss);
                    }
                })?;
                if let Some(d) = &dir {
                    trainer.save_checkpoint(d)?;
                }
                trainer.model().clone()
            }
            None => {
                return Err(Error::MissingCheckpoint(
                    dir.unwrap_or_else(|| PathBuf::from("<no checkpoint dir>")),
                ))
            }
        };
        let fp = cfg.fingerprint(setup.dataset_seed);
        let report = evaluate(
            &model,
            &cfg.schedule()?,
            &cfg.sampler(),
            setup.test,
            setup.eval_seed,
            setup.eval_batch,
            &fp,
        )?;
        rows.push(AblationRow {
            dmfe_on,
            es_on,
            mean_auc: report.mean_auc,
            excluded: report.excluded,
            fingerprint: fp,
        });
    }
    Ok(AblationReport { rows })
}

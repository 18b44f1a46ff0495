//! Synthetic inpainting samples, edge ground truth, folder ingestion and robustness attacks.
//!
//! Images are `h x w x 3` arrays in `[0, 1]`; masks and edges are `h x w` arrays holding
//! exactly `0.0` or `1.0`.

use std::collections::BTreeMap;
use std::fmt;
use std::path::{Path, PathBuf};

use candle_core::{DType, Device, Tensor};
use image::{GrayImage, ImageBuffer, Luma, Rgb, RgbImage};
use ndarray::{Array2, Array3, Axis};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::nn::derive_seed;

pub const EDGE_WIDTH: usize = 2;
pub const MIN_AREA: f64 = 0.02;
pub const MAX_AREA: f64 = 0.30;

#[derive(Debug, Clone, PartialEq)]
pub struct Sample {
    pub id: String,
    pub image: Array3<f32>,
    pub gt_mask: Array2<f32>,
    pub gt_edge: Array2<f32>,
}

impl Sample {
    pub fn height(&self) -> usize {
        self.gt_mask.nrows()
    }

    pub fn width(&self) -> usize {
        self.gt_mask.ncols()
    }

    /// Fraction of pixels inside the mask.
    pub fn area_fraction(&self) -> f64 {
        self.gt_mask.iter().map(|&v| v as f64).sum::<f64>() / self.gt_mask.len() as f64
    }
}

/// The tampered region of a synthetic sample in pixel coordinates (x right, y down).
#[derive(Debug, Clone, PartialEq)]
pub enum Region {
    Ellipse {
        cx: f64,
        cy: f64,
        rx: f64,
        ry: f64,
        angle: f64,
    },
    Polygon(Vec<(f64, f64)>),
}

impl Region {
    pub fn contains(&self, x: f64, y: f64) -> bool {
        match self {
            Region::Ellipse {
                cx,
                cy,
                rx,
                ry,
                angle,
            } => {
                let (s, c) = angle.sin_cos();
                let dx = x - cx;
                let dy = y - cy;
                let u = (c * dx + s * dy) / rx;
                let v = (-s * dx + c * dy) / ry;
                u * u + v * v <= 1.0
            }
            Region::Polygon(pts) => {
                let mut inside = false;
                let n = pts.len();
                for i in 0..n {
                    let (xi, yi) = pts[i];
                    let (xj, yj) = pts[(i + n - 1) % n];
                    if (yi > y) != (yj > y) && x < (xj - xi) * (y - yi) / (yj - yi) + xi {
                        inside = !inside;
                    }
                }
                inside
            }
        }
    }

    /// Pixel-center rasterization.
    pub fn rasterize(&self, h: usize, w: usize) -> Array2<f32> {
        Array2::from_shape_fn((h, w), |(y, x)| {
            if self.contains(x as f64 + 0.5, y as f64 + 0.5) {
                1.0
            } else {
                0.0
            }
        })
    }

    /// Closed outline with at least `min_points` vertices, densifying polygon edges as needed.
    pub fn outline(&self, min_points: usize) -> Vec<(f64, f64)> {
        match self {
            Region::Ellipse {
                cx,
                cy,
                rx,
                ry,
                angle,
            } => {
                let n = min_points.max(8);
                let (s, c) = angle.sin_cos();
                (0..n)
                    .map(|i| {
                        let a = 2.0 * std::f64::consts::PI * i as f64 / n as f64;
                        let (u, v) = (rx * a.cos(), ry * a.sin());
                        (cx + c * u - s * v, cy + s * u + c * v)
                    })
                    .collect()
            }
            Region::Polygon(pts) => {
                let per_edge = min_points.div_ceil(pts.len()).max(1);
                let mut out = Vec::with_capacity(per_edge * pts.len());
                for i in 0..pts.len() {
                    let (x0, y0) = pts[i];
                    let (x1, y1) = pts[(i + 1) % pts.len()];
                    for k in 0..per_edge {
                        let f = k as f64 / per_edge as f64;
                        out.push((x0 + f * (x1 - x0), y0 + f * (y1 - y0)));
                    }
                }
                out
            }
        }
    }
}

fn check_binary(mask: &Array2<f32>, what: &str) -> Result<()> {
    if mask.iter().any(|&v| v != 0.0 && v != 1.0) {
        return Err(Error::invalid(format!("{what} must be binary")));
    }
    Ok(())
}

/// Square-window max (`dilate`) or min filter of half-width `r`, replicating the border.
fn rank_filter(mask: &Array2<f32>, r: usize, dilate: bool) -> Array2<f32> {
    let (h, w) = mask.dim();
    let pick = |a: f32, b: f32| if dilate { a.max(b) } else { a.min(b) };
    let mut rows = mask.clone();
    for y in 0..h {
        for x in 0..w {
            let lo = x.saturating_sub(r);
            let hi = (x + r).min(w - 1);
            rows[[y, x]] = (lo..=hi).map(|i| mask[[y, i]]).reduce(pick).unwrap();
        }
    }
    let mut out = rows.clone();
    for y in 0..h {
        let lo = y.saturating_sub(r);
        let hi = (y + r).min(h - 1);
        for x in 0..w {
            out[[y, x]] = (lo..=hi).map(|i| rows[[i, x]]).reduce(pick).unwrap();
        }
    }
    out
}

/// Morphological gradient: `dilate(mask, width) XOR erode(mask, width)` with a
/// `(2 width + 1)`-square structuring element and replicated borders.
pub fn derive_edge(mask: &Array2<f32>, width: usize) -> Result<Array2<f32>> {
    check_binary(mask, "mask")?;
    if mask.is_empty() {
        return Ok(mask.clone());
    }
    let d = rank_filter(mask, width, true);
    let e = rank_filter(mask, width, false);
    Ok(ndarray::Zip::from(&d).and(&e).map_collect(|&a, &b| if a != b { 1.0 } else { 0.0 }))
}

fn to_gray_f32(a: &Array2<f32>) -> ImageBuffer<Luma<f32>, Vec<f32>> {
    let (h, w) = a.dim();
    ImageBuffer::from_fn(w as u32, h as u32, |x, y| Luma([a[[y as usize, x as usize]]]))
}

fn from_gray_f32(img: &ImageBuffer<Luma<f32>, Vec<f32>>) -> Array2<f32> {
    let (w, h) = img.dimensions();
    Array2::from_shape_fn((h as usize, w as usize), |(y, x)| img.get_pixel(x as u32, y as u32)[0])
}

fn blur2(a: &Array2<f32>, sigma: f32) -> Array2<f32> {
    from_gray_f32(&imageproc::filter::gaussian_blur_f32(&to_gray_f32(a), sigma))
}

fn blur3(a: &Array3<f32>, sigma: f32) -> Array3<f32> {
    let mut out = a.clone();
    for c in 0..3 {
        let ch = a.index_axis(Axis(2), c).to_owned();
        out.index_axis_mut(Axis(2), c).assign(&blur2(&ch, sigma));
    }
    out
}

/// Unit-variance band-limited noise: white noise smoothed at `sigma` then standardized.
fn smooth_noise(rng: &mut ChaCha8Rng, h: usize, w: usize, sigma: f32) -> Array2<f32> {
    let white = Array2::from_shape_fn((h, w), |_| rng.sample::<f32, _>(StandardNormal));
    let s = blur2(&white, sigma);
    let mean = s.mean().unwrap_or(0.0);
    let sd = s.mapv(|v| (v - mean).powi(2)).mean().unwrap_or(0.0).sqrt().max(1e-6);
    s.mapv(|v| (v - mean) / sd)
}

fn random_region(rng: &mut ChaCha8Rng, h: usize, w: usize) -> Region {
    let target = rng.random_range(0.03..0.27) * (h * w) as f64;
    let margin = 0.1;
    if rng.random_bool(0.5) {
        let aspect: f64 = rng.random_range(0.5..2.0);
        let r = (target / std::f64::consts::PI).sqrt();
        let (rx, ry) = (r * aspect.sqrt(), r / aspect.sqrt());
        let reach = rx.max(ry);
        Region::Ellipse {
            cx: rng.random_range((w as f64 * margin).max(reach)..(w as f64 * (1.0 - margin)).min(w as f64 - reach).max(w as f64 * margin + reach + 1e-6)),
            cy: rng.random_range((h as f64 * margin).max(reach)..(h as f64 * (1.0 - margin)).min(h as f64 - reach).max(h as f64 * margin + reach + 1e-6)),
            rx,
            ry,
            angle: rng.random_range(0.0..std::f64::consts::PI),
        }
    } else {
        let n = rng.random_range(5..=9);
        let radii: Vec<f64> = (0..n).map(|_| rng.random_range(0.6..1.0)).collect();
        let phase: f64 = rng.random_range(0.0..std::f64::consts::TAU);
        // Area of the star polygon with unit base radius.
        let step = std::f64::consts::TAU / n as f64;
        let unit_area: f64 = (0..n)
            .map(|i| 0.5 * radii[i] * radii[(i + 1) % n] * step.sin())
            .sum();
        let r = (target / unit_area).sqrt();
        let cx = rng.random_range(r.min(w as f64 / 2.0)..(w as f64 - r).max(w as f64 / 2.0 + 1e-6));
        let cy = rng.random_range(r.min(h as f64 / 2.0)..(h as f64 - r).max(h as f64 / 2.0 + 1e-6));
        Region::Polygon(
            (0..n)
                .map(|i| {
                    let a = phase + step * i as f64;
                    (cx + r * radii[i] * a.cos(), cy + r * radii[i] * a.sin())
                })
                .collect(),
        )
    }
}

/// One synthetic sample together with its region geometry.
pub fn synthetic_sample(index: usize, size: usize, seed: u64) -> Result<(Sample, Region)> {
    if size == 0 || !size.is_multiple_of(32) {
        return Err(Error::invalid(format!("size {size} is not a positive multiple of 32")));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(seed, &format!("synthetic/{index}")));
    let (h, w) = (size, size);
    let mut found = None;
    for _ in 0..200 {
        let region = random_region(&mut rng, h, w);
        let mask = region.rasterize(h, w);
        let frac = mask.sum() as f64 / (h * w) as f64;
        if (MIN_AREA..=MAX_AREA).contains(&frac) {
            found = Some((region, mask));
            break;
        }
    }
    let (region, mask) =
        found.ok_or_else(|| Error::invalid("could not place a region within the area bounds"))?;

    // Background: linear colour gradient plus fine band-limited grain.
    let base: [f32; 3] = std::array::from_fn(|_| rng.random_range(0.25..0.75));
    let tilt: [f32; 3] = std::array::from_fn(|_| rng.random_range(-0.2..0.2));
    let dir: f32 = rng.random_range(0.0..std::f32::consts::TAU);
    let grain = smooth_noise(&mut rng, h, w, 0.7);
    let grain_amp: f32 = rng.random_range(0.06..0.10);
    // Fill: smoother texture with a small colour offset, like a generative patch.
    let fill_tex = smooth_noise(&mut rng, h, w, 3.0);
    let fill_amp: f32 = rng.random_range(0.02..0.04);
    let offset: [f32; 3] = std::array::from_fn(|_| {
        let m: f32 = rng.random_range(0.04..0.10);
        if rng.random_bool(0.5) { m } else { -m }
    });
    // Two-pixel soft transition across the boundary.
    let alpha = blur2(&mask, 1.0);
    let (dy, dx) = (dir.sin(), dir.cos());
    let image = Array3::from_shape_fn((h, w, 3), |(y, x, c)| {
        let u = (x as f32 / w as f32 - 0.5) * dx + (y as f32 / h as f32 - 0.5) * dy;
        let smooth = base[c] + tilt[c] * u;
        let bg = smooth + grain_amp * grain[[y, x]];
        let fg = smooth + offset[c] + fill_amp * fill_tex[[y, x]];
        let a = alpha[[y, x]];
        ((1.0 - a) * bg + a * fg).clamp(0.0, 1.0)
    });
    let gt_edge = derive_edge(&mask, EDGE_WIDTH)?;
    Ok((
        Sample {
            id: format!("syn_{seed}_{index:05}"),
            image,
            gt_mask: mask,
            gt_edge,
        },
        region,
    ))
}

/// `n` synthetic samples of `size x size`; sample `i` depends only on `(seed, i)`.
pub fn generate_synthetic(n: usize, size: usize, seed: u64) -> Result<Vec<Sample>> {
    if n == 0 {
        return Err(Error::invalid("n must be at least 1"));
    }
    (0..n).map(|i| synthetic_sample(i, size, seed).map(|(s, _)| s)).collect()
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AttackKind {
    GaussianNoise,
    GaussianBlur,
    Scaling,
    Distortion,
}

impl AttackKind {
    pub const ALL: [AttackKind; 4] = [
        AttackKind::GaussianNoise,
        AttackKind::GaussianBlur,
        AttackKind::Scaling,
        AttackKind::Distortion,
    ];

    pub fn name(self) -> &'static str {
        match self {
            AttackKind::GaussianNoise => "gaussian_noise",
            AttackKind::GaussianBlur => "gaussian_blur",
            AttackKind::Scaling => "scaling",
            AttackKind::Distortion => "distortion",
        }
    }

    /// Accepted strength interval. Noise: pixel sigma. Blur: kernel sigma in pixels.
    /// Scaling: `1 - factor`, the fraction of resolution removed. Distortion: peak displacement
    /// in pixels.
    pub fn strength_range(self) -> (f64, f64) {
        match self {
            AttackKind::GaussianNoise => (0.0, 1.0),
            AttackKind::GaussianBlur => (0.0, 10.0),
            AttackKind::Scaling => (0.0, 0.9),
            AttackKind::Distortion => (0.0, 16.0),
        }
    }

    pub fn is_geometric(self) -> bool {
        matches!(self, AttackKind::Scaling | AttackKind::Distortion)
    }
}

impl fmt::Display for AttackKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl std::str::FromStr for AttackKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        AttackKind::ALL
            .into_iter()
            .find(|k| k.name() == s)
            .ok_or_else(|| Error::invalid(format!("unknown attack kind `{s}`")))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AttackSpec {
    pub kind: AttackKind,
    pub strength: f64,
    pub seed: u64,
}

impl AttackSpec {
    pub fn validate(&self) -> Result<()> {
        let (lo, hi) = self.kind.strength_range();
        if !(self.strength >= lo && self.strength <= hi) {
            return Err(Error::invalid(format!(
                "{} strength {} outside [{lo}, {hi}]",
                self.kind, self.strength
            )));
        }
        Ok(())
    }
}

/// Bilinear lookup with replicated borders.
fn bilinear(a: &Array2<f32>, x: f64, y: f64) -> f32 {
    let (h, w) = a.dim();
    let x = x.clamp(0.0, (w - 1) as f64);
    let y = y.clamp(0.0, (h - 1) as f64);
    let (x0, y0) = (x.floor() as usize, y.floor() as usize);
    let (x1, y1) = ((x0 + 1).min(w - 1), (y0 + 1).min(h - 1));
    let (fx, fy) = ((x - x0 as f64) as f32, (y - y0 as f64) as f32);
    let top = a[[y0, x0]] * (1.0 - fx) + a[[y0, x1]] * fx;
    let bot = a[[y1, x0]] * (1.0 - fx) + a[[y1, x1]] * fx;
    top * (1.0 - fy) + bot * fy
}

/// Smooth area-preserving displacement field `(dx, dy)` whose largest magnitude is
/// `amplitude`: the curl of a Gaussian-smoothed random stream function.
pub fn displacement_field(h: usize, w: usize, amplitude: f64, seed: u64) -> (Array2<f32>, Array2<f32>) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let sigma = (h.min(w) as f32 / 8.0).max(1.0);
    let psi = smooth_noise(&mut rng, h, w, sigma);
    let mut dx = Array2::zeros((h, w));
    let mut dy = Array2::zeros((h, w));
    for y in 0..h {
        for x in 0..w {
            let (ym, yp) = (y.saturating_sub(1), (y + 1).min(h - 1));
            let (xm, xp) = (x.saturating_sub(1), (x + 1).min(w - 1));
            dx[[y, x]] = (psi[[yp, x]] - psi[[ym, x]]) / (yp - ym).max(1) as f32;
            dy[[y, x]] = -(psi[[y, xp]] - psi[[y, xm]]) / (xp - xm).max(1) as f32;
        }
    }
    let peak = dx
        .iter()
        .zip(dy.iter())
        .map(|(a, b): (&f32, &f32)| a.hypot(*b))
        .fold(0.0f32, f32::max);
    let k = if peak > 0.0 { amplitude as f32 / peak } else { 0.0 };
    (dx.mapv(|v| v * k), dy.mapv(|v| v * k))
}

/// Resamples every channel at `p - d(p)`.
fn warp(img: &Array3<f32>, mask: &Array2<f32>, dx: &Array2<f32>, dy: &Array2<f32>) -> (Array3<f32>, Array2<f32>) {
    let (h, w) = mask.dim();
    let chans: Vec<Array2<f32>> = (0..3).map(|c| img.index_axis(Axis(2), c).to_owned()).collect();
    let src = |y: usize, x: usize| (x as f64 - dx[[y, x]] as f64, y as f64 - dy[[y, x]] as f64);
    let image = Array3::from_shape_fn((h, w, 3), |(y, x, c)| {
        let (sx, sy) = src(y, x);
        bilinear(&chans[c], sx, sy)
    });
    let m = Array2::from_shape_fn((h, w), |(y, x)| {
        let (sx, sy) = src(y, x);
        if bilinear(mask, sx, sy) >= 0.5 { 1.0 } else { 0.0 }
    });
    (image, m)
}

fn resize2(a: &Array2<f32>, nh: usize, nw: usize) -> Array2<f32> {
    let (h, w) = a.dim();
    let sy = h as f64 / nh as f64;
    let sx = w as f64 / nw as f64;
    Array2::from_shape_fn((nh, nw), |(y, x)| {
        bilinear(a, (x as f64 + 0.5) * sx - 0.5, (y as f64 + 0.5) * sy - 0.5)
    })
}

/// Applies one attack. Strength zero returns the sample unchanged.
pub fn apply_attack(sample: &Sample, spec: &AttackSpec) -> Result<Sample> {
    spec.validate()?;
    if spec.strength == 0.0 {
        return Ok(sample.clone());
    }
    let (h, w) = (sample.height(), sample.width());
    let mut out = sample.clone();
    let seed = derive_seed(spec.seed, &format!("{}/{}", spec.kind, sample.id));
    match spec.kind {
        AttackKind::GaussianNoise => {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let n = Normal::new(0.0f32, spec.strength as f32).map_err(|e| Error::invalid(e.to_string()))?;
            out.image.mapv_inplace(|v| (v + n.sample(&mut rng)).clamp(0.0, 1.0));
        }
        AttackKind::GaussianBlur => {
            out.image = blur3(&sample.image, spec.strength as f32);
        }
        AttackKind::Scaling => {
            let f = 1.0 - spec.strength;
            let nh = ((h as f64 * f).round() as usize).max(1);
            let nw = ((w as f64 * f).round() as usize).max(1);
            for c in 0..3 {
                let ch = sample.image.index_axis(Axis(2), c).to_owned();
                let back = resize2(&resize2(&ch, nh, nw), h, w);
                out.image.index_axis_mut(Axis(2), c).assign(&back);
            }
            out.gt_mask = resize2(&resize2(&sample.gt_mask, nh, nw), h, w)
                .mapv(|v| if v >= 0.5 { 1.0 } else { 0.0 });
        }
        AttackKind::Distortion => {
            let (dx, dy) = displacement_field(h, w, spec.strength, seed);
            let (img, m) = warp(&sample.image, &sample.gt_mask, &dx, &dy);
            out.image = img;
            out.gt_mask = m;
        }
    }
    if spec.kind.is_geometric() {
        out.gt_edge = derive_edge(&out.gt_mask, EDGE_WIDTH)?;
    }
    Ok(out)
}

/// Samples found under `images/` and `masks/`, plus files that had no partner.
#[derive(Debug, Clone, Default)]
pub struct FolderDataset {
    pub samples: Vec<Sample>,
    pub unpaired: Vec<PathBuf>,
}

fn png_stems(dir: &Path) -> Result<BTreeMap<String, PathBuf>> {
    let mut out = BTreeMap::new();
    if !dir.is_dir() {
        return Ok(out);
    }
    for entry in std::fs::read_dir(dir)? {
        let p = entry?.path();
        let is_png = p
            .extension()
            .and_then(|e| e.to_str())
            .is_some_and(|e| e.eq_ignore_ascii_case("png"));
        if p.is_file() && is_png {
            if let Some(stem) = p.file_stem().and_then(|s| s.to_str()) {
                out.insert(stem.to_string(), p.clone());
            }
        }
    }
    Ok(out)
}

pub fn image_to_array(img: &RgbImage) -> Array3<f32> {
    let (w, h) = img.dimensions();
    Array3::from_shape_fn((h as usize, w as usize, 3), |(y, x, c)| {
        img.get_pixel(x as u32, y as u32)[c] as f32 / 255.0
    })
}

pub fn array_to_image(a: &Array3<f32>) -> RgbImage {
    let (h, w, _) = a.dim();
    ImageBuffer::from_fn(w as u32, h as u32, |x, y| {
        Rgb(std::array::from_fn(|c| {
            (a[[y as usize, x as usize, c]].clamp(0.0, 1.0) * 255.0).round() as u8
        }))
    })
}

pub fn map_to_gray(a: &Array2<f32>) -> GrayImage {
    let (h, w) = a.dim();
    ImageBuffer::from_fn(w as u32, h as u32, |x, y| {
        Luma([(a[[y as usize, x as usize]].clamp(0.0, 1.0) * 255.0).round() as u8])
    })
}

/// Reads one RGB image from disk into `[0, 1]`.
pub fn load_image(path: &Path) -> Result<Array3<f32>> {
    Ok(image_to_array(&image::open(path)?.to_rgb8()))
}

/// Loads `root/images/*.png` paired by file stem with `root/masks/*.png`.
pub fn load_folder(root: &Path) -> Result<FolderDataset> {
    let images = png_stems(&root.join("images"))?;
    let masks = png_stems(&root.join("masks"))?;
    let mut ds = FolderDataset::default();
    for (stem, ipath) in &images {
        let Some(mpath) = masks.get(stem) else {
            ds.unpaired.push(ipath.clone());
            continue;
        };
        let image = load_image(ipath)?;
        let m = image::open(mpath)?.to_luma8();
        let (mw, mh) = m.dimensions();
        let (ih, iw, _) = image.dim();
        if (mh as usize, mw as usize) != (ih, iw) {
            return Err(Error::Sample {
                id: stem.clone(),
                reason: format!("mask is {mw}x{mh} but image is {iw}x{ih}"),
            });
        }
        let gt_mask = Array2::from_shape_fn((ih, iw), |(y, x)| {
            if m.get_pixel(x as u32, y as u32)[0] as f32 / 255.0 >= 0.5 { 1.0 } else { 0.0 }
        });
        let gt_edge = derive_edge(&gt_mask, EDGE_WIDTH)?;
        ds.samples.push(Sample {
            id: stem.clone(),
            image,
            gt_mask,
            gt_edge,
        });
    }
    for (stem, mpath) in &masks {
        if !images.contains_key(stem) {
            ds.unpaired.push(mpath.clone());
        }
    }
    Ok(ds)
}

/// Writes samples in the layout [`load_folder`] reads.
pub fn export_folder(samples: &[Sample], root: &Path) -> Result<()> {
    std::fs::create_dir_all(root.join("images"))?;
    std::fs::create_dir_all(root.join("masks"))?;
    for s in samples {
        array_to_image(&s.image).save(root.join("images").join(format!("{}.png", s.id)))?;
        map_to_gray(&s.gt_mask).save(root.join("masks").join(format!("{}.png", s.id)))?;
    }
    Ok(())
}

/// `b x 3 x h x w` image tensor.
pub fn images_tensor(samples: &[&Sample], dtype: DType, dev: &Device) -> Result<Tensor> {
    let first = samples.first().ok_or_else(|| Error::invalid("empty batch"))?;
    let (h, w) = (first.height(), first.width());
    let mut buf = Vec::with_capacity(samples.len() * 3 * h * w);
    for s in samples {
        if (s.height(), s.width()) != (h, w) {
            return Err(Error::Sample {
                id: s.id.clone(),
                reason: format!("{}x{} in a batch of {w}x{h}", s.width(), s.height()),
            });
        }
        buf.extend(s.image.view().permuted_axes([2, 0, 1]).iter().copied());
    }
    Ok(Tensor::from_vec(buf, (samples.len(), 3, h, w), dev)?.to_dtype(dtype)?)
}

/// `b x 1 x h x w` tensor of one per-sample map.
pub fn maps_tensor(
    samples: &[&Sample],
    pick: impl Fn(&Sample) -> &Array2<f32>,
    dtype: DType,
    dev: &Device,
) -> Result<Tensor> {
    let first = samples.first().ok_or_else(|| Error::invalid("empty batch"))?;
    let (h, w) = (first.height(), first.width());
    let mut buf = Vec::with_capacity(samples.len() * h * w);
    for s in samples {
        let m = pick(s);
        if m.dim() != (h, w) {
            return Err(Error::Sample {
                id: s.id.clone(),
                reason: "map size differs from the rest of the batch".into(),
            });
        }
        buf.extend(m.iter().copied());
    }
    Ok(Tensor::from_vec(buf, (samples.len(), 1, h, w), dev)?.to_dtype(dtype)?)
}

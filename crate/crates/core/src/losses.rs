//! Mask and edge objectives. All inputs are `b x 1 x h x w`; losses are averaged over the batch.

use candle_core::{DType, Tensor, D};
use serde::{Deserialize, Serialize};

use crate::denoiser::DenoiseOutput;
use crate::error::{Error, Result};
use crate::nn;

/// Probabilities are clipped to `[PROB_EPS, 1 - PROB_EPS]` before logs.
pub const PROB_EPS: f64 = 1e-6;
pub const DICE_EPS: f64 = 1e-6;
/// Side of the box filter that locates mask boundaries for the pixel weights.
pub const WEIGHT_WINDOW: usize = 15;
pub const WEIGHT_GAIN: f64 = 5.0;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LossWeights {
    pub lambda_mask: f64,
    pub mu_edge: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        Self {
            lambda_mask: 0.7,
            mu_edge: 0.3,
        }
    }
}

fn check_pair(a: &Tensor, b: &Tensor) -> Result<()> {
    if a.dims() != b.dims() {
        return Err(Error::shape(format!("{:?} vs {:?}", a.dims(), b.dims())));
    }
    if a.rank() != 4 || a.dim(1)? != 1 {
        return Err(Error::shape(format!(
            "expected b x 1 x h x w, got {:?}",
            a.dims()
        )));
    }
    Ok(())
}

fn check_binary(gt: &Tensor) -> Result<()> {
    let v = gt.flatten_all()?.to_dtype(DType::F64)?.to_vec1::<f64>()?;
    if v.iter().any(|&x| x != 0.0 && x != 1.0) {
        return Err(Error::invalid("ground truth must be binary"));
    }
    Ok(())
}

/// `1 + 5 |box15(gt) - gt|`, where the box mean runs over in-image pixels only.
pub fn boundary_weights(gt: &Tensor) -> Result<Tensor> {
    let k = WEIGHT_WINDOW;
    let pad = k / 2;
    let kernel = Tensor::ones((1, 1, k, k), gt.dtype(), gt.device())?;
    let sums = gt.conv2d(&kernel, pad, 1, 1, 1)?;
    let counts = gt.ones_like()?.conv2d(&kernel, pad, 1, 1, 1)?;
    let mean = (sums / counts)?;
    Ok((((mean - gt)?.abs()? * WEIGHT_GAIN)? + 1.0)?.detach())
}

fn per_image_sum(x: &Tensor) -> Result<Tensor> {
    Ok(x.flatten_from(1)?.sum(D::Minus1)?)
}

/// Weighted BCE plus weighted IoU of `pred_prob` against binary `gt`.
pub fn wbce_wiou(pred_prob: &Tensor, gt: &Tensor) -> Result<Tensor> {
    check_pair(pred_prob, gt)?;
    check_binary(gt)?;
    let gt = gt.detach();
    let w = boundary_weights(&gt)?;
    let p = pred_prob.clamp(PROB_EPS, 1.0 - PROB_EPS)?;
    let one_minus_p = p.affine(-1.0, 1.0)?;
    let one_minus_g = gt.affine(-1.0, 1.0)?;
    let bce = ((&gt * p.log()?)? + (&one_minus_g * one_minus_p.log()?)?)?.neg()?;
    let w_sum = per_image_sum(&w)?;
    let wbce = (per_image_sum(&(&w * bce)?)? / &w_sum)?;
    let inter = per_image_sum(&(&w * (&p * &gt)?)?)?;
    let union = per_image_sum(&(&w * ((&p + &gt)? - (&p * &gt)?)?)?)?;
    let wiou = (inter / union)?.affine(-1.0, 1.0)?;
    Ok((wbce + wiou)?.mean_all()?)
}

/// `1 - 2 sum(p g) / (sum(p^2) + sum(g^2) + eps)`.
pub fn dice_loss(pred_prob: &Tensor, gt: &Tensor) -> Result<Tensor> {
    check_pair(pred_prob, gt)?;
    let gt = gt.detach();
    let num = per_image_sum(&(pred_prob * &gt)?)?;
    let den = ((per_image_sum(&pred_prob.sqr()?)? + per_image_sum(&gt.sqr()?)?)? + DICE_EPS)?;
    Ok((num / den)?.affine(-2.0, 1.0)?.mean_all()?)
}

/// `lambda * (WBCE + WIoU)(sigmoid(mask)) + mu * Dice(sigmoid(edge))`. A zero weight drops its
/// term from the graph so the corresponding decoder receives no gradient at all.
pub fn total_loss(
    out: &DenoiseOutput,
    gt_mask: &Tensor,
    gt_edge: &Tensor,
    w: &LossWeights,
) -> Result<Tensor> {
    if !(w.lambda_mask >= 0.0 && w.mu_edge >= 0.0) {
        return Err(Error::invalid(format!(
            "loss weights must be non-negative, got lambda = {}, mu = {}",
            w.lambda_mask, w.mu_edge
        )));
    }
    check_pair(&out.mask_logits, gt_mask)?;
    check_pair(&out.edge_logits, gt_edge)?;
    let mut total: Option<Tensor> = None;
    if w.lambda_mask > 0.0 {
        let m = (wbce_wiou(&nn::sigmoid(&out.mask_logits)?, gt_mask)? * w.lambda_mask)?;
        total = Some(m);
    }
    if w.mu_edge > 0.0 {
        let e = (dice_loss(&nn::sigmoid(&out.edge_logits)?, gt_edge)? * w.mu_edge)?;
        total = Some(match total {
            Some(t) => (t + e)?,
            None => e,
        });
    }
    match total {
        Some(t) => Ok(t),
        None => Ok(Tensor::zeros((), out.mask_logits.dtype(), out.mask_logits.device())?),
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use candle_core::Device;
    use rand::{Rng, SeedableRng};

    fn map(v: Vec<f64>, h: usize, w: usize) -> Tensor {
        Tensor::from_vec(v, (1, 1, h, w), &Device::Cpu).unwrap()
    }

    fn scalar(t: &Tensor) -> f64 {
        t.to_dtype(DType::F64).unwrap().to_scalar::<f64>().unwrap()
    }

    #[test]
    fn half_confidence_on_empty_gt() {
        let p = map(vec![0.5; 64], 8, 8);
        let g = map(vec![0.0; 64], 8, 8);
        let l = scalar(&wbce_wiou(&p, &g).unwrap());
        assert!((l - (2f64.ln() + 1.0)).abs() < 1e-9, "{l}");
    }

    #[test]
    fn perfect_prediction_is_near_zero() {
        let mut g = vec![0.0; 256];
        for r in 4..12 {
            for c in 3..10 {
                g[r * 16 + c] = 1.0;
            }
        }
        let gt = map(g, 16, 16);
        assert!(scalar(&wbce_wiou(&gt, &gt).unwrap()) < 1e-4);
        assert!(scalar(&dice_loss(&gt, &gt).unwrap()) < 1e-5);
    }

    #[test]
    fn dice_identities() {
        let mut g = vec![0.0; 64];
        let mut p = vec![0.0; 64];
        for i in 0..20 {
            g[i] = 1.0;
        }
        for i in 30..50 {
            p[i] = 1.0;
        }
        let gt = map(g.clone(), 8, 8);
        assert!((scalar(&dice_loss(&map(p, 8, 8), &gt).unwrap()) - 1.0).abs() < 1e-9);
        let half = map(g.iter().map(|x| 0.5 * x).collect(), 8, 8);
        assert!((scalar(&dice_loss(&half, &gt).unwrap()) - 0.2).abs() < 1e-6);
    }

    #[test]
    fn rejects_bad_inputs() {
        let p = map(vec![0.5; 64], 8, 8);
        let g = map(vec![0.3; 64], 8, 8);
        assert!(wbce_wiou(&p, &g).is_err());
        let g2 = map(vec![0.0; 16], 4, 4);
        assert!(wbce_wiou(&p, &g2).is_err());
        assert!(dice_loss(&p, &g2).is_err());
        let out = DenoiseOutput {
            mask_logits: p.clone(),
            edge_logits: p.clone(),
        };
        let g = map(vec![0.0; 64], 8, 8);
        let neg = LossWeights {
            lambda_mask: -1.0,
            mu_edge: 0.3,
        };
        assert!(total_loss(&out, &g, &g, &neg).is_err());
    }

    #[test]
    fn weights_are_uniform_on_constant_gt() {
        for v in [0.0, 1.0] {
            let w = boundary_weights(&map(vec![v; 400], 20, 20)).unwrap();
            let w = w.flatten_all().unwrap().to_vec1::<f64>().unwrap();
            assert!(w.iter().all(|&x| (x - 1.0).abs() < 1e-12));
        }
    }

    fn brute_weights(g: &[f64], h: usize, w: usize) -> Vec<f64> {
        let r = (WEIGHT_WINDOW / 2) as i64;
        let mut out = vec![0.0; h * w];
        for y in 0..h as i64 {
            for x in 0..w as i64 {
                let (mut s, mut n) = (0.0, 0.0);
                for yy in (y - r).max(0)..=(y + r).min(h as i64 - 1) {
                    for xx in (x - r).max(0)..=(x + r).min(w as i64 - 1) {
                        s += g[(yy * w as i64 + xx) as usize];
                        n += 1.0;
                    }
                }
                let gi = g[(y * w as i64 + x) as usize];
                out[(y * w as i64 + x) as usize] = 1.0 + WEIGHT_GAIN * (s / n - gi).abs();
            }
        }
        out
    }

    #[test]
    fn weights_on_half_plane_match_direct_evaluation() {
        let (h, w) = (20, 32);
        let g: Vec<f64> = (0..h * w).map(|i| if i % w >= 16 { 1.0 } else { 0.0 }).collect();
        let got = boundary_weights(&map(g.clone(), h, w)).unwrap();
        let got = got.flatten_all().unwrap().to_vec1::<f64>().unwrap();
        let want = brute_weights(&g, h, w);
        for (a, b) in got.iter().zip(&want) {
            assert!((a - b).abs() < 1e-12);
        }
        // Raised weights sit exactly in the columns whose window straddles the boundary.
        for (i, &v) in got.iter().enumerate() {
            let x = i % w;
            assert_eq!(v > 1.0, (9..23).contains(&x), "column {x}");
        }
    }

    #[test]
    fn weights_match_direct_evaluation_on_random_masks() {
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(3);
        let g: Vec<f64> = (0..18 * 23).map(|_| if rng.random::<f64>() < 0.3 { 1.0 } else { 0.0 }).collect();
        let got = boundary_weights(&map(g.clone(), 18, 23)).unwrap();
        let got = got.flatten_all().unwrap().to_vec1::<f64>().unwrap();
        for (a, b) in got.iter().zip(brute_weights(&g, 18, 23)) {
            assert!((a - b).abs() < 1e-12);
        }
    }

    fn random_instance(seed: u64, n: usize) -> (Vec<f64>, Vec<f64>, Vec<f64>, Vec<f64>) {
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
        let mut normal = || rng.sample::<f64, _>(rand_distr::StandardNormal);
        let ml: Vec<f64> = (0..n).map(|_| 2.0 * normal()).collect();
        let el: Vec<f64> = (0..n).map(|_| 2.0 * normal()).collect();
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed + 1000);
        let gm: Vec<f64> = (0..n).map(|_| if rng.random::<f64>() < 0.4 { 1.0 } else { 0.0 }).collect();
        let ge: Vec<f64> = (0..n).map(|_| if rng.random::<f64>() < 0.2 { 1.0 } else { 0.0 }).collect();
        (ml, el, gm, ge)
    }

    #[test]
    fn total_gradient_matches_finite_differences() {
        let n = 16 * 16;
        for seed in 0..3 {
            let (ml, el, gm, ge) = random_instance(seed, n);
            let (gm, ge) = (map(gm, 16, 16), map(ge, 16, 16));
            let ml_var = candle_core::Var::from_tensor(&map(ml.clone(), 16, 16)).unwrap();
            let el_var = candle_core::Var::from_tensor(&map(el.clone(), 16, 16)).unwrap();
            let w = LossWeights::default();
            let eval = |ml: &Tensor, el: &Tensor| {
                let out = DenoiseOutput {
                    mask_logits: ml.clone(),
                    edge_logits: el.clone(),
                };
                total_loss(&out, &gm, &ge, &w).unwrap()
            };
            let grads = eval(ml_var.as_tensor(), el_var.as_tensor()).backward().unwrap();
            let g_mask = grads.get(ml_var.as_tensor()).unwrap().flatten_all().unwrap().to_vec1::<f64>().unwrap();
            let g_edge = grads.get(el_var.as_tensor()).unwrap().flatten_all().unwrap().to_vec1::<f64>().unwrap();
            let eps = 1e-6;
            for i in (0..n).step_by(7) {
                for (which, analytic) in [(0, g_mask[i]), (1, g_edge[i])] {
                    let shifted = |d: f64| {
                        let (mut a, mut b) = (ml.clone(), el.clone());
                        if which == 0 { a[i] += d } else { b[i] += d }
                        scalar(&eval(&map(a, 16, 16), &map(b, 16, 16)))
                    };
                    let numeric = (shifted(eps) - shifted(-eps)) / (2.0 * eps);
                    let rel = (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(1e-8);
                    assert!(rel < 1e-3, "seed {seed} pixel {i} head {which}: {analytic} vs {numeric}");
                }
            }
        }
    }

    #[test]
    fn flipping_both_inputs_preserves_the_loss() {
        let (ml, _, gm, _) = random_instance(9, 16 * 20);
        let p = nn::sigmoid(&map(ml, 16, 20)).unwrap();
        let g = map(gm, 16, 20);
        let base = scalar(&wbce_wiou(&p, &g).unwrap());
        for dim in [2, 3] {
            let idx: Vec<u32> = (0..p.dim(dim).unwrap() as u32).rev().collect();
            let idx = Tensor::new(idx.as_slice(), &Device::Cpu).unwrap();
            let fp = p.index_select(&idx, dim).unwrap();
            let fg = g.index_select(&idx, dim).unwrap();
            let flipped = scalar(&wbce_wiou(&fp, &fg).unwrap());
            assert!((flipped - base).abs() < 1e-12, "{flipped} vs {base}");
            assert!((scalar(&dice_loss(&fp, &fg).unwrap()) - scalar(&dice_loss(&p, &g).unwrap())).abs() < 1e-12);
        }
    }

    #[test]
    fn zero_weight_drops_its_term() {
        let (ml, el, gm, ge) = random_instance(4, 64);
        let out = DenoiseOutput {
            mask_logits: map(ml, 8, 8),
            edge_logits: map(el, 8, 8),
        };
        let (gm, ge) = (map(gm, 8, 8), map(ge, 8, 8));
        let mask_only = LossWeights { lambda_mask: 1.0, mu_edge: 0.0 };
        let edge_only = LossWeights { lambda_mask: 0.0, mu_edge: 1.0 };
        let both = LossWeights { lambda_mask: 0.7, mu_edge: 0.3 };
        let a = scalar(&total_loss(&out, &gm, &ge, &mask_only).unwrap());
        let b = scalar(&total_loss(&out, &gm, &ge, &edge_only).unwrap());
        let c = scalar(&total_loss(&out, &gm, &ge, &both).unwrap());
        assert!((c - (0.7 * a + 0.3 * b)).abs() < 1e-12);
        let none = LossWeights { lambda_mask: 0.0, mu_edge: 0.0 };
        assert_eq!(scalar(&total_loss(&out, &gm, &ge, &none).unwrap()), 0.0);
    }
}

//! Training losses (differentiable, on the tape) and evaluation metrics
//! (plain `f64` over images).

use std::fmt::Write as _;

use crate::color_hvi::{RgbImage, LUMA};
use crate::error::{contract, Result};
use crate::numerics::{Real, Tape, Tensor, Var};

pub const SSIM_C1: f64 = 0.01 * 0.01;
pub const SSIM_C2: f64 = 0.03 * 0.03;
pub const SSIM_SIGMA: f64 = 1.5;
pub const PSNR_CAP: f64 = 99.0;
pub const HIST_BINS: usize = 64;

/// Weights of the base loss terms and the HVI-branch multiplier `lambda`.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct LossWeights {
    pub l1: f64,
    pub ssim: f64,
    pub edge: f64,
    pub lpips: f64,
    pub lambda: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        Self {
            l1: 1.0,
            ssim: 0.2,
            edge: 0.1,
            lpips: 0.0,
            lambda: 1.0,
        }
    }
}

impl LossWeights {
    pub fn validate(&self) -> Result<()> {
        let all = [self.l1, self.ssim, self.edge, self.lpips, self.lambda];
        if all.iter().all(|w| w.is_finite() && *w >= 0.0) {
            Ok(())
        } else {
            Err(contract(format!("loss weights must be finite and non-negative: {self:?}")))
        }
    }
}

/// Side of the SSIM window for an `h x w` image: 11, or the largest odd
/// size that fits.
pub fn ssim_window(h: usize, w: usize) -> usize {
    let s = 11.min(h).min(w);
    if s % 2 == 0 {
        s - 1
    } else {
        s
    }
}

/// Normalized 2-D Gaussian, `size x size`.
pub fn gaussian_kernel(size: usize, sigma: f64) -> Vec<f64> {
    let c = (size as f64 - 1.0) / 2.0;
    let g1: Vec<f64> = (0..size).map(|i| (-((i as f64 - c).powi(2)) / (2.0 * sigma * sigma)).exp()).collect();
    let mut k: Vec<f64> = g1.iter().flat_map(|a| g1.iter().map(move |b| a * b)).collect();
    let s: f64 = k.iter().sum();
    k.iter_mut().for_each(|v| *v /= s);
    k
}

fn hw<T: Real>(tape: &Tape<T>, x: Var) -> Result<(usize, usize)> {
    match tape.shape(x) {
        [h, w, _] => Ok((*h, *w)),
        s => Err(contract(format!("expected an (H, W, C) map, got {s:?}"))),
    }
}

/// Mean absolute error.
pub fn l1_loss<T: Real>(tape: &mut Tape<T>, pred: Var, target: Var) -> Result<Var> {
    let d = tape.sub(pred, target)?;
    let a = tape.abs(d)?;
    tape.mean(a)
}

/// Per-pixel, per-channel SSIM over the valid region.
pub fn ssim_map<T: Real>(tape: &mut Tape<T>, x: Var, y: Var) -> Result<Var> {
    let (h, w) = hw(tape, x)?;
    let s = ssim_window(h, w);
    let kernel = Tensor::new(&[s, s], gaussian_kernel(s, SSIM_SIGMA).into_iter().map(T::from_f64).collect())?;
    let mu_x = tape.filter2d(x, kernel.clone())?;
    let mu_y = tape.filter2d(y, kernel.clone())?;
    let xx = tape.mul(x, x)?;
    let yy = tape.mul(y, y)?;
    let xy = tape.mul(x, y)?;
    let exx = tape.filter2d(xx, kernel.clone())?;
    let eyy = tape.filter2d(yy, kernel.clone())?;
    let exy = tape.filter2d(xy, kernel)?;
    let mxx = tape.mul(mu_x, mu_x)?;
    let myy = tape.mul(mu_y, mu_y)?;
    let mxy = tape.mul(mu_x, mu_y)?;
    let sxx = tape.sub(exx, mxx)?;
    let syy = tape.sub(eyy, myy)?;
    let sxy = tape.sub(exy, mxy)?;
    let a = tape.mul_scalar(mxy, T::from_f64(2.0))?;
    let a = tape.add_scalar(a, T::from_f64(SSIM_C1))?;
    let b = tape.mul_scalar(sxy, T::from_f64(2.0))?;
    let b = tape.add_scalar(b, T::from_f64(SSIM_C2))?;
    let c = tape.add(mxx, myy)?;
    let c = tape.add_scalar(c, T::from_f64(SSIM_C1))?;
    let d = tape.add(sxx, syy)?;
    let d = tape.add_scalar(d, T::from_f64(SSIM_C2))?;
    let num = tape.mul(a, b)?;
    let den = tape.mul(c, d)?;
    tape.div(num, den)
}

/// `1 - mean SSIM`.
pub fn ssim_loss<T: Real>(tape: &mut Tape<T>, pred: Var, target: Var) -> Result<Var> {
    let m = ssim_map(tape, pred, target)?;
    let m = tape.mean(m)?;
    let neg = tape.mul_scalar(m, -T::ONE)?;
    tape.add_scalar(neg, T::ONE)
}

/// Sobel gradient magnitude `sqrt(gx^2 + gy^2 + 1e-6)` per channel.
pub fn sobel_magnitude<T: Real>(tape: &mut Tape<T>, x: Var) -> Result<Var> {
    let gx = [-1.0, 0.0, 1.0, -2.0, 0.0, 2.0, -1.0, 0.0, 1.0];
    let gy = [-1.0, -2.0, -1.0, 0.0, 0.0, 0.0, 1.0, 2.0, 1.0];
    let kx = Tensor::new(&[3, 3], gx.iter().map(|&v| T::from_f64(v)).collect())?;
    let ky = Tensor::new(&[3, 3], gy.iter().map(|&v| T::from_f64(v)).collect())?;
    let ex = tape.filter2d(x, kx)?;
    let ey = tape.filter2d(x, ky)?;
    let ex2 = tape.mul(ex, ex)?;
    let ey2 = tape.mul(ey, ey)?;
    let s = tape.add(ex2, ey2)?;
    let s = tape.add_scalar(s, T::from_f64(1e-6))?;
    tape.sqrt(s)
}

/// L1 between Sobel magnitudes.
pub fn edge_loss<T: Real>(tape: &mut Tape<T>, pred: Var, target: Var) -> Result<Var> {
    let a = sobel_magnitude(tape, pred)?;
    let b = sobel_magnitude(tape, target)?;
    l1_loss(tape, a, b)
}

/// Stand-in for a learned perceptual distance: mean L1 over a three-level
/// average-pooled pyramid.
pub fn perceptual_proxy<T: Real>(tape: &mut Tape<T>, pred: Var, target: Var) -> Result<Var> {
    let (mut p, mut t) = (pred, target);
    let mut total = l1_loss(tape, p, t)?;
    let mut levels = 1;
    while levels < 3 {
        let (h, w) = hw(tape, p)?;
        if h < 2 || w < 2 {
            break;
        }
        p = tape.avg_pool2(p)?;
        t = tape.avg_pool2(t)?;
        let l = l1_loss(tape, p, t)?;
        total = tape.add(total, l)?;
        levels += 1;
    }
    tape.mul_scalar(total, T::from_f64(1.0 / levels as f64))
}

/// `w_l1 L1 + w_ssim (1 - SSIM) + w_edge Edge + w_lpips Proxy`, skipping
/// zero-weighted terms.
pub fn base_loss<T: Real>(tape: &mut Tape<T>, pred: Var, target: Var, w: &LossWeights) -> Result<Var> {
    type Term<T> = fn(&mut Tape<T>, Var, Var) -> Result<Var>;
    let terms: [(f64, Term<T>); 4] = [
        (w.l1, l1_loss::<T>),
        (w.ssim, ssim_loss::<T>),
        (w.edge, edge_loss::<T>),
        (w.lpips, perceptual_proxy::<T>),
    ];
    let mut total: Option<Var> = None;
    for (weight, f) in terms {
        if weight == 0.0 {
            continue;
        }
        let v = f(tape, pred, target)?;
        let v = tape.mul_scalar(v, T::from_f64(weight))?;
        total = Some(match total {
            Some(t) => tape.add(t, v)?,
            None => v,
        });
    }
    match total {
        Some(t) => Ok(t),
        None => tape.constant(Tensor::scalar(T::ZERO)),
    }
}

/// Maps HVI chroma from `[-1, 1]` to `[0, 1]` so SSIM constants apply to
/// every channel on the same scale.
fn hvi_to_unit<T: Real>(tape: &mut Tape<T>, x: Var) -> Result<Var> {
    let half = T::from_f64(0.5);
    let scale = tape.constant(Tensor::new(&[3], vec![half, half, T::ONE])?)?;
    let offset = tape.constant(Tensor::new(&[3], vec![half, half, T::ZERO])?)?;
    let y = tape.mul(x, scale)?;
    tape.add(y, offset)
}

/// Full objective: the RGB base loss plus, when both HVI maps are given,
/// `lambda` times the base loss on the HVI maps.
pub fn total_loss<T: Real>(
    tape: &mut Tape<T>,
    pred_rgb: Var,
    target_rgb: Var,
    hvi: Option<(Var, Var)>,
    w: &LossWeights,
) -> Result<Var> {
    let rgb = base_loss(tape, pred_rgb, target_rgb, w)?;
    let Some((ph, th)) = hvi else {
        return Ok(rgb);
    };
    if w.lambda == 0.0 {
        return Ok(rgb);
    }
    let ph = hvi_to_unit(tape, ph)?;
    let th = hvi_to_unit(tape, th)?;
    let h = base_loss(tape, ph, th, w)?;
    let h = tape.mul_scalar(h, T::from_f64(w.lambda))?;
    tape.add(rgb, h)
}

fn check_same(a: &RgbImage, b: &RgbImage) -> Result<()> {
    if a.height != b.height || a.width != b.width {
        return Err(contract(format!(
            "image sizes differ: {}x{} vs {}x{}",
            a.height, a.width, b.height, b.width
        )));
    }
    Ok(())
}

/// PSNR in dB for images in `[0, 1]`, capped at 99.
pub fn psnr(pred: &RgbImage, gt: &RgbImage) -> Result<f64> {
    check_same(pred, gt)?;
    let mse = pred
        .data
        .iter()
        .zip(&gt.data)
        .map(|(&a, &b)| (a as f64 - b as f64).powi(2))
        .sum::<f64>()
        / pred.data.len() as f64;
    if mse == 0.0 {
        return Ok(PSNR_CAP);
    }
    Ok((10.0 * (1.0 / mse).log10()).min(PSNR_CAP))
}

/// Mean SSIM over channels with an 11x11 Gaussian window (smaller for
/// tiny images).
pub fn ssim(pred: &RgbImage, gt: &RgbImage) -> Result<f64> {
    check_same(pred, gt)?;
    let (h, w) = (pred.height, pred.width);
    let s = ssim_window(h, w);
    let k = gaussian_kernel(s, SSIM_SIGMA);
    let (oh, ow) = (h - s + 1, w - s + 1);
    let at = |img: &RgbImage, y: usize, x: usize, c: usize| img.data[(y * w + x) * 3 + c] as f64;
    let mut total = 0.0;
    for c in 0..3 {
        for y in 0..oh {
            for x in 0..ow {
                let (mut mx, mut my, mut xx, mut yy, mut xy) = (0.0, 0.0, 0.0, 0.0, 0.0);
                for i in 0..s {
                    for j in 0..s {
                        let g = k[i * s + j];
                        let a = at(pred, y + i, x + j, c);
                        let b = at(gt, y + i, x + j, c);
                        mx += g * a;
                        my += g * b;
                        xx += g * a * a;
                        yy += g * b * b;
                        xy += g * a * b;
                    }
                }
                let (vx, vy, cxy) = (xx - mx * mx, yy - my * my, xy - mx * my);
                total += ((2.0 * mx * my + SSIM_C1) * (2.0 * cxy + SSIM_C2))
                    / ((mx * mx + my * my + SSIM_C1) * (vx + vy + SSIM_C2));
            }
        }
    }
    Ok(total / (3 * oh * ow) as f64)
}

/// Rescales `pred` so its mean luma matches `gt`'s, then clips to `[0, 1]`.
pub fn gt_mean_adjust(pred: &RgbImage, gt: &RgbImage) -> Result<RgbImage> {
    check_same(pred, gt)?;
    let k = gt.mean_luma() / pred.mean_luma().max(1e-6);
    let data = pred.data.iter().map(|&v| ((v as f64) * k).clamp(0.0, 1.0) as f32).collect();
    RgbImage::new(pred.height, pred.width, data)
}

/// Normalized histogram of per-pixel luma.
pub fn luminance_histogram(img: &RgbImage, bins: usize) -> Vec<f64> {
    let mut h = vec![0.0; bins];
    for p in img.data.chunks_exact(3) {
        let l: f64 = (0..3).map(|c| LUMA[c] * p[c] as f64).sum();
        let b = ((l * bins as f64).floor().max(0.0) as usize).min(bins - 1);
        h[b] += 1.0;
    }
    let n = img.pixels().max(1) as f64;
    h.iter_mut().for_each(|v| *v /= n);
    h
}

/// Total-variation distance between two luminance histograms.
pub fn histogram_distance(a: &RgbImage, b: &RgbImage) -> f64 {
    let (ha, hb) = (luminance_histogram(a, HIST_BINS), luminance_histogram(b, HIST_BINS));
    0.5 * ha.iter().zip(&hb).map(|(x, y)| (x - y).abs()).sum::<f64>()
}

/// Metrics of one prediction against its target.
#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct PairMetrics {
    pub psnr: f64,
    pub ssim: f64,
    pub psnr_gt_mean: f64,
    pub ssim_gt_mean: f64,
    /// `|mean luma(pred) - beta|`.
    pub luminance_error: f64,
    pub histogram_distance: f64,
}

impl PairMetrics {
    pub fn measure(pred: &RgbImage, gt: &RgbImage, beta: f64) -> Result<Self> {
        let adj = gt_mean_adjust(pred, gt)?;
        Ok(Self {
            psnr: psnr(pred, gt)?,
            ssim: ssim(pred, gt)?,
            psnr_gt_mean: psnr(&adj, gt)?,
            ssim_gt_mean: ssim(&adj, gt)?,
            luminance_error: (pred.mean_luma() - beta).abs(),
            histogram_distance: histogram_distance(pred, gt),
        })
    }
}

/// Per-image metrics plus their means.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct MetricReport {
    pub entries: Vec<(String, PairMetrics)>,
    pub mean: PairMetrics,
}

fn write_metrics(s: &mut String, m: &PairMetrics) {
    let _ = writeln!(s, "psnr={:.4}", m.psnr);
    let _ = writeln!(s, "ssim={:.6}", m.ssim);
    let _ = writeln!(s, "psnr_gt_mean={:.4}", m.psnr_gt_mean);
    let _ = writeln!(s, "ssim_gt_mean={:.6}", m.ssim_gt_mean);
    let _ = writeln!(s, "luminance_error={:.6}", m.luminance_error);
    let _ = writeln!(s, "histogram_distance={:.6}", m.histogram_distance);
}

impl MetricReport {
    pub fn new(entries: Vec<(String, PairMetrics)>) -> Self {
        let n = entries.len().max(1) as f64;
        let avg = |f: fn(&PairMetrics) -> f64| entries.iter().map(|(_, p)| f(p)).sum::<f64>() / n;
        let mean = PairMetrics {
            psnr: avg(|p| p.psnr),
            ssim: avg(|p| p.ssim),
            psnr_gt_mean: avg(|p| p.psnr_gt_mean),
            ssim_gt_mean: avg(|p| p.ssim_gt_mean),
            luminance_error: avg(|p| p.luminance_error),
            histogram_distance: avg(|p| p.histogram_distance),
        };
        Self { entries, mean }
    }

    /// `[image <name>]` blocks of `key=value` lines, then an `[aggregate]`
    /// block with `count` and the means. Keys keep a fixed order.
    pub fn to_text(&self) -> String {
        let mut s = String::new();
        for (name, m) in &self.entries {
            let _ = writeln!(s, "[image {name}]");
            write_metrics(&mut s, m);
            s.push('\n');
        }
        let _ = writeln!(s, "[aggregate]");
        let _ = writeln!(s, "count={}", self.entries.len());
        write_metrics(&mut s, &self.mean);
        s
    }
}

/// Sample-variance ratio of a flat noisy capture before and after
/// brightening it by `k` with [`gt_mean_adjust`] against a noise-free
/// target `k` times brighter. `pixels` gray pixels at level 0.1 with
/// noise std 0.01.
pub fn noise_variance_ratio(k: f64, pixels: usize, seed: u64) -> Result<f64> {
    use rand::SeedableRng;
    use rand_distr::{Distribution, Normal};
    let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
    let noise = Normal::new(0.0, 0.01).map_err(|e| contract(e.to_string()))?;
    let data: Vec<f32> = (0..pixels)
        .flat_map(|_| {
            let v = (0.1 + noise.sample(&mut rng)) as f32;
            [v; 3]
        })
        .collect();
    let noisy = RgbImage::new(1, pixels, data)?;
    let gt = RgbImage::filled(1, pixels, [(0.1 * k) as f32; 3]);
    let bright = gt_mean_adjust(&noisy, &gt)?;
    let var = |img: &RgbImage| {
        let xs: Vec<f64> = img.data.iter().step_by(3).map(|&v| v as f64).collect();
        let m = xs.iter().sum::<f64>() / xs.len() as f64;
        xs.iter().map(|x| (x - m).powi(2)).sum::<f64>() / (xs.len() - 1) as f64
    };
    Ok(var(&bright) / var(&noisy))
}

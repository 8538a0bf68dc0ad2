use std::fmt::Write as _;

use rayon::prelude::*;

use super::{hybrid_target, train, TargetPolicy, TrainConfig, TrainLog};
use crate::color_hvi::synthesize_hybrid_target;
use crate::error::{contract, Result};
use crate::lightsynth::{apply_isp, level_noise_seed, Dataset, IlluminationStack};
use crate::losses::{LossWeights, PairMetrics};
use crate::model::{CleRwkvModel, Variant};

/// Constant `c` minimizing `sum |c - t_i|`, found by evaluating the cost at
/// every sample (the optimum of a piecewise-linear cost sits on one).
/// A flat optimum between two samples returns its midpoint.
pub fn l1_optimal_constant(targets: &[f64]) -> Option<f64> {
    let cost = |c: f64| targets.iter().map(|t| (c - t).abs()).sum::<f64>();
    let best = targets.iter().map(|&t| cost(t)).fold(f64::INFINITY, f64::min);
    let mut argmins: Vec<f64> = targets.iter().copied().filter(|&t| cost(t) == best).collect();
    argmins.sort_by(f64::total_cmp);
    Some((argmins.first()? + argmins.last()?) / 2.0)
}

fn median(mut xs: Vec<f64>) -> f64 {
    xs.sort_by(f64::total_cmp);
    let n = xs.len();
    if n % 2 == 1 {
        xs[n / 2]
    } else {
        (xs[n / 2 - 1] + xs[n / 2]) / 2.0
    }
}

/// Held-out inputs: every darkest-quartile capture of every test stack.
fn held_out_inputs<'a>(stacks: &[&'a IlluminationStack]) -> Vec<(&'a IlluminationStack, usize)> {
    stacks.iter().flat_map(|s| s.darkest_quartile().map(move |i| (*s, i))).collect()
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct MedianPoint {
    pub scene: usize,
    pub input_level: usize,
    pub output_luma: f64,
    /// Median mean luma of the scene's hybrid targets over all levels.
    pub target_median: f64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct MedianReport {
    pub points: Vec<MedianPoint>,
    /// Median of every training target's mean luma.
    pub global_median: f64,
    pub tolerance: f64,
}

impl MedianReport {
    pub fn fraction_within(&self) -> f64 {
        let n = self.points.iter().filter(|p| (p.output_luma - p.target_median).abs() <= self.tolerance).count();
        n as f64 / self.points.len().max(1) as f64
    }

    pub fn to_text(&self) -> String {
        let mut s = String::new();
        for p in &self.points {
            let _ = writeln!(
                s,
                "scene={} input_level={} output_luma={:.4} target_median={:.4}",
                p.scene,
                p.input_level + 1,
                p.output_luma,
                p.target_median
            );
        }
        let _ = writeln!(s, "global_median={:.4}", self.global_median);
        let _ = writeln!(s, "fraction_within={:.4} tolerance={}", self.fraction_within(), self.tolerance);
        s
    }
}

/// Trains a base model with an L1-only loss on targets at uniformly drawn
/// levels, then measures where its output luminance lands on held-out
/// inputs relative to the median target luminance.
pub fn median_regression_experiment(
    model: &mut CleRwkvModel,
    data: &Dataset,
    cfg: &TrainConfig,
) -> Result<(MedianReport, TrainLog)> {
    if model.config.variant != Variant::Base {
        return Err(contract("median regression studies the base variant"));
    }
    let cfg = TrainConfig {
        weights: LossWeights {
            l1: 1.0,
            ssim: 0.0,
            edge: 0.0,
            lpips: 0.0,
            lambda: 1.0,
        },
        targets: TargetPolicy::UniformLevel,
        ..*cfg
    };
    let log = train(model, &data.train(), &data.test(), &cfg)?;
    Ok((median_report(model, data)?, log))
}

/// The measurement half of [`median_regression_experiment`].
pub fn median_report(model: &CleRwkvModel, data: &Dataset) -> Result<MedianReport> {
    let train_lumas: Vec<f64> = data
        .train()
        .par_iter()
        .map(|s| (0..s.levels.len()).map(|l| Ok(hybrid_target(s, l)?.mean_luma())).collect::<Result<Vec<_>>>())
        .collect::<Result<Vec<_>>>()?
        .concat();
    let points = held_out_inputs(&data.test())
        .par_iter()
        .map(|&(s, lvl)| {
            let lumas = (0..s.levels.len()).map(|l| Ok(hybrid_target(s, l)?.mean_luma())).collect::<Result<Vec<_>>>()?;
            let out = model.enhance(&s.levels[lvl].image, 0.5)?;
            Ok(MedianPoint {
                scene: s.index,
                input_level: lvl,
                output_luma: out.mean_luma(),
                target_median: median(lumas),
            })
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(MedianReport {
        points,
        global_median: median(train_lumas),
        tolerance: 0.05,
    })
}

/// One β sweep on one input.
#[derive(Clone, Debug, PartialEq)]
pub struct Sweep {
    pub scene: usize,
    pub input_level: usize,
    pub betas: Vec<f64>,
    pub lumas: Vec<f64>,
    /// PSNR against the hybrid target of the level nearest each β.
    pub psnr: Vec<f64>,
    pub ssim: Vec<f64>,
    /// Output bits identical across the whole sweep.
    pub invariant: bool,
}

impl Sweep {
    /// Steps where luminance drops by more than `tol`.
    pub fn violations(&self, tol: f64) -> usize {
        self.lumas.windows(2).filter(|w| w[1] < w[0] - tol).count()
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct ControllabilityReport {
    pub sweeps: Vec<Sweep>,
}

impl ControllabilityReport {
    /// Fraction of (input, β) pairs with `|luma - β| < tol`.
    pub fn fraction_tracking(&self, tol: f64) -> f64 {
        let (mut hit, mut n) = (0, 0);
        for s in &self.sweeps {
            for (l, b) in s.lumas.iter().zip(&s.betas) {
                hit += ((l - b).abs() < tol) as usize;
                n += 1;
            }
        }
        hit as f64 / n.max(1) as f64
    }

    pub fn mean_abs_error(&self) -> f64 {
        let errs: Vec<f64> = self
            .sweeps
            .iter()
            .flat_map(|s| s.lumas.iter().zip(&s.betas).map(|(l, b)| (l - b).abs()))
            .collect();
        errs.iter().sum::<f64>() / errs.len().max(1) as f64
    }

    pub fn max_violations(&self, tol: f64) -> usize {
        self.sweeps.iter().map(|s| s.violations(tol)).max().unwrap_or(0)
    }

    pub fn all_invariant(&self) -> bool {
        self.sweeps.iter().all(|s| s.invariant)
    }

    pub fn mean_psnr(&self) -> f64 {
        let v: Vec<f64> = self.sweeps.iter().flat_map(|s| s.psnr.iter().copied()).collect();
        v.iter().sum::<f64>() / v.len().max(1) as f64
    }

    pub fn to_text(&self) -> String {
        let mut s = String::new();
        for sw in &self.sweeps {
            let lumas: Vec<String> = sw.lumas.iter().map(|l| format!("{l:.4}")).collect();
            let _ = writeln!(
                s,
                "scene={} input_level={} violations={} lumas={}",
                sw.scene,
                sw.input_level + 1,
                sw.violations(0.01),
                lumas.join(",")
            );
        }
        let _ = writeln!(s, "fraction_tracking={:.4}", self.fraction_tracking(0.05));
        let _ = writeln!(s, "mean_abs_error={:.4}", self.mean_abs_error());
        let _ = writeln!(s, "max_violations={}", self.max_violations(0.01));
        let _ = writeln!(s, "mean_psnr={:.4}", self.mean_psnr());
        let _ = writeln!(s, "beta_invariant={}", self.all_invariant());
        s
    }
}

/// `points` evenly spaced values from `lo` to `hi` inclusive.
pub fn beta_grid(lo: f64, hi: f64, points: usize) -> Vec<f64> {
    match points {
        0 => vec![],
        1 => vec![lo],
        n => (0..n).map(|i| lo + (hi - lo) * i as f64 / (n - 1) as f64).collect(),
    }
}

/// Sweeps `points` β values spanning the test stacks' label range on every
/// held-out input.
pub fn controllability_eval(model: &CleRwkvModel, test: &[&IlluminationStack], points: usize) -> Result<ControllabilityReport> {
    if test.is_empty() || points == 0 {
        return Err(contract("controllability needs test scenes and at least one β"));
    }
    let (lo, hi) = test
        .iter()
        .flat_map(|s| s.levels.iter().map(|l| l.beta))
        .fold((f64::INFINITY, f64::NEG_INFINITY), |(a, b), x| (a.min(x), b.max(x)));
    let betas = beta_grid(lo, hi, points);
    let sweeps = held_out_inputs(test)
        .par_iter()
        .map(|&(s, lvl)| {
            let input = &s.levels[lvl].image;
            let mut sw = Sweep {
                scene: s.index,
                input_level: lvl,
                betas: betas.clone(),
                lumas: vec![],
                psnr: vec![],
                ssim: vec![],
                invariant: true,
            };
            let mut first = None;
            for &b in &betas {
                let out = model.enhance(input, b)?;
                let nearest = (0..s.levels.len())
                    .min_by(|&i, &j| (s.levels[i].beta - b).abs().total_cmp(&(s.levels[j].beta - b).abs()))
                    .unwrap_or(0);
                let m = PairMetrics::measure(&out, &hybrid_target(s, nearest)?, b)?;
                sw.lumas.push(out.mean_luma());
                sw.psnr.push(m.psnr);
                sw.ssim.push(m.ssim);
                match &first {
                    None => first = Some(out),
                    Some(f) => sw.invariant &= *f == out,
                }
            }
            Ok(sw)
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(ControllabilityReport { sweeps })
}

/// Mean metrics over every (held-out input, target level) pair.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct ParadigmReport {
    pub pairs: usize,
    pub psnr: f64,
    pub psnr_gt_mean: f64,
    pub ssim: f64,
    pub ssim_gt_mean: f64,
}

/// Scores `model` against the hybrid target of every level, asking the
/// conditional variant for that level's β.
pub fn paradigm_gap(model: &CleRwkvModel, test: &[&IlluminationStack]) -> Result<ParadigmReport> {
    let jobs: Vec<(&IlluminationStack, usize, usize)> = held_out_inputs(test)
        .into_iter()
        .flat_map(|(s, i)| (0..s.levels.len()).map(move |t| (s, i, t)))
        .collect();
    let metrics = jobs
        .par_iter()
        .map(|&(s, i, t)| {
            let beta = s.levels[t].beta;
            let out = model.enhance(&s.levels[i].image, beta)?;
            PairMetrics::measure(&out, &hybrid_target(s, t)?, beta)
        })
        .collect::<Result<Vec<_>>>()?;
    let n = metrics.len().max(1) as f64;
    Ok(ParadigmReport {
        pairs: metrics.len(),
        psnr: metrics.iter().map(|m| m.psnr).sum::<f64>() / n,
        psnr_gt_mean: metrics.iter().map(|m| m.psnr_gt_mean).sum::<f64>() / n,
        ssim: metrics.iter().map(|m| m.ssim).sum::<f64>() / n,
        ssim_gt_mean: metrics.iter().map(|m| m.ssim_gt_mean).sum::<f64>() / n,
    })
}

#[derive(Clone, Debug, PartialEq)]
pub struct SpreadReport {
    /// Per scene: total target-luma variance over (level, noise draw)
    /// divided by the mean within-level variance over noise draws.
    pub ratios: Vec<f64>,
    pub cap: f64,
}

impl SpreadReport {
    pub fn median_ratio(&self) -> f64 {
        median(self.ratios.clone())
    }
}

/// Variance surrogate for how much fixing β narrows the target
/// distribution: each scene is re-rendered `draws` times per level with
/// fresh noise. A zero within-level variance reports `cap`.
pub fn conditional_spread_analysis(data: &Dataset, draws: usize) -> Result<SpreadReport> {
    if draws < 2 {
        return Err(contract("spread analysis needs at least two noise draws"));
    }
    let cap = 1e6;
    let ratios = data
        .stacks
        .par_iter()
        .map(|st| {
            let scene = st.scene();
            let n_levels = st.levels.len();
            let px = st.height() * st.width();
            // lumas[level][draw][pixel]
            let mut lumas = vec![vec![vec![0.0; px]; draws]; n_levels];
            for (l, level) in st.levels.iter().enumerate() {
                for (d, slot) in lumas[l].iter_mut().enumerate() {
                    let seed = level_noise_seed(st.seed, l) ^ ((d as u64) << 40);
                    let capture = if d == 0 {
                        level.image.clone()
                    } else {
                        apply_isp(&scene, level.k, &st.isp, seed)?.image
                    };
                    let target = synthesize_hybrid_target(st.reference_image(), &capture)?;
                    for (i, p) in target.data.chunks_exact(3).enumerate() {
                        slot[i] = crate::color_hvi::LUMA.iter().zip(p).map(|(w, &v)| w * v as f64).sum();
                    }
                }
            }
            let var = |xs: &mut dyn Iterator<Item = f64>| {
                let v: Vec<f64> = xs.collect();
                let m = v.iter().sum::<f64>() / v.len() as f64;
                v.iter().map(|x| (x - m).powi(2)).sum::<f64>() / v.len() as f64
            };
            let (mut total, mut within) = (0.0, 0.0);
            for i in 0..px {
                total += var(&mut lumas.iter().flat_map(|l| l.iter().map(move |d| d[i])));
                within += lumas.iter().map(|l| var(&mut l.iter().map(|d| d[i]))).sum::<f64>() / n_levels as f64;
            }
            Ok(if within == 0.0 { cap } else { (total / within).min(cap) })
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(SpreadReport { ratios, cap })
}

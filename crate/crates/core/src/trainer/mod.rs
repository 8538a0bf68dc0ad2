//! Micro-training on synthetic stacks with hybrid targets, plus the
//! experiments built on it.

mod experiments;

pub use experiments::{
    beta_grid, conditional_spread_analysis, controllability_eval, l1_optimal_constant, median_regression_experiment,
    median_report, paradigm_gap, ControllabilityReport, MedianReport, ParadigmReport, SpreadReport,
};

use std::fmt::Write as _;
use std::time::Instant;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;

use crate::color_hvi::{hvit, synthesize_hybrid_target, RgbImage};
use crate::error::{contract, Error, Result};
use crate::lightsynth::IlluminationStack;
use crate::losses::{total_loss, LossWeights, PairMetrics};
use crate::model::{CleRwkvModel, ColorSpace, Variant};
use crate::numerics::{adamw_step, cosine_lr, AdamW, AdamWConfig, Bindings, ParamId, Tape, Tensor};

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch: usize,
    pub crop: usize,
    pub lr: f64,
    pub optim: AdamWConfig,
    pub flips: bool,
    pub rotations: bool,
    pub weights: LossWeights,
    pub seed: u64,
    /// Validate on up to 5 held-out scenes after every epoch.
    pub validate: bool,
    pub targets: TargetPolicy,
}

/// How a training element picks its target level.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Default)]
pub enum TargetPolicy {
    /// Scene uniform, then target level uniform over the stack.
    #[default]
    UniformLevel,
    /// β drawn uniformly over the training label range, then a scene whose
    /// levels bracket it and that scene's nearest level. Flattens the label
    /// distribution, which otherwise thins out towards the brightest β.
    BalancedBeta,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            epochs: 240,
            batch: 4,
            crop: 32,
            lr: 2e-4,
            optim: AdamWConfig::default(),
            flips: true,
            rotations: true,
            weights: LossWeights::default(),
            seed: 0,
            validate: false,
            targets: TargetPolicy::UniformLevel,
        }
    }
}

impl TrainConfig {
    pub fn validate_for(&self, r: usize) -> Result<()> {
        if self.batch == 0 || self.epochs == 0 {
            return Err(contract("batch and epochs must be at least 1"));
        }
        if self.crop == 0 || self.crop % r != 0 {
            return Err(contract(format!("crop {} is not a positive multiple of r={r}", self.crop)));
        }
        if !(self.lr > 0.0 && self.lr.is_finite()) {
            return Err(contract(format!("learning rate {} must be positive", self.lr)));
        }
        self.weights.validate()
    }

    pub fn steps_per_epoch(&self, scenes: usize) -> usize {
        scenes.div_ceil(self.batch).max(1)
    }

    pub fn total_steps(&self, scenes: usize) -> usize {
        self.epochs * self.steps_per_epoch(scenes)
    }

    /// Three epochs of linear warm-up, kept below the total.
    pub fn warmup_steps(&self, scenes: usize) -> usize {
        let w = 3 * (scenes / self.batch).max(1);
        w.min(self.total_steps(scenes).saturating_sub(1))
    }
}

/// One training element.
#[derive(Clone, Debug)]
pub struct Sample {
    pub scene: usize,
    pub input_level: usize,
    pub target_level: usize,
    pub beta: f64,
    pub input: RgbImage,
    pub target: RgbImage,
}

/// Crop plus one of the eight square symmetries, applied identically to
/// every image of a sample.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Augment {
    pub y0: usize,
    pub x0: usize,
    pub size: usize,
    pub flip: bool,
    /// Quarter turns counter-clockwise.
    pub turns: u8,
}

impl Augment {
    pub fn apply(&self, img: &RgbImage) -> RgbImage {
        let s = self.size;
        let mut out = RgbImage::filled(s, s, [0.0; 3]);
        for y in 0..s {
            for x in 0..s {
                // output (y, x) reads source (sy, sx) of the cropped patch
                let (mut sy, mut sx) = (y, x);
                for _ in 0..self.turns {
                    (sy, sx) = (sx, s - 1 - sy);
                }
                if self.flip {
                    sx = s - 1 - sx;
                }
                out.set_pixel(y, x, img.pixel(self.y0 + sy, self.x0 + sx));
            }
        }
        out
    }
}

/// Draws one sample: input level uniform over the darkest quartile, target
/// level uniform over every level, hybrid target from the reference.
pub fn draw_sample(scene: usize, stack: &IlluminationStack, cfg: &TrainConfig, rng: &mut impl Rng) -> Result<Sample> {
    draw_sample_at(scene, stack, None, cfg, rng)
}

fn draw_sample_at(
    scene: usize,
    stack: &IlluminationStack,
    target_level: Option<usize>,
    cfg: &TrainConfig,
    rng: &mut impl Rng,
) -> Result<Sample> {
    let input_level = rng.random_range(stack.darkest_quartile());
    let target_level = match target_level {
        Some(l) => l,
        None => rng.random_range(0..stack.levels.len()),
    };
    let (h, w) = (stack.height(), stack.width());
    if cfg.crop > h || cfg.crop > w {
        return Err(contract(format!("crop {} exceeds {h}x{w} scene", cfg.crop)));
    }
    let aug = Augment {
        y0: rng.random_range(0..=h - cfg.crop),
        x0: rng.random_range(0..=w - cfg.crop),
        size: cfg.crop,
        flip: cfg.flips && rng.random_bool(0.5),
        turns: if cfg.rotations { rng.random_range(0..4) } else { 0 },
    };
    let target = synthesize_hybrid_target(stack.reference_image(), &stack.levels[target_level].image)?;
    Ok(Sample {
        scene,
        input_level,
        target_level,
        beta: stack.levels[target_level].beta,
        input: aug.apply(&stack.levels[input_level].image),
        target: aug.apply(&target),
    })
}

/// A batch of `cfg.batch` samples. Each element gets its own generator
/// seeded from `rng`, so assembly can run in parallel and still be ordered.
pub fn sample_batch(stacks: &[&IlluminationStack], cfg: &TrainConfig, rng: &mut impl Rng) -> Result<Vec<Sample>> {
    if stacks.is_empty() {
        return Err(contract("cannot sample from an empty dataset"));
    }
    let picks: Vec<(usize, Option<usize>, u64)> = (0..cfg.batch)
        .map(|_| {
            let (scene, level) = match cfg.targets {
                TargetPolicy::UniformLevel => (rng.random_range(0..stacks.len()), None),
                TargetPolicy::BalancedBeta => {
                    let (s, l) = balanced_pick(stacks, rng);
                    (s, Some(l))
                }
            };
            (scene, level, rng.random())
        })
        .collect();
    picks
        .par_iter()
        .map(|&(scene, level, seed)| draw_sample_at(scene, stacks[scene], level, cfg, &mut ChaCha8Rng::seed_from_u64(seed)))
        .collect()
}

fn balanced_pick(stacks: &[&IlluminationStack], rng: &mut impl Rng) -> (usize, usize) {
    let (lo, hi) = beta_range(stacks);
    let b = if hi > lo { rng.random_range(lo..=hi) } else { lo };
    let span = |s: &IlluminationStack| {
        let betas = s.betas();
        (betas.iter().copied().fold(f64::INFINITY, f64::min), betas.iter().copied().fold(f64::NEG_INFINITY, f64::max))
    };
    let covering: Vec<usize> = (0..stacks.len())
        .filter(|&i| {
            let (a, z) = span(stacks[i]);
            a <= b && b <= z
        })
        .collect();
    let scene = if covering.is_empty() {
        // b falls in a gap between stacks: take the stack closest to it
        (0..stacks.len())
            .min_by(|&i, &j| {
                let d = |k: usize| {
                    let (a, z) = span(stacks[k]);
                    (a - b).max(b - z).max(0.0)
                };
                d(i).total_cmp(&d(j))
            })
            .unwrap_or(0)
    } else {
        covering[rng.random_range(0..covering.len())]
    };
    let levels = &stacks[scene].levels;
    let level = (0..levels.len())
        .min_by(|&i, &j| (levels[i].beta - b).abs().total_cmp(&(levels[j].beta - b).abs()))
        .unwrap_or(0);
    (scene, level)
}

type ParamGrads = Vec<(ParamId, Tensor<f32>)>;

/// Loss and parameter gradients of one sample.
pub fn sample_gradients(model: &CleRwkvModel, sample: &Sample, weights: &LossWeights) -> Result<(f64, ParamGrads)> {
    let mut tape = Tape::<f32>::new();
    let mut b = Bindings::new(&model.store);
    let beta = match model.config.variant {
        Variant::Conditional => Some(sample.beta),
        Variant::Base => None,
    };
    let out = model.forward_tape(&mut tape, &mut b, &sample.input.to_tensor(), beta)?;
    let target = tape.constant(sample.target.to_tensor())?;
    let hvi = match (model.config.space, out.hvi) {
        (ColorSpace::Hvi, Some(pred)) => Some((pred, tape.constant(hvit(&sample.target).to_tensor())?)),
        _ => None,
    };
    let loss = total_loss(&mut tape, out.rgb, target, hvi, weights)?;
    let value = tape.value(loss).item() as f64;
    let grads = tape.backward(loss)?;
    let owned = grads.params().filter_map(|(id, g)| g.map(|g| (id, g.clone()))).collect();
    Ok((value, owned))
}

/// Mean loss over the batch; gradients are summed in sample order and
/// averaged into the store.
pub fn batch_gradients(model: &mut CleRwkvModel, batch: &[Sample], weights: &LossWeights) -> Result<f64> {
    let per: Vec<(f64, ParamGrads)> = {
        let m = &*model;
        batch.par_iter().map(|s| sample_gradients(m, s, weights)).collect::<Result<_>>()?
    };
    model.store.zero_grad();
    let mut loss = 0.0;
    for (l, grads) in &per {
        loss += l;
        for (id, g) in grads {
            model.store.get_mut(*id).grad.add_assign(g);
        }
    }
    let inv = 1.0 / batch.len() as f32;
    for p in model.store.iter_mut() {
        p.grad.data_mut().iter_mut().for_each(|g| *g *= inv);
    }
    Ok(loss / batch.len() as f64)
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct StepRecord {
    pub step: usize,
    pub loss: f64,
    pub lr: f64,
    pub millis: u128,
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct ValidationRecord {
    pub epoch: usize,
    pub psnr: f64,
    pub luminance_error: f64,
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct TrainLog {
    pub steps: Vec<StepRecord>,
    pub validation: Vec<ValidationRecord>,
}

impl TrainLog {
    /// One line per record: `step=.. loss=.. lr=.. millis=..`, then
    /// `epoch=.. psnr=.. luminance_error=..` lines.
    pub fn to_text(&self) -> String {
        let mut s = String::new();
        for r in &self.steps {
            let _ = writeln!(s, "step={} loss={:.6} lr={:e} millis={}", r.step, r.loss, r.lr, r.millis);
        }
        for v in &self.validation {
            let _ = writeln!(s, "epoch={} psnr={:.4} luminance_error={:.6}", v.epoch, v.psnr, v.luminance_error);
        }
        s
    }

    pub fn final_loss(&self) -> Option<f64> {
        self.steps.last().map(|r| r.loss)
    }
}

/// Trains `model` on `train` stacks; `held_out` feeds per-epoch validation.
/// Deterministic given the config seed, independent of thread count.
pub fn train(
    model: &mut CleRwkvModel,
    train: &[&IlluminationStack],
    held_out: &[&IlluminationStack],
    cfg: &TrainConfig,
) -> Result<TrainLog> {
    train_with(model, train, held_out, cfg, |_| {})
}

/// [`train`] with a callback after every step.
pub fn train_with(
    model: &mut CleRwkvModel,
    train: &[&IlluminationStack],
    held_out: &[&IlluminationStack],
    cfg: &TrainConfig,
    mut on_step: impl FnMut(&StepRecord),
) -> Result<TrainLog> {
    cfg.validate_for(model.config.r)?;
    if train.is_empty() {
        return Err(contract("training set is empty"));
    }
    let total = cfg.total_steps(train.len());
    let warmup = cfg.warmup_steps(train.len());
    let per_epoch = cfg.steps_per_epoch(train.len());
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut opt = AdamW::new(&model.store, cfg.optim);
    let start = Instant::now();
    let mut log = TrainLog::default();
    for step in 0..total {
        let batch = sample_batch(train, cfg, &mut rng)?;
        let loss = batch_gradients(model, &batch, &cfg.weights).map_err(|e| at_step(step, e))?;
        if !loss.is_finite() {
            return Err(at_step(step, Error::Numeric {
                op: "loss",
                detail: format!("{loss}"),
            }));
        }
        let lr = cosine_lr(step, total, warmup, cfg.lr);
        adamw_step(&mut model.store, &mut opt, lr).map_err(|e| at_step(step, e))?;
        let rec = StepRecord {
            step,
            loss,
            lr,
            millis: start.elapsed().as_millis(),
        };
        on_step(&rec);
        log.steps.push(rec);
        if cfg.validate && (step + 1) % per_epoch == 0 && !held_out.is_empty() {
            log.validation.push(validate(model, held_out, (step + 1) / per_epoch)?);
        }
    }
    model.meta.seed = cfg.seed;
    model.meta.weights = cfg.weights;
    model.meta.beta_range = beta_range(train);
    Ok(log)
}

fn at_step(step: usize, e: Error) -> Error {
    match e {
        Error::Numeric { op, detail } => Error::Numeric {
            op,
            detail: format!("training step {step}: {detail}"),
        },
        other => other,
    }
}

fn beta_range(stacks: &[&IlluminationStack]) -> (f64, f64) {
    stacks
        .iter()
        .flat_map(|s| s.levels.iter().map(|l| l.beta))
        .fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), b| (lo.min(b), hi.max(b)))
}

/// Hybrid target of `level` for a stack.
pub fn hybrid_target(stack: &IlluminationStack, level: usize) -> Result<RgbImage> {
    synthesize_hybrid_target(stack.reference_image(), &stack.levels[level].image)
}

/// Up to 5 held-out scenes at the lowest, middle and highest level, fed
/// the darkest capture.
fn validate(model: &CleRwkvModel, held_out: &[&IlluminationStack], epoch: usize) -> Result<ValidationRecord> {
    let pairs: Vec<PairMetrics> = held_out
        .iter()
        .take(5)
        .flat_map(|s| {
            let n = s.levels.len();
            [0, n / 2, n - 1].map(|lvl| (*s, lvl))
        })
        .collect::<Vec<_>>()
        .par_iter()
        .map(|&(s, lvl)| {
            let beta = s.levels[lvl].beta;
            let out = model.enhance(&s.levels[0].image, beta)?;
            PairMetrics::measure(&out, &hybrid_target(s, lvl)?, beta)
        })
        .collect::<Result<_>>()?;
    let n = pairs.len() as f64;
    Ok(ValidationRecord {
        epoch,
        psnr: pairs.iter().map(|p| p.psnr).sum::<f64>() / n,
        luminance_error: pairs.iter().map(|p| p.luminance_error).sum::<f64>() / n,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::lightsynth::{Dataset, SynthConfig};
    use crate::model::CleRwkvConfig;

    fn tiny_data() -> Dataset {
        Dataset::synthesize(&SynthConfig {
            scenes: 4,
            levels: 8,
            height: 12,
            width: 12,
            seed: 3,
            ..Default::default()
        })
        .unwrap()
    }

    fn tiny_model(seed: u64) -> CleRwkvModel {
        CleRwkvModel::new(
            CleRwkvConfig {
                r: 2,
                c_in: 4,
                c_model: 8,
                num_blocks: 1,
                ..Default::default()
            },
            seed,
        )
        .unwrap()
    }

    fn cfg() -> TrainConfig {
        TrainConfig {
            epochs: 2,
            batch: 2,
            crop: 8,
            lr: 1e-3,
            ..Default::default()
        }
    }

    #[test]
    fn augment_is_a_symmetry_of_the_patch() {
        let img = RgbImage::new(4, 4, (0..48).map(|v| v as f32 / 48.0).collect()).unwrap();
        let rot = Augment {
            y0: 0,
            x0: 0,
            size: 4,
            flip: false,
            turns: 1,
        };
        let r4 = (0..4).fold(img.clone(), |acc, _| rot.apply(&acc));
        assert_eq!(r4, img);
        let flip = Augment { flip: true, turns: 0, ..rot };
        assert_eq!(flip.apply(&img).pixel(0, 0), img.pixel(0, 3));
        assert_eq!(flip.apply(&flip.apply(&img)), img);
        // one quarter turn moves the top-right corner to the top-left
        assert_eq!(rot.apply(&img).pixel(0, 0), img.pixel(0, 3));
    }

    #[test]
    fn samples_follow_the_policy() {
        let ds = tiny_data();
        let stacks: Vec<&IlluminationStack> = ds.stacks.iter().collect();
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let c = TrainConfig { batch: 64, ..cfg() };
        for s in sample_batch(&stacks, &c, &mut rng).unwrap() {
            let st = stacks[s.scene];
            assert!(st.darkest_quartile().contains(&s.input_level));
            assert_eq!(s.beta, st.levels[s.target_level].beta);
            assert_eq!((s.input.height, s.target.width), (8, 8));
        }
    }

    #[test]
    fn balanced_targets_cover_the_bright_end() {
        let ds = tiny_data();
        let stacks: Vec<&IlluminationStack> = ds.stacks.iter().collect();
        let (lo, hi) = beta_range(&stacks);
        let top = lo + 0.8 * (hi - lo);
        let bright_share = |targets| {
            let c = TrainConfig { batch: 400, targets, ..cfg() };
            let batch = sample_batch(&stacks, &c, &mut ChaCha8Rng::seed_from_u64(5)).unwrap();
            for s in &batch {
                assert!(stacks[s.scene].darkest_quartile().contains(&s.input_level));
                assert_eq!(s.beta, stacks[s.scene].levels[s.target_level].beta);
            }
            batch.iter().filter(|s| s.beta >= top).count() as f64 / batch.len() as f64
        };
        let uniform = bright_share(TargetPolicy::UniformLevel);
        let balanced = bright_share(TargetPolicy::BalancedBeta);
        assert!(balanced > uniform, "balanced {balanced} vs uniform {uniform}");
    }

    #[test]
    fn augmentation_hits_input_and_target_alike() {
        let ds = tiny_data();
        let st = &ds.stacks[0];
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let c = cfg();
        for _ in 0..20 {
            let mut r2 = rng.clone();
            let s = draw_sample(0, st, &c, &mut rng).unwrap();
            // replay the draws to recover the augmentation
            let _ = r2.random_range(st.darkest_quartile());
            let _ = r2.random_range(0..st.levels.len());
            let aug = Augment {
                y0: r2.random_range(0..=4),
                x0: r2.random_range(0..=4),
                size: 8,
                flip: r2.random_bool(0.5),
                turns: r2.random_range(0..4),
            };
            assert_eq!(s.input, aug.apply(&st.levels[s.input_level].image));
            assert_eq!(s.target, aug.apply(&hybrid_target(st, s.target_level).unwrap()));
        }
    }

    #[test]
    fn warmup_is_three_epochs() {
        let c = TrainConfig { batch: 4, epochs: 10, ..Default::default() };
        assert_eq!(c.warmup_steps(50), 36);
        assert_eq!(c.total_steps(50), 130);
    }

    #[test]
    fn training_is_bitwise_reproducible() {
        let ds = tiny_data();
        let stacks: Vec<&IlluminationStack> = ds.stacks.iter().collect();
        let mut a = tiny_model(4);
        let mut b = tiny_model(4);
        let la = train(&mut a, &stacks, &[], &cfg()).unwrap();
        let lb = rayon::ThreadPoolBuilder::new()
            .num_threads(1)
            .build()
            .unwrap()
            .install(|| train(&mut b, &stacks, &[], &cfg()).unwrap());
        assert_eq!(a.store.flatten(), b.store.flatten());
        assert_eq!(
            la.steps.iter().map(|s| s.loss.to_bits()).collect::<Vec<_>>(),
            lb.steps.iter().map(|s| s.loss.to_bits()).collect::<Vec<_>>()
        );
    }

    #[test]
    fn lr_trace_follows_the_schedule() {
        let ds = tiny_data();
        let stacks: Vec<&IlluminationStack> = ds.stacks.iter().collect();
        let mut m = tiny_model(1);
        let c = TrainConfig { epochs: 5, ..cfg() };
        let log = train(&mut m, &stacks, &[], &c).unwrap();
        let total = c.total_steps(4);
        for r in &log.steps {
            assert_eq!(r.lr, cosine_lr(r.step, total, c.warmup_steps(4), c.lr));
        }
        assert!(log.steps.windows(2).all(|w| w[1].step > w[0].step));
    }

    #[test]
    fn single_batch_overfits() {
        let ds = tiny_data();
        let st = &ds.stacks[1];
        let c = TrainConfig { crop: 8, ..cfg() };
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let batch: Vec<Sample> = (0..2).map(|_| draw_sample(1, st, &c, &mut rng).unwrap()).collect();
        let mut m = tiny_model(6);
        let mut opt = AdamW::new(&m.store, AdamWConfig::default());
        let mut losses = Vec::new();
        for _ in 0..500 {
            losses.push(batch_gradients(&mut m, &batch, &c.weights).unwrap());
            adamw_step(&mut m.store, &mut opt, 3e-3).unwrap();
        }
        assert!(losses[499] < 0.1 * losses[0], "{} -> {}", losses[0], losses[499]);
        let lead = losses[..100].iter().sum::<f64>();
        let trail = losses[400..].iter().sum::<f64>();
        assert!(trail < lead);
    }

    #[test]
    fn validation_runs_each_epoch() {
        let ds = tiny_data();
        let stacks: Vec<&IlluminationStack> = ds.stacks.iter().collect();
        let mut m = tiny_model(2);
        let c = TrainConfig { validate: true, ..cfg() };
        let log = train(&mut m, &stacks[..3], &stacks[3..], &c).unwrap();
        assert_eq!(log.validation.len(), 2);
        let text = log.to_text();
        assert!(text.starts_with("step=0 loss="));
        assert!(text.contains("epoch=2 psnr="));
    }
}

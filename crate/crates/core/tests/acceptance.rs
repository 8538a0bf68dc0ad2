//! Acceptance run: one PASS/FAIL line per criterion, non-zero exit if any
//! criterion fails. Thresholds are pinned as constants next to each check.
//!
//! The three desk-scale trainings (conditional HVI, conditional sRGB, base)
//! dominate the runtime; set `CLERWKV_ACCEPT_EPOCHS` to shorten them when
//! iterating locally.

use std::time::{Duration, Instant};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use clerwkv::blocks::{ChannelMix, Film, FilmDims, LRwkvBlock, SpatialMix};
use clerwkv::color_hvi::{hsv_to_rgb, hvit, phvit, rgb_to_hvi, RgbImage};
use clerwkv::lightsynth::{noncommute_gap, Dataset, IspConfig, RadianceScene, SynthConfig};
use clerwkv::losses::{noise_variance_ratio, total_loss, LossWeights};
use clerwkv::model::{CleRwkvConfig, CleRwkvModel, ColorSpace};
use clerwkv::numerics::{grad_check, Bindings, GradCheckConfig, ParamStore, Tape, Tensor, Var};
use clerwkv::s2d::{pixel_shuffle, pixel_unshuffle, ps_ds_embed};
use clerwkv::trainer::{
    controllability_eval, l1_optimal_constant, median_regression_experiment, paradigm_gap, train, ControllabilityReport,
    MedianReport, ParadigmReport, TargetPolicy, TrainConfig,
};
use clerwkv::wkv::{biwkv_naive, biwkv_scan, WkvParams};
use clerwkv::Result;

const FD: GradCheckConfig = GradCheckConfig {
    h: 1e-5,
    tolerance: 1e-4,
};

struct Verdict {
    pass: bool,
    detail: String,
}

fn verdict(pass: bool, detail: impl Into<String>) -> Verdict {
    Verdict {
        pass,
        detail: detail.into(),
    }
}

fn run(id: usize, name: &str, f: impl FnOnce() -> Result<Verdict>) -> bool {
    let start = Instant::now();
    let v = f().unwrap_or_else(|e| verdict(false, format!("error: {e}")));
    println!(
        "criterion {id:>2} {:<4} {name}: {} [{:.1}s]",
        if v.pass { "PASS" } else { "FAIL" },
        v.detail,
        start.elapsed().as_secs_f64()
    );
    v.pass
}

// ---------------------------------------------------------------- 1

fn hvi_round_trip() -> Result<Verdict> {
    const ROUND_TRIP: f64 = 1e-6;
    const SCALE_INV: f64 = 1e-9;
    const BUDGET: Duration = Duration::from_secs(1);
    let start = Instant::now();
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let img = RgbImage::new(100, 100, (0..30_000).map(|_| rng.random_range(0.0f32..=1.0)).collect())?;
    let back = phvit(&hvit(&img));
    let trip = img.data.iter().zip(&back.data).map(|(a, b)| (a - b).abs() as f64).fold(0.0, f64::max);
    let mut scale = 0.0f64;
    for _ in 0..10_000 {
        let rgb: [f64; 3] = [rng.random_range(0.0..1.0), rng.random_range(0.0..1.0), rng.random_range(0.0..1.0)];
        let k = rng.random_range(0.001..=1.0);
        let a = rgb_to_hvi(rgb);
        let b = rgb_to_hvi(rgb.map(|c| c * k));
        scale = scale.max((a[0] - b[0]).abs()).max((a[1] - b[1]).abs());
    }
    let took = start.elapsed();
    Ok(verdict(
        trip < ROUND_TRIP && scale < SCALE_INV && took < BUDGET,
        format!("round trip {trip:.2e} (< {ROUND_TRIP:e}), chroma under scaling {scale:.2e} (< {SCALE_INV:e}), {took:.2?} (< 1 s)"),
    ))
}

// ---------------------------------------------------------------- 2

fn wkv_equivalence() -> Result<Verdict> {
    const REL: f64 = 1e-5;
    let start = Instant::now();
    let mut worst = 0.0f64;
    for t in [1usize, 2, 3, 7, 64, 256] {
        for c in [1usize, 4, 16] {
            for seed in 0..20u64 {
                let mut rng = ChaCha8Rng::seed_from_u64(seed * 1000 + (t * 17 + c) as u64);
                let normal = rand_distr::StandardNormal;
                let k = Tensor::<f64>::from_fn(&[1, t, c], |_| rng.sample(normal));
                let v = Tensor::<f64>::from_fn(&[1, t, c], |_| rng.sample(normal));
                let w = (0..c).map(|_| rng.random_range(0.05..8.0)).collect();
                let u = (0..c).map(|_| rng.random_range(-2.0..2.0)).collect();
                let p = WkvParams::new(w, u)?;
                let a = biwkv_scan(&k, &v, &p)?;
                let b = biwkv_naive(&k, &v, &p)?;
                for (x, y) in a.data().iter().zip(b.data()) {
                    worst = worst.max((x - y).abs() / y.abs().max(1e-8));
                }
            }
        }
    }
    let took = start.elapsed();
    Ok(verdict(
        worst < REL && took < Duration::from_secs(30),
        format!("max rel err {worst:.2e} (< {REL:e}) over 360 cases, {took:.2?} (< 30 s)"),
    ))
}

// ---------------------------------------------------------------- 3

type Eval<'a> = dyn Fn(&[f64], bool) -> Result<(f64, Vec<f64>)> + 'a;

fn fd_error(eval: &Eval<'_>, point: &[f64], cfg: GradCheckConfig) -> Result<f64> {
    Ok(grad_check(|x| eval(x, false).map(|r| r.0), |x| eval(x, true).map(|r| r.1), point, cfg)?.max_rel_err)
}

type Unary<'a> = dyn Fn(&mut Tape<f64>, Var) -> Result<Var> + 'a;

/// Worst relative error of `d mean(weights * f(x)) / dx` over random points.
fn unary_error(shape: &[usize], f: &Unary<'_>, range: (f64, f64), points: usize, seed: u64) -> Result<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut worst = 0.0f64;
    for _ in 0..points {
        let x0 = Tensor::<f64>::from_fn(shape, |_| rng.random_range(range.0..range.1));
        let out_shape = {
            let mut t = Tape::<f64>::inference();
            let x = t.constant(x0.clone())?;
            let y = f(&mut t, x)?;
            t.shape(y).to_vec()
        };
        let weights = Tensor::<f64>::from_fn(&out_shape, |_| rng.random_range(-1.0..1.0));
        let eval = |x: &[f64], want: bool| -> Result<(f64, Vec<f64>)> {
            let mut t = if want { Tape::new() } else { Tape::inference() };
            let xv = t.input(Tensor::new(shape, x.to_vec())?)?;
            let y = f(&mut t, xv)?;
            let wv = t.constant(weights.clone())?;
            let p = t.mul(y, wv)?;
            let l = t.mean(p)?;
            let val = t.value(l).item();
            if !want {
                return Ok((val, vec![]));
            }
            let g = t.backward(l)?;
            Ok((val, g.wrt(xv).map(|g| g.data().to_vec()).unwrap_or_else(|| vec![0.0; x.len()])))
        };
        worst = worst.max(fd_error(&eval, x0.data(), FD)?);
    }
    Ok(worst)
}

fn random_tensor(shape: &[usize], seed: u64) -> Tensor<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    Tensor::from_fn(shape, |_| rng.random_range(-1.0..1.0))
}

fn hue_safe_pixels(n: usize, rng: &mut impl Rng) -> Vec<f64> {
    // hue inside a sextant, saturation and value away from the clip boundaries
    (0..n)
        .flat_map(|_| {
            let hue = (rng.random_range(0..6) as f64 + rng.random_range(0.2..0.8)) / 6.0;
            hsv_to_rgb([hue, rng.random_range(0.2..0.8), rng.random_range(0.2..0.8)])
        })
        .collect()
}

fn op_suite() -> Result<Vec<(&'static str, f64)>> {
    const POINTS: usize = 100;
    let full = random_tensor(&[2, 2, 3], 1).map(|v| v + 1.5);
    let chan = random_tensor(&[3], 2);
    let w = random_tensor(&[3, 4], 3);
    let b = random_tensor(&[4], 4);
    let dk = random_tensor(&[3, 3, 3], 5);
    let ck = random_tensor(&[3, 3, 3, 2], 6);
    let cb = random_tensor(&[2], 7);
    let scale = random_tensor(&[3], 8).map(|v| 1.0 + 0.5 * v);
    let offset = random_tensor(&[3], 9).map(|v| 0.5 * v);
    let blur = Tensor::<f64>::new(&[2, 3], vec![0.1, 0.2, 0.3, -0.4, 0.5, 0.6])?;
    let x4 = random_tensor(&[4, 4, 3], 10);
    let wk_v = random_tensor(&[3, 2, 4], 11);
    let wk_k = random_tensor(&[3, 2, 4], 12);
    let wk_w = Tensor::<f64>::new(&[4], vec![0.5, 1.0, 1.5, 3.0])?;
    let wk_u = Tensor::<f64>::new(&[4], vec![0.0, 0.3, -0.3, 1.0])?;
    let c = |t: &mut Tape<f64>, v: &Tensor<f64>| t.constant(v.clone());
    let sq = |t: &mut Tape<f64>, y: Var| t.mul(y, y);
    let s = [4usize, 4, 3];
    let mut out = Vec::new();
    let mut add = |name: &'static str, shape: &[usize], f: &Unary<'_>, range: (f64, f64)| -> Result<()> {
        out.push((name, unary_error(shape, f, range, POINTS, name.len() as u64 * 131)?));
        Ok(())
    };
    add("sigmoid", &s, &|t, x| t.sigmoid(x), (-3.0, 3.0))?;
    add("tanh", &s, &|t, x| t.tanh(x), (-3.0, 3.0))?;
    add("squared_relu", &s, &|t, x| t.squared_relu(x), (-2.0, 2.0))?;
    add("softplus", &s, &|t, x| t.softplus(x), (-4.0, 4.0))?;
    add("clamp01", &s, &|t, x| t.clamp01(x), (-0.5, 1.5))?;
    add("abs", &s, &|t, x| t.abs(x), (-1.0, 1.0))?;
    add("sqrt", &s, &|t, x| t.sqrt(x), (0.1, 2.0))?;
    add("add_scalar", &s, &|t, x| t.add_scalar(x, 0.3), (-1.0, 1.0))?;
    add("mul_scalar", &s, &|t, x| t.mul_scalar(x, -1.7), (-1.0, 1.0))?;
    add("mean", &s, &|t, x| t.mean(x), (-1.0, 1.0))?;
    add("add", &[2, 2, 3], &|t, x| {
        let y = c(t, &full)?;
        let z = t.add(x, y)?;
        t.mul(z, x)
    }, (-1.0, 1.0))?;
    add("sub", &[2, 2, 3], &|t, x| {
        let y = c(t, &full)?;
        let z = t.sub(y, x)?;
        sq(t, z)
    }, (-1.0, 1.0))?;
    add("mul_broadcast", &[2, 2, 3], &|t, x| {
        let y = c(t, &chan)?;
        let z = t.mul(x, y)?;
        t.mul(z, x)
    }, (-1.0, 1.0))?;
    add("div", &[2, 2, 3], &|t, x| {
        let y = c(t, &full)?;
        let d = sq(t, x)?;
        let d = t.add_scalar(d, 1.0)?;
        let n = t.div(y, d)?;
        t.div(n, y)
    }, (-1.0, 1.0))?;
    add("concat_channels", &[2, 2, 3], &|t, x| {
        let y = sq(t, x)?;
        t.concat_channels(x, y)
    }, (-1.0, 1.0))?;
    add("slice_channels", &[2, 2, 3], &|t, x| {
        let y = t.slice_channels(x, 1, 2)?;
        sq(t, y)
    }, (-1.0, 1.0))?;
    add("reshape", &s, &|t, x| {
        let y = t.reshape(x, &[16, 3])?;
        sq(t, y)
    }, (-1.0, 1.0))?;
    add("matmul", &s, &|t, x| {
        let wv = c(t, &w)?;
        t.matmul(x, wv)
    }, (-1.0, 1.0))?;
    add("matmul_weight", &[3, 4], &|t, wv| {
        let xv = c(t, &x4)?;
        let y = t.matmul(xv, wv)?;
        sq(t, y)
    }, (-1.0, 1.0))?;
    add("conv1x1", &s, &|t, x| {
        let wv = c(t, &w)?;
        let bv = c(t, &b)?;
        let y = t.conv1x1(x, wv, Some(bv))?;
        sq(t, y)
    }, (-1.0, 1.0))?;
    add("dwconv3x3", &s, &|t, x| {
        let k = c(t, &dk)?;
        let y = t.dwconv3x3(x, k)?;
        sq(t, y)
    }, (-1.0, 1.0))?;
    add("dwconv3x3_kernel", &[3, 3, 3], &|t, k| {
        let xv = c(t, &x4)?;
        let y = t.dwconv3x3(xv, k)?;
        sq(t, y)
    }, (-1.0, 1.0))?;
    add("conv3x3", &s, &|t, x| {
        let k = c(t, &ck)?;
        let bv = c(t, &cb)?;
        let y = t.conv3x3(x, k, Some(bv))?;
        sq(t, y)
    }, (-1.0, 1.0))?;
    add("conv3x3_kernel", &[3, 3, 3, 2], &|t, k| {
        let xv = c(t, &x4)?;
        let y = t.conv3x3(xv, k, None)?;
        sq(t, y)
    }, (-1.0, 1.0))?;
    add("layer_norm", &s, &|t, x| {
        let sv = c(t, &scale)?;
        let ov = c(t, &offset)?;
        t.layer_norm(x, sv, ov)
    }, (-1.0, 1.0))?;
    add("layer_norm_affine", &[3], &|t, sv| {
        let xv = c(t, &x4)?;
        let y = t.layer_norm(xv, sv, sv)?;
        sq(t, y)
    }, (0.5, 1.5))?;
    add("pixel_unshuffle", &s, &|t, x| {
        let y = t.pixel_unshuffle(x, 2)?;
        sq(t, y)
    }, (-1.0, 1.0))?;
    add("pixel_shuffle", &[2, 2, 12], &|t, x| {
        let y = t.pixel_shuffle(x, 2)?;
        sq(t, y)
    }, (-1.0, 1.0))?;
    add("filter2d", &s, &|t, x| {
        let y = t.filter2d(x, blur.clone())?;
        sq(t, y)
    }, (-1.0, 1.0))?;
    add("avg_pool2", &s, &|t, x| {
        let y = t.avg_pool2(x)?;
        sq(t, y)
    }, (-1.0, 1.0))?;
    add("biwkv_k", &[3, 2, 4], &|t, k| {
        let (v, w, u) = (c(t, &wk_v)?, c(t, &wk_w)?, c(t, &wk_u)?);
        t.biwkv(k, v, w, u)
    }, (-2.0, 2.0))?;
    add("biwkv_v", &[3, 2, 4], &|t, v| {
        let (k, w, u) = (c(t, &wk_k)?, c(t, &wk_w)?, c(t, &wk_u)?);
        let y = t.biwkv(k, v, w, u)?;
        sq(t, y)
    }, (-2.0, 2.0))?;
    add("biwkv_w", &[4], &|t, w| {
        let (k, v, u) = (c(t, &wk_k)?, c(t, &wk_v)?, c(t, &wk_u)?);
        let w = t.softplus(w)?;
        t.biwkv(k, v, w, u)
    }, (-1.0, 2.0))?;
    add("biwkv_u", &[4], &|t, u| {
        let (k, v, w) = (c(t, &wk_k)?, c(t, &wk_v)?, c(t, &wk_w)?);
        t.biwkv(k, v, w, u)
    }, (-1.0, 1.0))?;
    add("hvi_clip", &[2, 3], &|t, x| {
        let y = t.add_scalar(x, 1.5)?;
        let y = t.hvi_clip(y)?;
        sq(t, y)
    }, (-0.2, 0.2))?;

    // phvit and the full objective need hue-safe points, not a box
    let mut rng = ChaCha8Rng::seed_from_u64(77);
    let mut worst_phvit = 0.0f64;
    let mut worst_loss = 0.0f64;
    let target = RgbImage::new(8, 8, hue_safe_pixels(64, &mut rng).iter().map(|&v| v as f32).collect())?;
    let weights = LossWeights {
        lpips: 0.1,
        ..LossWeights::default()
    };
    for _ in 0..POINTS {
        let px: Vec<f64> = hue_safe_pixels(4, &mut rng).chunks_exact(3).flat_map(|p| rgb_to_hvi([p[0], p[1], p[2]])).collect();
        let eval = |x: &[f64], want: bool| -> Result<(f64, Vec<f64>)> {
            let mut t = if want { Tape::new() } else { Tape::inference() };
            let xv = t.input(Tensor::new(&[2, 2, 3], x.to_vec())?)?;
            let y = t.hvi_clip(xv)?;
            let y = t.phvit(y)?;
            let y = t.mul(y, y)?;
            let l = t.mean(y)?;
            let val = t.value(l).item();
            if !want {
                return Ok((val, vec![]));
            }
            Ok((val, t.backward(l)?.wrt(xv).unwrap().data().to_vec()))
        };
        worst_phvit = worst_phvit.max(fd_error(&eval, &px, FD)?);
    }
    for _ in 0..10 {
        let hvi: Vec<f64> = hue_safe_pixels(64, &mut rng).chunks_exact(3).flat_map(|p| rgb_to_hvi([p[0], p[1], p[2]])).collect();
        let eval = |x: &[f64], want: bool| -> Result<(f64, Vec<f64>)> {
            let mut t = if want { Tape::new() } else { Tape::inference() };
            let xv = t.input(Tensor::new(&[8, 8, 3], x.to_vec())?)?;
            let ph = t.hvi_clip(xv)?;
            let rgb = t.phvit(ph)?;
            let tr = t.constant(target.to_tensor())?;
            let th = t.constant(hvit(&target).to_tensor())?;
            let l = total_loss(&mut t, rgb, tr, Some((ph, th)), &weights)?;
            let val = t.value(l).item();
            if !want {
                return Ok((val, vec![]));
            }
            Ok((val, t.backward(l)?.wrt(xv).unwrap().data().to_vec()))
        };
        worst_loss = worst_loss.max(fd_error(&eval, &hvi, FD)?);
    }
    out.push(("phvit", worst_phvit));
    out.push(("total_loss", worst_loss));
    Ok(out)
}

/// Worst relative error over every parameter of `store` and the input.
fn module_error(store: &ParamStore, x0: &Tensor<f64>, f: &dyn Fn(&mut Tape<f64>, &mut Bindings<f64>, Var) -> Result<Var>) -> Result<f64> {
    let s64 = store.cast::<f64>();
    let np = s64.num_values();
    let mut point = s64.flatten();
    point.extend_from_slice(x0.data());
    let out_shape = {
        let mut t = Tape::inference();
        let mut b = Bindings::new(&s64);
        let x = t.constant(x0.clone())?;
        let y = f(&mut t, &mut b, x)?;
        t.shape(y).to_vec()
    };
    let weights = random_tensor(&out_shape, 5150);
    let eval = |p: &[f64], want: bool| -> Result<(f64, Vec<f64>)> {
        let mut s = s64.clone();
        s.assign_flat(&p[..np])?;
        let mut t = if want { Tape::new() } else { Tape::inference() };
        let mut b = Bindings::new(&s);
        let x = t.input(Tensor::new(x0.shape(), p[np..].to_vec())?)?;
        let y = f(&mut t, &mut b, x)?;
        let wv = t.constant(weights.clone())?;
        let y = t.mul(y, wv)?;
        let l = t.mean(y)?;
        let val = t.value(l).item();
        if !want {
            return Ok((val, vec![]));
        }
        let g = t.backward(l)?;
        s.zero_grad();
        g.accumulate_into(&mut s);
        let mut grad = s.flatten_grads();
        grad.extend_from_slice(g.wrt(x).unwrap().data());
        Ok((val, grad))
    };
    fd_error(&eval, &point, FD)
}

/// Output projections start at zero; give them values so every parameter
/// reaches the loss.
fn wake(store: &mut ParamStore, seed: u64, scale: f32) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    for p in store.iter_mut() {
        if p.name.contains("w_o") || p.name.contains("head") {
            p.value.data_mut().iter_mut().for_each(|v| *v = rng.random_range(-scale..scale));
        }
    }
}

fn gradient_suite() -> Result<Verdict> {
    const REL: f64 = 1e-4;
    let start = Instant::now();
    let mut results = op_suite()?;

    let mut store = ParamStore::new();
    let mut rng = ChaCha8Rng::seed_from_u64(21);
    let sm = SpatialMix::new(&mut store, "sm", 8, &mut rng);
    wake(&mut store, 22, 0.3);
    results.push(("spatial_mix", module_error(&store, &random_tensor(&[4, 4, 8], 23), &|t, b, x| sm.forward(t, b, x))?));

    let mut store = ParamStore::new();
    let cm = ChannelMix::new(&mut store, "cm", 8, &mut rng);
    wake(&mut store, 24, 0.3);
    results.push(("channel_mix", module_error(&store, &random_tensor(&[4, 4, 8], 25), &|t, b, x| cm.forward(t, b, x))?));

    let mut store = ParamStore::new();
    let block = LRwkvBlock::new(&mut store, "b0", 8, &mut rng);
    let film = Film::new(&mut store, FilmDims { anchors: 4, embed: 6, hidden: 5 }, 8, 1, &mut rng)?;
    wake(&mut store, 26, 0.3);
    results.push((
        "lrwkv_block",
        module_error(&store, &random_tensor(&[4, 4, 8], 27), &|t, b, x| {
            let h = film.hidden(t, b, 0.37)?;
            let a = film.affine(t, b, h, 0)?;
            block.forward(t, b, x, Some(a))
        })?,
    ));

    results.push(("tiny_model", tiny_model_error()?));

    let took = start.elapsed();
    let (worst_name, worst) = results.iter().copied().fold(("", 0.0f64), |a, b| if b.1 > a.1 { b } else { a });
    let failing: Vec<String> = results.iter().filter(|r| r.1 >= REL).map(|r| format!("{}={:.1e}", r.0, r.1)).collect();
    Ok(verdict(
        failing.is_empty() && took < Duration::from_secs(300),
        format!(
            "{} checks at h={:e}, worst {worst_name} {worst:.2e} (< {REL:e}){}, {took:.1?} (< 5 min)",
            results.len(),
            FD.h,
            if failing.is_empty() { String::new() } else { format!(", failing: {}", failing.join(" ")) }
        ),
    ))
}

/// End-to-end check of the tiny configuration on an 8x8 input.
fn tiny_model_error() -> Result<f64> {
    let cfg = CleRwkvConfig {
        r: 2,
        c_in: 4,
        c_model: 8,
        num_blocks: 1,
        film: FilmDims { anchors: 4, embed: 4, hidden: 4 },
        ..Default::default()
    };
    let mut m = CleRwkvModel::new(cfg, 11)?;
    wake(&mut m.store, 12, 0.3);
    for p in m.store.iter_mut() {
        // keep the residual small so no pixel crosses an HSV sextant
        if p.name == "head.k" {
            p.value.data_mut().iter_mut().for_each(|v| *v *= 0.1);
        }
    }
    let mut rng = ChaCha8Rng::seed_from_u64(13);
    let input = Tensor::<f64>::new(&[8, 8, 3], hue_safe_pixels(64, &mut rng))?;
    let s64 = m.store.cast::<f64>();
    // a target near the prediction keeps the loss, and the roundoff in the
    // difference quotient, small next to the gradients
    let pred = {
        let mut t = Tape::<f64>::inference();
        let mut b = Bindings::new(&s64);
        let out = m.forward_tape(&mut t, &mut b, &input, Some(0.4))?;
        t.value(out.rgb).clone()
    };
    let nudge = random_tensor(&[8, 8, 3], 14);
    let target = Tensor::new(&[8, 8, 3], pred.data().iter().zip(nudge.data()).map(|(p, n)| p + 0.02 * n).collect())?;
    let eval = |p: &[f64], want: bool| -> Result<(f64, Vec<f64>)> {
        let mut s = s64.clone();
        s.assign_flat(p)?;
        let mut t = if want { Tape::new() } else { Tape::inference() };
        let mut b = Bindings::new(&s);
        let out = m.forward_tape(&mut t, &mut b, &input, Some(0.4))?;
        let tv = t.constant(target.clone())?;
        let d = t.sub(out.rgb, tv)?;
        let d = t.mul(d, d)?;
        let l = t.mean(d)?;
        let val = t.value(l).item();
        if !want {
            return Ok((val, vec![]));
        }
        let g = t.backward(l)?;
        s.zero_grad();
        g.accumulate_into(&mut s);
        Ok((val, s.flatten_grads()))
    };
    fd_error(&eval, &s64.flatten(), FD)
}

// ---------------------------------------------------------------- 4

fn s2d_exactness() -> Result<Verdict> {
    let mut bitwise = true;
    for (seed, (h, w, c, r)) in [(4, 4, 3, 2), (8, 12, 3, 4), (6, 6, 5, 3), (5, 7, 2, 1), (16, 16, 16, 4)].into_iter().enumerate() {
        let mut rng = ChaCha8Rng::seed_from_u64(seed as u64);
        let x = Tensor::<f32>::from_fn(&[h, w, c], |_| rng.random_range(-1e3f32..1e3));
        let back = pixel_shuffle(&pixel_unshuffle(&x, r)?, r)?;
        bitwise &= back.shape() == x.shape() && back.data().iter().zip(x.data()).all(|(a, b)| a.to_bits() == b.to_bits());
    }
    // one reverse pass per output token: its input footprint must be exactly
    // its own r x r patch
    let (h, w, c, r, cm) = (8, 12, 3, 4, 5);
    let x0 = random_tensor(&[h, w, c], 40);
    let proj = random_tensor(&[c * r * r, cm], 41);
    let mut local = true;
    for ty in 0..h / r {
        for tx in 0..w / r {
            let mut t = Tape::<f64>::new();
            let x = t.input(x0.clone())?;
            let p = t.constant(proj.clone())?;
            let y = ps_ds_embed(&mut t, x, r, p, None)?;
            let mask = Tensor::<f64>::from_fn(&[h / r, w / r, cm], |i| if i / cm == ty * (w / r) + tx { 1.0 } else { 0.0 });
            let mv = t.constant(mask)?;
            let y = t.mul(y, mv)?;
            let l = t.mean(y)?;
            let g = t.backward(l)?;
            let g = g.wrt(x).unwrap();
            for py in 0..h {
                for px in 0..w {
                    let inside = py / r == ty && px / r == tx;
                    let touched = (0..c).any(|ch| g.data()[(py * w + px) * c + ch] != 0.0);
                    local &= inside == touched;
                }
            }
        }
    }
    Ok(verdict(bitwise && local, format!("bitwise round trip {bitwise}, one token per patch {local}")))
}

// ---------------------------------------------------------------- 5

fn kernel_speed() -> Result<Verdict> {
    const MIN_SPEEDUP: f64 = 5.0;
    let rep = clerwkv::wkv::bench(1024, 32, 3)?;
    Ok(verdict(rep.speedup() >= MIN_SPEEDUP, format!("{rep} (>= {MIN_SPEEDUP}x)")))
}

// ---------------------------------------------------------------- 6

fn noise_amplification() -> Result<Verdict> {
    const REL: f64 = 0.05;
    let mut parts = vec![];
    let mut pass = true;
    for k in [2.0, 4.0] {
        let ratio = noise_variance_ratio(k, 10_000, 6)?;
        let err = (ratio / (k * k) - 1.0).abs();
        pass &= err < REL;
        parts.push(format!("k={k}: ratio {ratio:.3} vs {:.0} ({:.1}%)", k * k, 100.0 * err));
    }
    Ok(verdict(pass, format!("{} (within 5%)", parts.join(", "))))
}

// ---------------------------------------------------------------- 7

fn isp_gap(data: &Dataset) -> Result<Verdict> {
    const TOL: f64 = 1e-3;
    const EXPECT: f64 = 0.2703;
    let flat = RadianceScene::flat(4, 4, [0.25; 3]);
    let degenerate = [0.1, 0.5, 1.0, 2.0].iter().map(|&k| noncommute_gap(&flat, k, &IspConfig::degenerate())).fold(0.0, f64::max);
    let g = noncommute_gap(&flat, 2.0, &IspConfig::pure_gamma(2.2));
    // oracle: brighten-after saturates at 1, capture-brighter gives 0.5^(1/2.2)
    let oracle = (2.0 * 0.25f64.powf(1.0 / 2.2)).min(1.0) - 0.5f64.powf(1.0 / 2.2);
    let isp = IspConfig::default();
    let scene_gaps: Vec<f64> = data.test().iter().map(|s| noncommute_gap(&s.scene(), 2.0, &isp)).collect();
    let min_scene = scene_gaps.iter().copied().fold(f64::INFINITY, f64::min);
    Ok(verdict(
        degenerate == 0.0 && (g - EXPECT).abs() <= TOL && (g - oracle).abs() < 1e-12 && min_scene > 0.0,
        format!(
            "degenerate {degenerate:e}, flat gamma {g:.4} (oracle {oracle:.4}, {EXPECT} ± {TOL:e}), min over {} test scenes {min_scene:.4}",
            scene_gaps.len()
        ),
    ))
}

// ---------------------------------------------------------------- 8..11

struct Trained {
    conditional: CleRwkvModel,
    srgb: CleRwkvModel,
    base: CleRwkvModel,
    median: MedianReport,
    times: [Duration; 3],
}

fn train_all(data: &Dataset, epochs: usize) -> Result<Trained> {
    // β labels thin out at the bright end; drawing targets evenly over β
    // keeps the top FiLM anchors trained
    let cfg = TrainConfig {
        epochs,
        targets: TargetPolicy::BalancedBeta,
        ..TrainConfig::default()
    };
    let train_set = data.train();
    let mut times = [Duration::ZERO; 3];

    let t = Instant::now();
    let mut conditional = CleRwkvModel::new(CleRwkvConfig::default(), 0)?;
    train(&mut conditional, &train_set, &[], &cfg)?;
    times[0] = t.elapsed();

    let t = Instant::now();
    let mut srgb = CleRwkvModel::new(
        CleRwkvConfig {
            space: ColorSpace::Srgb,
            ..CleRwkvConfig::default()
        },
        0,
    )?;
    train(&mut srgb, &train_set, &[], &cfg)?;
    times[1] = t.elapsed();

    let t = Instant::now();
    let mut base = CleRwkvModel::new(CleRwkvConfig::default().base(), 0)?;
    // the ℓ1 base converges to the median more slowly than the conditional
    // model learns to follow β, so it gets twice the budget
    let base_cfg = TrainConfig {
        epochs: 2 * epochs,
        ..cfg
    };
    let (median, _) = median_regression_experiment(&mut base, data, &base_cfg)?;
    times[2] = t.elapsed();
    Ok(Trained {
        conditional,
        srgb,
        base,
        median,
        times,
    })
}

fn median_regression(tr: &Trained) -> Result<Verdict> {
    const TOL: f64 = 0.05;
    const FRACTION: f64 = 0.8;
    let oracle = l1_optimal_constant(&[0.2, 0.5, 0.8]);
    let frac = tr.median.fraction_within();
    Ok(verdict(
        oracle == Some(0.5) && tr.median.tolerance == TOL && frac >= FRACTION && tr.times[2] < Duration::from_secs(15 * 60),
        format!(
            "scalar oracle {oracle:?}, {:.0}% of {} held-out inputs within ±{TOL} of the target median (>= 80%), trained in {:.0?} (< 15 min)",
            100.0 * frac,
            tr.median.points.len(),
            tr.times[2]
        ),
    ))
}

fn controllability(tr: &Trained, data: &Dataset) -> Result<Verdict> {
    const POINTS: usize = 16;
    const TRACK: f64 = 0.05;
    const FRACTION: f64 = 0.9;
    const MONO: f64 = 0.01;
    const MAX_VIOLATIONS: usize = 1;
    let test = data.test();
    let rep: ControllabilityReport = controllability_eval(&tr.conditional, &test, POINTS)?;
    let base = controllability_eval(&tr.base, &test, POINTS)?;
    let frac = rep.fraction_tracking(TRACK);
    let viol = rep.max_violations(MONO);
    Ok(verdict(
        frac >= FRACTION && viol <= MAX_VIOLATIONS && base.all_invariant() && tr.times[0] < Duration::from_secs(30 * 60),
        format!(
            "{:.1}% of {} (scene, β) pairs within {TRACK} (>= 90%), mean |err| {:.4}, worst sweep {viol} violations > {MONO} (<= 1), base invariant {}, trained in {:.0?} (< 30 min)",
            100.0 * frac,
            rep.sweeps.len() * POINTS,
            rep.mean_abs_error(),
            base.all_invariant(),
            tr.times[0]
        ),
    ))
}

fn paradigm(tr: &Trained, data: &Dataset) -> Result<(Verdict, ParadigmReport)> {
    const MARGIN: f64 = 2.0;
    const GT_MEAN_GAP: f64 = 1.0;
    let test = data.test();
    let c = paradigm_gap(&tr.conditional, &test)?;
    let b = paradigm_gap(&tr.base, &test)?;
    Ok((
        verdict(
            c.psnr >= b.psnr + MARGIN && b.psnr_gt_mean - b.psnr >= GT_MEAN_GAP,
            format!(
                "conditional {:.2} dB vs base {:.2} dB (margin {:.2} >= {MARGIN}), base with gt-mean {:.2} dB (gap {:.2} >= {GT_MEAN_GAP}) over {} pairs",
                c.psnr,
                b.psnr,
                c.psnr - b.psnr,
                b.psnr_gt_mean,
                b.psnr_gt_mean - b.psnr,
                c.pairs
            ),
        ),
        c,
    ))
}

fn ablation(tr: &Trained, data: &Dataset, hvi: &ParadigmReport) -> Result<Verdict> {
    let s = paradigm_gap(&tr.srgb, &data.test())?;
    let (t1, t4) = (train_time(1, data)?, train_time(4, data)?);
    Ok(verdict(
        hvi.psnr > s.psnr && t1 > t4,
        format!(
            "HVI {:.2} dB > sRGB {:.2} dB; r=1 {:.0?} > r=4 {:.0?} for the same steps",
            hvi.psnr, s.psnr, t1, t4
        ),
    ))
}

fn train_time(r: usize, data: &Dataset) -> Result<Duration> {
    let cfg = TrainConfig {
        epochs: 1,
        ..TrainConfig::default()
    };
    let train_set = data.train();
    let mut m = CleRwkvModel::new(CleRwkvConfig { r, ..Default::default() }, 0)?;
    let t = Instant::now();
    train(&mut m, &train_set[..8], &[], &cfg)?;
    Ok(t.elapsed())
}

// ---------------------------------------------------------------- 12

fn reproducibility() -> Result<Verdict> {
    let data = Dataset::synthesize(&SynthConfig {
        scenes: 12,
        levels: 8,
        height: 16,
        width: 16,
        seed: 3,
        isp: IspConfig::default(),
    })?;
    let cfg = TrainConfig {
        epochs: 3,
        crop: 16,
        lr: 1e-3,
        seed: 9,
        ..TrainConfig::default()
    };
    let model_cfg = CleRwkvConfig {
        c_in: 8,
        c_model: 16,
        num_blocks: 2,
        ..Default::default()
    };
    let run_on = |threads: usize| -> Result<CleRwkvModel> {
        let pool = rayon::ThreadPoolBuilder::new().num_threads(threads).build().expect("thread pool");
        pool.install(|| {
            let mut m = CleRwkvModel::new(model_cfg, 5)?;
            train(&mut m, &data.train(), &[], &cfg)?;
            Ok(m)
        })
    };
    let (a, b) = (run_on(1)?, run_on(3)?);
    let same_ckpt = a.to_bytes() == b.to_bytes();
    let input = &data.test()[0].levels[0].image;
    let same_out = a.enhance(input, 0.3)? == b.enhance(input, 0.3)?;
    let dir = tempfile::tempdir().expect("temporary directory");
    let path = dir.path().join("m.ckpt");
    a.save(&path)?;
    let loaded = CleRwkvModel::load(&path)?;
    let reload = loaded.to_bytes() == a.to_bytes() && std::fs::read(&path).map(|b| b == a.to_bytes()).unwrap_or(false);
    let same_loaded_out = loaded.enhance(input, 0.3)? == a.enhance(input, 0.3)?;
    Ok(verdict(
        same_ckpt && same_out && reload && same_loaded_out,
        format!(
            "checkpoints identical {same_ckpt} (1 vs 3 threads), outputs identical {same_out}, save/load bit-exact {reload}, reloaded output identical {same_loaded_out}"
        ),
    ))
}

fn main() {
    let epochs = std::env::var("CLERWKV_ACCEPT_EPOCHS").ok().and_then(|v| v.parse().ok()).unwrap_or(EPOCHS);
    let mut ok = true;
    ok &= run(1, "HVI round trip", hvi_round_trip);
    ok &= run(2, "Bi-WKV scan vs naive", wkv_equivalence);
    ok &= run(3, "gradient suite", gradient_suite);
    ok &= run(4, "S2D exactness", s2d_exactness);
    ok &= run(5, "kernel speed", kernel_speed);
    ok &= run(6, "noise amplification", noise_amplification);
    let data = Dataset::synthesize(&SynthConfig::default()).expect("default dataset");
    ok &= run(7, "ISP non-commutativity", || isp_gap(&data));
    println!("training conditional HVI and sRGB models for {epochs} epochs, base for {}", 2 * epochs);
    match train_all(&data, epochs) {
        Ok(tr) => {
            ok &= run(8, "median regression", || median_regression(&tr));
            ok &= run(9, "controllability", || controllability(&tr, &data));
            let mut hvi = None;
            ok &= run(10, "paradigm gap", || {
                let (v, r) = paradigm(&tr, &data)?;
                hvi = Some(r);
                Ok(v)
            });
            ok &= run(11, "ablation direction", || match &hvi {
                Some(h) => ablation(&tr, &data, h),
                None => Ok(verdict(false, "needs the conditional PSNR from criterion 10")),
            });
        }
        Err(e) => {
            for (id, name) in [(8, "median regression"), (9, "controllability"), (10, "paradigm gap"), (11, "ablation direction")] {
                ok &= run(id, name, || Ok(verdict(false, format!("training failed: {e}"))));
            }
        }
    }
    ok &= run(12, "reproducibility", reproducibility);
    println!("{}", if ok { "all criteria passed" } else { "some criteria FAILED" });
    if !ok {
        std::process::exit(1);
    }
}

const EPOCHS: usize = 240;

//! Synthetic multi-illumination dataset: procedural radiance scenes rendered
//! through a parametric ISP at `L` power levels, labelled with the mean luma
//! of each rendered capture.

use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use rayon::prelude::*;

use crate::color_hvi::RgbImage;
use crate::error::{contract, Error, Result};

/// Linear radiance, row-major `(y, x, c)`, unclipped.
#[derive(Clone, Debug, PartialEq)]
pub struct RadianceScene {
    pub height: usize,
    pub width: usize,
    pub data: Vec<f64>,
    pub seed: u64,
}

impl RadianceScene {
    /// A spatially constant scene.
    pub fn flat(height: usize, width: usize, radiance: [f64; 3]) -> Self {
        Self {
            height,
            width,
            data: radiance.repeat(height * width),
            seed: 0,
        }
    }
}

fn tint(rng: &mut impl Rng) -> [f64; 3] {
    let c: [f64; 3] = [rng.random_range(0.25..1.0), rng.random_range(0.25..1.0), rng.random_range(0.25..1.0)];
    let m = c[0].max(c[1]).max(c[2]);
    c.map(|v| v / m)
}

fn log_uniform(rng: &mut impl Rng, lo: f64, hi: f64) -> f64 {
    (rng.random_range(lo.ln()..hi.ln())).exp()
}

/// Deterministic procedural scene: a two-colour gradient backdrop,
/// rectangles and disks of log-uniform albedo, a striped texture band and
/// (in half the scenes) small specular highlights. Radiance is scaled so the
/// 99th percentile of the per-pixel maximum is 1.
pub fn generate_scene(seed: u64, height: usize, width: usize) -> RadianceScene {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let (h, w) = (height as f64, width as f64);
    let c0 = tint(&mut rng).map(|v| v * log_uniform(&mut rng, 0.02, 0.4));
    let c1 = tint(&mut rng).map(|v| v * log_uniform(&mut rng, 0.02, 0.4));
    let angle = rng.random_range(0.0..std::f64::consts::TAU);
    let (dx, dy) = (angle.cos(), angle.sin());
    let mut data = Vec::with_capacity(height * width * 3);
    for y in 0..height {
        for x in 0..width {
            let t = (((x as f64 / w - 0.5) * dx + (y as f64 / h - 0.5) * dy) + 0.75) / 1.5;
            let t = t.clamp(0.0, 1.0);
            for c in 0..3 {
                data.push(c0[c] * (1.0 - t) + c1[c] * t);
            }
        }
    }
    let set = |data: &mut Vec<f64>, y: usize, x: usize, v: [f64; 3]| {
        data[(y * width + x) * 3..][..3].copy_from_slice(&v);
    };
    let shapes = rng.random_range(4..9);
    for _ in 0..shapes {
        let albedo = log_uniform(&mut rng, 0.004, 1.0);
        let colour = tint(&mut rng).map(|v| v * albedo);
        let cy = rng.random_range(0.0..h);
        let cx = rng.random_range(0.0..w);
        if rng.random_bool(0.5) {
            let hh = rng.random_range(h / 10.0..h / 3.0);
            let hw = rng.random_range(w / 10.0..w / 3.0);
            for y in 0..height {
                for x in 0..width {
                    if (y as f64 - cy).abs() <= hh && (x as f64 - cx).abs() <= hw {
                        set(&mut data, y, x, colour);
                    }
                }
            }
        } else {
            let rad = rng.random_range(h.min(w) / 10.0..h.min(w) / 3.5);
            for y in 0..height {
                for x in 0..width {
                    if (y as f64 - cy).hypot(x as f64 - cx) <= rad {
                        set(&mut data, y, x, colour);
                    }
                }
            }
        }
    }
    let band_h = (height / 5).max(2);
    let y0 = rng.random_range(0..=height - band_h);
    let period = rng.random_range(2.0..4.0);
    let phase = rng.random_range(0.0..std::f64::consts::TAU);
    for y in y0..y0 + band_h {
        for x in 0..width {
            let m = 1.0 + 0.6 * (std::f64::consts::TAU * x as f64 / period + phase).sin();
            for c in 0..3 {
                data[(y * width + x) * 3 + c] *= m;
            }
        }
    }
    // a deep shadow keeps at least two decades between shadow and p99
    let shadow = tint(&mut rng).map(|v| v * percentile99(&data) * rng.random_range(0.002..0.006));
    let (sh, sw) = ((height / 6).max(1), (width / 6).max(1));
    let (sy, sx) = (rng.random_range(0..=height - sh), rng.random_range(0..=width - sw));
    for y in sy..sy + sh {
        for x in sx..sx + sw {
            set(&mut data, y, x, shadow);
        }
    }
    let p99 = percentile99(&data).max(1e-12);
    data.iter_mut().for_each(|v| *v /= p99);
    if rng.random_bool(0.5) {
        for _ in 0..rng.random_range(1..3) {
            let gain = rng.random_range(1.2..2.0);
            let (cy, cx) = (rng.random_range(0..height), rng.random_range(0..width));
            for (yy, xx) in [(0, 0), (0, 1), (1, 0), (1, 1)] {
                let (y, x) = ((cy + yy).min(height - 1), (cx + xx).min(width - 1));
                set(&mut data, y, x, [gain; 3]);
            }
        }
    }
    RadianceScene {
        height,
        width,
        data,
        seed,
    }
}

fn percentile99(data: &[f64]) -> f64 {
    let mut peaks: Vec<f64> = data.chunks_exact(3).map(|p| p[0].max(p[1]).max(p[2])).collect();
    peaks.sort_by(f64::total_cmp);
    peaks[((peaks.len() - 1) as f64 * 0.99).round() as usize]
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub enum ToneMap {
    /// Identity transfer.
    None,
    /// Extended Reinhard `x (1 + x / w^2) / (1 + x)`, reaching 1 at `x = w`.
    Reinhard { white: f64 },
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct IspConfig {
    pub gamma: f64,
    pub tone: ToneMap,
    /// Shot-noise scale: std is `shot * sqrt(signal)`.
    pub shot: f64,
    pub read: f64,
    /// Per-channel gain error `delta`; the gain is `1 + (1 - k) delta`.
    pub cast: [f64; 3],
    pub bits: u32,
}

impl Default for IspConfig {
    fn default() -> Self {
        Self {
            gamma: 2.2,
            tone: ToneMap::Reinhard { white: 1.5 },
            shot: 0.02,
            read: 0.002,
            cast: [-0.08, 0.0, 0.10],
            bits: 8,
        }
    }
}

impl IspConfig {
    pub fn zero_noise(self) -> Self {
        Self {
            shot: 0.0,
            read: 0.0,
            ..self
        }
    }

    /// No noise, no cast, identity tone map, gamma 1: a pure linear scale.
    pub fn degenerate() -> Self {
        Self {
            gamma: 1.0,
            tone: ToneMap::None,
            shot: 0.0,
            read: 0.0,
            cast: [0.0; 3],
            bits: 8,
        }
    }

    /// Pure power-law transfer with the given gamma.
    pub fn pure_gamma(gamma: f64) -> Self {
        Self {
            gamma,
            ..Self::degenerate()
        }
    }

    pub fn validate(&self) -> Result<()> {
        let ok = self.gamma > 0.0
            && self.shot >= 0.0
            && self.read >= 0.0
            && (1..=16).contains(&self.bits)
            && match self.tone {
                ToneMap::None => true,
                ToneMap::Reinhard { white } => white > 0.0,
            };
        if ok {
            Ok(())
        } else {
            Err(contract(format!("invalid ISP config {self:?}")))
        }
    }
}

/// Noise-free non-linear transfer `T`: tone map then gamma, unclipped.
pub fn isp_transfer(x: f64, isp: &IspConfig) -> f64 {
    let x = x.max(0.0);
    let toned = match isp.tone {
        ToneMap::None => x,
        ToneMap::Reinhard { white } => x * (1.0 + x / (white * white)) / (1.0 + x),
    };
    toned.powf(1.0 / isp.gamma)
}

/// Mean `|clip(k T(R)) - clip(T(k R))|` over every pixel channel: how far
/// brightening a rendered capture is from capturing brighter light.
/// Zero exactly when the transfer is linear and nothing clips.
pub fn noncommute_gap(scene: &RadianceScene, k: f64, isp: &IspConfig) -> f64 {
    let total: f64 = scene
        .data
        .iter()
        .map(|&r| {
            let post = (k * isp_transfer(r, isp)).clamp(0.0, 1.0);
            let pre = isp_transfer(k * r, isp).clamp(0.0, 1.0);
            (post - pre).abs()
        })
        .sum();
    total / scene.data.len() as f64
}

/// One noisy sensor reading of a linear signal.
pub fn sensor_sample(signal: f64, isp: &IspConfig, rng: &mut impl Rng) -> f64 {
    let n1: f64 = StandardNormal.sample(rng);
    let n2: f64 = StandardNormal.sample(rng);
    signal + isp.shot * signal.max(0.0).sqrt() * n1 + isp.read * n2
}

/// A rendered capture before quantization, plus its clipping statistics.
#[derive(Clone, Debug)]
pub struct Render {
    pub image: RgbImage,
    /// Fraction of pixels with at least one channel clipped at 1.
    pub clipped: f64,
}

/// Renders `scene` at power fraction `k` through `isp`.
pub fn apply_isp(scene: &RadianceScene, k: f64, isp: &IspConfig, noise_seed: u64) -> Result<Render> {
    if !(k > 0.0 && k <= 1.0) {
        return Err(contract(format!("power fraction {k} outside (0, 1]")));
    }
    isp.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(noise_seed);
    let levels = ((1u32 << isp.bits) - 1) as f64;
    let mut data = Vec::with_capacity(scene.data.len());
    let mut clipped = 0usize;
    for px in scene.data.chunks_exact(3) {
        let mut any = false;
        for c in 0..3 {
            let gain = 1.0 + (1.0 - k) * isp.cast[c];
            let signal = k * px[c] * gain;
            let v = isp_transfer(sensor_sample(signal, isp, &mut rng), isp);
            if v >= 1.0 {
                any = true;
            }
            data.push(((v.clamp(0.0, 1.0) * levels).round() / levels) as f32);
        }
        clipped += any as usize;
    }
    Ok(Render {
        image: RgbImage::new(scene.height, scene.width, data)?,
        clipped: clipped as f64 / (scene.height * scene.width) as f64,
    })
}

#[derive(Clone, Debug)]
pub struct Level {
    /// Power fraction.
    pub k: f64,
    /// Mean Rec.601 luma of the rendered capture.
    pub beta: f64,
    pub clipped: f64,
    pub image: RgbImage,
}

#[derive(Clone, Debug)]
pub struct IlluminationStack {
    /// Position of the scene in its dataset; drives the train/test split.
    pub index: usize,
    pub seed: u64,
    pub isp: IspConfig,
    pub levels: Vec<Level>,
    /// 0-based index of the reference level.
    pub reference: usize,
}

impl IlluminationStack {
    pub fn height(&self) -> usize {
        self.levels[0].image.height
    }

    pub fn width(&self) -> usize {
        self.levels[0].image.width
    }

    pub fn betas(&self) -> Vec<f64> {
        self.levels.iter().map(|l| l.beta).collect()
    }

    pub fn reference_image(&self) -> &RgbImage {
        &self.levels[self.reference].image
    }

    /// Levels `0..n` with `n = max(1, L / 4)`.
    pub fn darkest_quartile(&self) -> std::ops::Range<usize> {
        0..(self.levels.len() / 4).max(1)
    }

    /// Regenerates the radiance scene this stack was rendered from.
    pub fn scene(&self) -> RadianceScene {
        generate_scene(self.seed, self.height(), self.width())
    }
}

/// Noise seed of level `i` (0-based) of scene `seed`.
pub fn level_noise_seed(seed: u64, i: usize) -> u64 {
    seed.wrapping_mul(0x9E37_79B9_7F4A_7C15).wrapping_add(i as u64 + 1)
}

/// Highest level whose clipped fraction is below 0.1%, else the top level.
pub fn select_reference(levels: &[Level]) -> usize {
    levels.iter().rposition(|l| l.clipped < 1e-3).unwrap_or(levels.len() - 1)
}

/// Renders `levels` power fractions `k_i = i / L`, `i = 1..=L`.
pub fn build_stack(scene: &RadianceScene, levels: usize, isp: &IspConfig, index: usize) -> Result<IlluminationStack> {
    if levels == 0 {
        return Err(contract("a stack needs at least one level"));
    }
    let levels: Vec<Level> = (1..=levels)
        .map(|i| {
            let k = i as f64 / levels as f64;
            let render = apply_isp(scene, k, isp, level_noise_seed(scene.seed, i - 1))?;
            Ok(Level {
                k,
                beta: render.image.mean_luma(),
                clipped: render.clipped,
                image: render.image,
            })
        })
        .collect::<Result<_>>()?;
    let reference = select_reference(&levels);
    Ok(IlluminationStack {
        index,
        seed: scene.seed,
        isp: *isp,
        levels,
        reference,
    })
}

/// Scene `index` is held out iff `index % 11 == 10` (5 of the default 55).
pub fn is_test_index(index: usize) -> bool {
    index % 11 == 10
}

#[derive(Clone, Debug, Default)]
pub struct Dataset {
    pub stacks: Vec<IlluminationStack>,
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct SynthConfig {
    pub scenes: usize,
    pub levels: usize,
    pub height: usize,
    pub width: usize,
    pub seed: u64,
    pub isp: IspConfig,
}

impl Default for SynthConfig {
    fn default() -> Self {
        Self {
            scenes: 55,
            levels: 16,
            height: 40,
            width: 40,
            seed: 0,
            isp: IspConfig::default(),
        }
    }
}

/// Seed of scene `index` in a dataset synthesized with `base`.
pub fn scene_seed(base: u64, index: usize) -> u64 {
    base.wrapping_mul(1_000_003).wrapping_add(index as u64)
}

impl Dataset {
    /// Generates every scene in parallel; output does not depend on thread count.
    pub fn synthesize(cfg: &SynthConfig) -> Result<Self> {
        if cfg.scenes == 0 || cfg.height < 4 || cfg.width < 4 {
            return Err(contract(format!("cannot synthesize {cfg:?}")));
        }
        cfg.isp.validate()?;
        let stacks = (0..cfg.scenes)
            .into_par_iter()
            .map(|i| {
                let scene = generate_scene(scene_seed(cfg.seed, i), cfg.height, cfg.width);
                build_stack(&scene, cfg.levels, &cfg.isp, i)
            })
            .collect::<Result<Vec<_>>>()?;
        Ok(Self { stacks })
    }

    pub fn train(&self) -> Vec<&IlluminationStack> {
        self.stacks.iter().filter(|s| !is_test_index(s.index)).collect()
    }

    pub fn test(&self) -> Vec<&IlluminationStack> {
        self.stacks.iter().filter(|s| is_test_index(s.index)).collect()
    }

    /// `(min, max)` over every β label.
    pub fn beta_range(&self) -> (f64, f64) {
        self.stacks
            .iter()
            .flat_map(|s| s.levels.iter().map(|l| l.beta))
            .fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), b| (lo.min(b), hi.max(b)))
    }

    /// Writes `scenes/scene_<index>/level_<i>.png` (1-based levels) and a
    /// `meta` record per scene.
    pub fn export(&self, dir: &Path) -> Result<()> {
        for s in &self.stacks {
            let sdir = dir.join("scenes").join(format!("scene_{:04}", s.index));
            std::fs::create_dir_all(&sdir).map_err(|e| Error::io(&sdir, e))?;
            for (i, l) in s.levels.iter().enumerate() {
                l.image.save_png(&sdir.join(format!("level_{}.png", i + 1)))?;
            }
            let meta = sdir.join("meta");
            std::fs::write(&meta, meta_text(s)).map_err(|e| Error::io(&meta, e))?;
        }
        Ok(())
    }

    pub fn load(dir: &Path) -> Result<Self> {
        let root = dir.join("scenes");
        let entries = std::fs::read_dir(&root).map_err(|e| Error::io(&root, e))?;
        let mut dirs: Vec<PathBuf> = entries
            .filter_map(|e| e.ok().map(|e| e.path()))
            .filter(|p| p.is_dir())
            .collect();
        dirs.sort();
        if dirs.is_empty() {
            return Err(Error::Format {
                what: "dataset",
                path: root,
                detail: "no scene directories".into(),
            });
        }
        let mut stacks = dirs.par_iter().map(|d| load_stack(d)).collect::<Result<Vec<_>>>()?;
        stacks.sort_by_key(|s| s.index);
        Ok(Self { stacks })
    }
}

fn tone_text(t: ToneMap) -> String {
    match t {
        ToneMap::None => "none".into(),
        ToneMap::Reinhard { white } => format!("reinhard:{white}"),
    }
}

fn meta_text(s: &IlluminationStack) -> String {
    let mut out = String::new();
    let isp = &s.isp;
    let _ = writeln!(out, "index={}", s.index);
    let _ = writeln!(out, "seed={}", s.seed);
    let _ = writeln!(out, "levels={}", s.levels.len());
    let _ = writeln!(out, "height={}", s.height());
    let _ = writeln!(out, "width={}", s.width());
    let _ = writeln!(out, "reference={}", s.reference + 1);
    let _ = writeln!(out, "isp_gamma={}", isp.gamma);
    let _ = writeln!(out, "isp_tone={}", tone_text(isp.tone));
    let _ = writeln!(out, "isp_shot={}", isp.shot);
    let _ = writeln!(out, "isp_read={}", isp.read);
    let _ = writeln!(out, "isp_cast={},{},{}", isp.cast[0], isp.cast[1], isp.cast[2]);
    let _ = writeln!(out, "isp_bits={}", isp.bits);
    for (i, l) in s.levels.iter().enumerate() {
        let _ = writeln!(out, "level_{}_k={}", i + 1, l.k);
        let _ = writeln!(out, "level_{}_beta={}", i + 1, l.beta);
        let _ = writeln!(out, "level_{}_clipped={}", i + 1, l.clipped);
    }
    out
}

fn load_stack(dir: &Path) -> Result<IlluminationStack> {
    let meta_path = dir.join("meta");
    let text = std::fs::read_to_string(&meta_path).map_err(|e| Error::io(&meta_path, e))?;
    let bad = |detail: String| Error::Format {
        what: "scene meta",
        path: meta_path.clone(),
        detail,
    };
    let mut kv = std::collections::HashMap::new();
    for line in text.lines().filter(|l| !l.is_empty()) {
        let (k, v) = line.split_once('=').ok_or_else(|| bad(format!("line without '=': {line}")))?;
        kv.insert(k.to_string(), v.to_string());
    }
    let get = |k: &str| kv.get(k).cloned().ok_or_else(|| bad(format!("missing field {k}")));
    fn parse<T: std::str::FromStr>(v: &str, k: &str, bad: &dyn Fn(String) -> Error) -> Result<T> {
        v.parse().map_err(|_| bad(format!("field {k} has bad value {v:?}")))
    }
    let num = |k: &str| -> Result<f64> { parse(&get(k)?, k, &bad) };
    let int = |k: &str| -> Result<usize> { parse(&get(k)?, k, &bad) };
    let tone = match get("isp_tone")?.as_str() {
        "none" => ToneMap::None,
        t => match t.strip_prefix("reinhard:") {
            Some(w) => ToneMap::Reinhard {
                white: parse(w, "isp_tone", &bad)?,
            },
            None => return Err(bad(format!("unknown tone map {t}"))),
        },
    };
    let cast: Vec<f64> = get("isp_cast")?
        .split(',')
        .map(|c| parse(c, "isp_cast", &bad))
        .collect::<Result<_>>()?;
    if cast.len() != 3 {
        return Err(bad("isp_cast needs three values".into()));
    }
    let isp = IspConfig {
        gamma: num("isp_gamma")?,
        tone,
        shot: num("isp_shot")?,
        read: num("isp_read")?,
        cast: [cast[0], cast[1], cast[2]],
        bits: int("isp_bits")? as u32,
    };
    let n = int("levels")?;
    let (h, w) = (int("height")?, int("width")?);
    let reference = int("reference")?;
    if n == 0 || reference == 0 || reference > n {
        return Err(bad(format!("reference {reference} outside 1..={n}")));
    }
    let mut levels = Vec::with_capacity(n);
    for i in 1..=n {
        let png = dir.join(format!("level_{i}.png"));
        let image = RgbImage::load_png(&png)?;
        if image.height != h || image.width != w {
            return Err(Error::Format {
                what: "level image",
                path: png,
                detail: format!("{}x{} but meta says {h}x{w}", image.height, image.width),
            });
        }
        levels.push(Level {
            k: num(&format!("level_{i}_k"))?,
            beta: num(&format!("level_{i}_beta"))?,
            clipped: num(&format!("level_{i}_clipped"))?,
            image,
        });
    }
    Ok(IlluminationStack {
        index: int("index")?,
        seed: parse(&get("seed")?, "seed", &bad)?,
        isp,
        levels,
        reference: reference - 1,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn flat_level(clipped: f64) -> Level {
        Level {
            k: 1.0,
            beta: 0.0,
            clipped,
            image: RgbImage::filled(1, 1, [0.0; 3]),
        }
    }

    #[test]
    fn scenes_are_deterministic_and_seed_dependent() {
        let a = generate_scene(7, 32, 32);
        assert_eq!(a, generate_scene(7, 32, 32));
        assert_ne!(a.data, generate_scene(8, 32, 32).data);
        assert!(a.data.iter().all(|&v| v >= 0.0));
    }

    #[test]
    fn radiance_spans_two_decades() {
        for seed in 0..100 {
            let s = generate_scene(seed, 40, 40);
            let peaks: Vec<f64> = s.data.chunks_exact(3).map(|p| p[0].max(p[1]).max(p[2])).collect();
            let hi = peaks.iter().cloned().fold(0.0, f64::max);
            let lo = peaks.iter().cloned().fold(f64::INFINITY, f64::min);
            assert!(hi / lo >= 100.0, "seed {seed}: {hi} / {lo}");
        }
    }

    #[test]
    fn dark_zero_noise_frame_is_black() {
        let s = generate_scene(1, 16, 16);
        let r = apply_isp(&s, 1e-9, &IspConfig::default().zero_noise(), 0).unwrap();
        assert!(r.image.data.iter().all(|&v| v == 0.0));
    }

    #[test]
    fn degenerate_isp_is_linear_scaling() {
        let s = RadianceScene::flat(4, 4, [0.4, 0.2, 0.6]);
        let r = apply_isp(&s, 0.5, &IspConfig::degenerate(), 0).unwrap();
        let want = [0.2f64, 0.1, 0.3].map(|v| ((v * 255.0).round() / 255.0) as f32);
        assert_eq!(r.image.pixel(2, 3), want);
    }

    #[test]
    fn shot_noise_variance_is_linear_in_signal() {
        let isp = IspConfig {
            read: 0.0,
            ..Default::default()
        };
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let signals = [0.05, 0.1, 0.2, 0.4, 0.8];
        let vars: Vec<f64> = signals
            .iter()
            .map(|&s| {
                let xs: Vec<f64> = (0..10_000).map(|_| sensor_sample(s, &isp, &mut rng)).collect();
                let m = xs.iter().sum::<f64>() / xs.len() as f64;
                xs.iter().map(|x| (x - m).powi(2)).sum::<f64>() / (xs.len() - 1) as f64
            })
            .collect();
        // least-squares slope through the origin
        let slope = signals.iter().zip(&vars).map(|(s, v)| s * v).sum::<f64>() / signals.iter().map(|s| s * s).sum::<f64>();
        let want = isp.shot * isp.shot;
        assert!((slope - want).abs() / want < 0.1, "{slope} vs {want}");
    }

    #[test]
    fn scaled_noise_variance_is_quadratic() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let noise: Vec<f64> = (0..10_000).map(|_| StandardNormal.sample(&mut rng)).collect();
        let var = |xs: &[f64]| {
            let m = xs.iter().sum::<f64>() / xs.len() as f64;
            xs.iter().map(|x| (x - m).powi(2)).sum::<f64>() / xs.len() as f64
        };
        for k in [2.0, 4.0] {
            let scaled: Vec<f64> = noise.iter().map(|n| n * k).collect();
            let ratio = var(&scaled) / var(&noise);
            assert!((ratio / (k * k) - 1.0).abs() < 0.05);
        }
    }

    #[test]
    fn noncommute_gap_cases() {
        let scene = generate_scene(3, 24, 24);
        assert_eq!(noncommute_gap(&scene, 0.5, &IspConfig::degenerate()), 0.0);
        let flat = RadianceScene::flat(4, 4, [0.25; 3]);
        // 2 * 0.25^(1/2.2) clips to 1, while 0.5^(1/2.2) = 0.72974
        let want = 1.0 - 0.5f64.powf(1.0 / 2.2);
        assert!((noncommute_gap(&flat, 2.0, &IspConfig::pure_gamma(2.2)) - want).abs() < 1e-12);
        assert!((want - 0.2703).abs() < 1e-3);
        assert!(noncommute_gap(&scene, 2.0, &IspConfig::default()) > 0.0);
    }

    #[test]
    fn flat_scene_beta_is_its_value() {
        // gamma 1 and identity tone: radiance 0.6 renders to 153/255 = 0.6
        let s = RadianceScene::flat(8, 8, [0.6; 3]);
        let st = build_stack(&s, 2, &IspConfig::degenerate(), 0).unwrap();
        assert!((st.levels[1].beta - 0.6).abs() < 1e-6);
    }

    #[test]
    fn beta_increases_with_power() {
        for seed in 0..100 {
            let scene = generate_scene(seed, 24, 24);
            let zero = build_stack(&scene, 16, &IspConfig::default().zero_noise(), 0).unwrap();
            assert!(zero.levels[15].beta > zero.levels[0].beta);
            assert!(zero.betas().windows(2).all(|w| w[1] >= w[0]));
            let noisy = build_stack(&scene, 16, &IspConfig::default(), 0).unwrap();
            assert!(noisy.betas().windows(2).all(|w| w[1] >= w[0] - 0.01), "seed {seed}");
        }
    }

    #[test]
    fn reference_selection_cases() {
        let clean: Vec<Level> = (0..4).map(|_| flat_level(0.0)).collect();
        assert_eq!(select_reference(&clean), 3);
        let mut top = clean.clone();
        top[3].clipped = 0.5;
        assert_eq!(select_reference(&top), 2);
        let all: Vec<Level> = (0..4).map(|_| flat_level(0.2)).collect();
        assert_eq!(select_reference(&all), 3);
    }

    #[test]
    fn reference_has_max_beta_among_admissible_levels() {
        for seed in 0..40 {
            let st = build_stack(&generate_scene(seed, 24, 24), 16, &IspConfig::default(), 0).unwrap();
            let best = st
                .levels
                .iter()
                .enumerate()
                .filter(|(_, l)| l.clipped < 1e-3)
                .max_by(|a, b| a.1.beta.total_cmp(&b.1.beta))
                .map(|(i, _)| i);
            if let Some(best) = best {
                assert_eq!(st.levels[best].beta, st.levels[st.reference].beta, "seed {seed}");
            }
        }
    }

    #[test]
    fn split_is_250_to_25() {
        let test = (0..275).filter(|&i| is_test_index(i)).count();
        assert_eq!((275 - test, test), (250, 25));
    }

    #[test]
    fn export_load_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let cfg = SynthConfig {
            scenes: 3,
            levels: 4,
            height: 12,
            width: 16,
            seed: 5,
            ..Default::default()
        };
        let ds = Dataset::synthesize(&cfg).unwrap();
        ds.export(dir.path()).unwrap();
        let back = Dataset::load(dir.path()).unwrap();
        for (a, b) in ds.stacks.iter().zip(&back.stacks) {
            assert_eq!(a.betas().iter().map(|b| b.to_bits()).collect::<Vec<_>>(), b.betas().iter().map(|b| b.to_bits()).collect::<Vec<_>>());
            assert_eq!(a.reference, b.reference);
            assert_eq!(a.isp, b.isp);
            for (la, lb) in a.levels.iter().zip(&b.levels) {
                assert_eq!(la.image, lb.image);
                assert!((lb.image.mean_luma() - lb.beta).abs() <= 1.0 / 255.0);
            }
        }
        let missing = dir.path().join("scenes/scene_0001/level_2.png");
        std::fs::remove_file(&missing).unwrap();
        let err = Dataset::load(dir.path()).unwrap_err().to_string();
        assert!(err.contains("level_2.png"), "{err}");
    }
}

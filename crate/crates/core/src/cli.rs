//! Command-line front end. Exit codes: 0 success, 1 usage error, 2 runtime
//! error.

use std::ffi::OsString;
use std::io::Write;
use std::path::{Path, PathBuf};

use clap::{Parser, Subcommand, ValueEnum};

use crate::color_hvi::RgbImage;
use crate::error::{contract, Error, Result};
use crate::lightsynth::{noncommute_gap, Dataset, IspConfig, RadianceScene, SynthConfig};
use crate::losses::{noise_variance_ratio, MetricReport, PairMetrics};
use crate::model::{CleRwkvConfig, CleRwkvModel, ColorSpace};
use crate::trainer::{
    controllability_eval, hybrid_target, l1_optimal_constant, median_regression_experiment, train, TargetPolicy, TrainConfig,
};

#[derive(Parser, Debug)]
#[command(name = "clerwkv", version, about = "Controllable low-light enhancement")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Subcommand, Debug)]
pub enum Command {
    /// Write a synthetic multi-illumination dataset.
    Synth {
        #[arg(long, default_value_t = 55)]
        scenes: usize,
        #[arg(long, default_value_t = 16)]
        levels: usize,
        /// Square scene side in pixels.
        #[arg(long, default_value_t = 40)]
        size: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long)]
        out: PathBuf,
    },
    /// Train a model on a dataset directory.
    Train {
        #[arg(long)]
        data: PathBuf,
        /// `key=value` config file; missing keys keep their defaults.
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
        /// Train the unconditional variant.
        #[arg(long)]
        base: bool,
        /// Also write the step log here.
        #[arg(long)]
        log: Option<PathBuf>,
    },
    /// Enhance one PNG at target luminance β.
    Infer {
        #[arg(long)]
        ckpt: PathBuf,
        #[arg(long)]
        input: PathBuf,
        #[arg(long)]
        beta: f64,
        #[arg(long)]
        out: PathBuf,
    },
    /// Render a strip of enhancements over a β range `LO:HI:G`.
    Sweep {
        #[arg(long)]
        ckpt: PathBuf,
        #[arg(long)]
        input: PathBuf,
        #[arg(long, value_parser = parse_betas)]
        betas: BetaRange,
        #[arg(long)]
        out: PathBuf,
    },
    /// Score a checkpoint on a dataset's held-out scenes.
    Eval {
        #[arg(long)]
        ckpt: PathBuf,
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        report: PathBuf,
    },
    /// Run one of the small theory experiments.
    Demo {
        which: DemoKind,
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
    /// Serve the model over HTTP.
    Serve {
        #[arg(long)]
        ckpt: PathBuf,
        #[arg(long, default_value_t = 8080)]
        port: u16,
        #[arg(long, default_value = "127.0.0.1")]
        host: String,
        /// Send permissive CORS headers.
        #[arg(long)]
        cors: bool,
    },
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum)]
pub enum DemoKind {
    Gtmean,
    Median,
    Isp,
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct BetaRange {
    pub lo: f64,
    pub hi: f64,
    pub count: usize,
}

impl BetaRange {
    pub fn values(&self) -> Vec<f64> {
        crate::trainer::beta_grid(self.lo, self.hi, self.count)
    }
}

fn parse_betas(s: &str) -> std::result::Result<BetaRange, String> {
    let parts: Vec<&str> = s.split(':').collect();
    let [lo, hi, g] = parts.as_slice() else {
        return Err(format!("expected LO:HI:G, got {s:?}"));
    };
    let lo: f64 = lo.parse().map_err(|_| format!("bad LO in {s:?}"))?;
    let hi: f64 = hi.parse().map_err(|_| format!("bad HI in {s:?}"))?;
    let count: usize = g.parse().map_err(|_| format!("bad G in {s:?}"))?;
    if count == 0 || !(0.0..=1.0).contains(&lo) || !(0.0..=1.0).contains(&hi) {
        return Err(format!("need 0 <= LO, HI <= 1 and G >= 1, got {s:?}"));
    }
    Ok(BetaRange { lo, hi, count })
}

/// Parses `args` (program name first) and runs the command.
pub fn run<I, T>(args: I, out: &mut dyn Write, err: &mut dyn Write) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(cli) => cli,
        Err(e) => {
            use clap::error::ErrorKind;
            return match e.kind() {
                ErrorKind::DisplayHelp | ErrorKind::DisplayVersion => {
                    let _ = write!(out, "{e}");
                    0
                }
                _ => {
                    let _ = write!(err, "{e}");
                    1
                }
            };
        }
    };
    match execute(cli.command, out) {
        Ok(()) => 0,
        Err(e) => {
            let _ = writeln!(err, "error: {e}");
            2
        }
    }
}

fn execute(cmd: Command, out: &mut dyn Write) -> Result<()> {
    match cmd {
        Command::Synth {
            scenes,
            levels,
            size,
            seed,
            out: dir,
        } => {
            let cfg = SynthConfig {
                scenes,
                levels,
                height: size,
                width: size,
                seed,
                ..Default::default()
            };
            let ds = Dataset::synthesize(&cfg)?;
            ds.export(&dir)?;
            say(out, format!("wrote {} scenes ({} held out) to {}", ds.stacks.len(), ds.test().len(), dir.display()))
        }
        Command::Train {
            data,
            config,
            out: ckpt,
            base,
            log,
        } => {
            let (mut mcfg, tcfg) = match &config {
                Some(p) => parse_run_config(&read_text(p)?, p)?,
                None => (CleRwkvConfig::default(), TrainConfig::default()),
            };
            if base {
                mcfg = mcfg.base();
            }
            let ds = Dataset::load(&data)?;
            let mut model = CleRwkvModel::new(mcfg, tcfg.seed)?;
            let tl = train(&mut model, &ds.train(), &ds.test(), &tcfg)?;
            model.save(&ckpt)?;
            if let Some(p) = log {
                std::fs::write(&p, tl.to_text()).map_err(|e| Error::io(&p, e))?;
            }
            say(
                out,
                format!(
                    "trained {} steps, final loss {:.5}, wrote {}",
                    tl.steps.len(),
                    tl.final_loss().unwrap_or(f64::NAN),
                    ckpt.display()
                ),
            )
        }
        Command::Infer {
            ckpt,
            input,
            beta,
            out: dst,
        } => {
            check_beta(beta)?;
            let model = CleRwkvModel::load(&ckpt)?;
            let img = RgbImage::load_png(&input)?;
            let res = model.enhance(&img, beta)?;
            res.save_png(&dst)?;
            say(out, format!("mean_luminance={:.4}", res.quantized().mean_luma()))
        }
        Command::Sweep {
            ckpt,
            input,
            betas,
            out: dst,
        } => {
            let model = CleRwkvModel::load(&ckpt)?;
            let img = RgbImage::load_png(&input)?;
            let frames = betas
                .values()
                .into_iter()
                .map(|b| Ok((b, model.enhance(&img, b)?)))
                .collect::<Result<Vec<_>>>()?;
            sweep_strip(&frames).save_png(&dst)?;
            for (b, f) in &frames {
                say(out, format!("beta={b:.4} mean_luminance={:.4}", f.quantized().mean_luma()))?;
            }
            Ok(())
        }
        Command::Eval { ckpt, data, report } => {
            let model = CleRwkvModel::load(&ckpt)?;
            let ds = Dataset::load(&data)?;
            let test = ds.test();
            if test.is_empty() {
                return Err(contract(format!("{} has no held-out scenes", data.display())));
            }
            let mut entries = Vec::new();
            for s in &test {
                let input = s.darkest_quartile().start;
                for t in 0..s.levels.len() {
                    let beta = s.levels[t].beta;
                    let pred = model.enhance(&s.levels[input].image, beta)?;
                    let m = PairMetrics::measure(&pred, &hybrid_target(s, t)?, beta)?;
                    entries.push((format!("scene={} input={} target={}", s.index, input + 1, t + 1), m));
                }
            }
            let metrics = MetricReport::new(entries);
            let ctrl = controllability_eval(&model, &test, 16)?;
            let text = format!("{}\n[controllability]\n{}", metrics.to_text(), ctrl.to_text());
            std::fs::write(&report, &text).map_err(|e| Error::io(&report, e))?;
            say(
                out,
                format!(
                    "psnr={:.3} psnr_gt_mean={:.3} fraction_tracking={:.3} report={}",
                    metrics.mean.psnr,
                    metrics.mean.psnr_gt_mean,
                    ctrl.fraction_tracking(0.05),
                    report.display()
                ),
            )
        }
        Command::Demo { which, seed } => demo(which, seed, out),
        Command::Serve { ckpt, port, host, cors } => {
            let model = CleRwkvModel::load(&ckpt)?;
            let addr: std::net::SocketAddr = format!("{host}:{port}")
                .parse()
                .map_err(|_| contract(format!("bad listen address {host}:{port}")))?;
            let rt = tokio::runtime::Builder::new_multi_thread()
                .enable_all()
                .build()
                .map_err(|e| Error::io("tokio runtime", e))?;
            rt.block_on(crate::service::serve(model, addr, cors))
        }
    }
}

fn say(out: &mut dyn Write, line: String) -> Result<()> {
    writeln!(out, "{line}").map_err(|e| Error::io("stdout", e))
}

fn check_beta(beta: f64) -> Result<()> {
    if (0.0..=1.0).contains(&beta) {
        Ok(())
    } else {
        Err(contract(format!("beta {beta} outside [0, 1]")))
    }
}

fn read_text(p: &Path) -> Result<String> {
    std::fs::read_to_string(p).map_err(|e| Error::io(p, e))
}

/// Parses a `key=value` run config (`#` starts a comment). Model keys:
/// r, c_in, c_model, num_blocks, space. Training keys: epochs, batch, crop,
/// lr, seed, flips, rotations, weight_decay, w_l1, w_ssim, w_edge, w_lpips,
/// lambda, validate.
pub fn parse_run_config(text: &str, path: &Path) -> Result<(CleRwkvConfig, TrainConfig)> {
    let mut m = CleRwkvConfig::default();
    let mut t = TrainConfig::default();
    for (no, raw) in text.lines().enumerate() {
        let line = raw.split('#').next().unwrap_or("").trim();
        if line.is_empty() {
            continue;
        }
        let bad = |detail: String| Error::Format {
            what: "run config",
            path: path.to_path_buf(),
            detail: format!("line {}: {detail}", no + 1),
        };
        let (k, v) = line.split_once('=').ok_or_else(|| bad(format!("expected key=value, got {line:?}")))?;
        let (k, v) = (k.trim(), v.trim());
        fn num<T: std::str::FromStr>(v: &str, k: &str, bad: &dyn Fn(String) -> Error) -> Result<T> {
            v.parse().map_err(|_| bad(format!("{k} has bad value {v:?}")))
        }
        match k {
            "r" => m.r = num(v, k, &bad)?,
            "c_in" => m.c_in = num(v, k, &bad)?,
            "c_model" => m.c_model = num(v, k, &bad)?,
            "num_blocks" => m.num_blocks = num(v, k, &bad)?,
            "space" => {
                m.space = match v {
                    "hvi" => ColorSpace::Hvi,
                    "srgb" => ColorSpace::Srgb,
                    _ => return Err(bad(format!("space must be hvi or srgb, got {v:?}"))),
                }
            }
            "epochs" => t.epochs = num(v, k, &bad)?,
            "batch" => t.batch = num(v, k, &bad)?,
            "crop" => t.crop = num(v, k, &bad)?,
            "lr" => t.lr = num(v, k, &bad)?,
            "seed" => t.seed = num(v, k, &bad)?,
            "targets" => {
                t.targets = match v {
                    "uniform" => TargetPolicy::UniformLevel,
                    "balanced" => TargetPolicy::BalancedBeta,
                    _ => return Err(bad(format!("targets must be uniform or balanced, got {v:?}"))),
                }
            }
            "flips" => t.flips = num(v, k, &bad)?,
            "rotations" => t.rotations = num(v, k, &bad)?,
            "validate" => t.validate = num(v, k, &bad)?,
            "weight_decay" => t.optim.weight_decay = num(v, k, &bad)?,
            "w_l1" => t.weights.l1 = num(v, k, &bad)?,
            "w_ssim" => t.weights.ssim = num(v, k, &bad)?,
            "w_edge" => t.weights.edge = num(v, k, &bad)?,
            "w_lpips" => t.weights.lpips = num(v, k, &bad)?,
            "lambda" => t.weights.lambda = num(v, k, &bad)?,
            _ => return Err(bad(format!("unknown key {k:?}"))),
        }
    }
    m.validate()?;
    t.validate_for(m.r)?;
    Ok((m, t))
}

/// Frames side by side over a footer. Each frame's footer holds two bars
/// rising from the bottom: gray for the requested β, white for the
/// achieved mean luminance.
pub fn sweep_strip(frames: &[(f64, RgbImage)]) -> RgbImage {
    let Some((_, first)) = frames.first() else {
        return RgbImage::filled(1, 1, [0.0; 3]);
    };
    let (h, w) = (first.height, first.width);
    let footer = (h / 4).max(8);
    let mut strip = RgbImage::filled(h + footer, w * frames.len(), [0.0; 3]);
    for (i, (beta, f)) in frames.iter().enumerate() {
        for y in 0..h {
            for x in 0..w {
                strip.set_pixel(y, i * w + x, f.pixel(y, x));
            }
        }
        let achieved = f.quantized().mean_luma();
        for (x0, x1, level, colour) in [(0, w / 2, *beta, [0.5; 3]), (w / 2, w, achieved, [1.0; 3])] {
            let filled = (level.clamp(0.0, 1.0) * footer as f64).round() as usize;
            for y in footer - filled..footer {
                for x in x0..x1 {
                    strip.set_pixel(h + y, i * w + x, colour);
                }
            }
        }
    }
    strip
}

fn demo(which: DemoKind, seed: u64, out: &mut dyn Write) -> Result<()> {
    match which {
        DemoKind::Gtmean => {
            for k in [2.0, 4.0] {
                let ratio = noise_variance_ratio(k, 10_000, seed)?;
                say(out, format!("k={k} variance_ratio={ratio:.4} expected={}", k * k))?;
            }
            Ok(())
        }
        DemoKind::Isp => {
            let flat = RadianceScene::flat(8, 8, [0.25; 3]);
            let gap = noncommute_gap(&flat, 2.0, &IspConfig::pure_gamma(2.2));
            say(out, format!("flat R=0.25 k=2 gamma=2.2 gap={gap:.4}"))?;
            let scene = crate::lightsynth::generate_scene(seed, 32, 32);
            say(out, format!("degenerate isp gap={:.4}", noncommute_gap(&scene, 2.0, &IspConfig::degenerate())))?;
            say(out, format!("default isp scene gap={:.4}", noncommute_gap(&scene, 2.0, &IspConfig::default())))
        }
        DemoKind::Median => {
            let c = l1_optimal_constant(&[0.2, 0.5, 0.8]).unwrap_or(f64::NAN);
            say(out, format!("l1-optimal constant for {{0.2, 0.5, 0.8}} = {c}"))?;
            let ds = Dataset::synthesize(&SynthConfig {
                scenes: 22,
                levels: 8,
                height: 24,
                width: 24,
                seed,
                ..Default::default()
            })?;
            let mut model = CleRwkvModel::new(CleRwkvConfig::default().base(), seed)?;
            let cfg = TrainConfig {
                epochs: 40,
                crop: 24,
                lr: 2e-3,
                seed,
                ..Default::default()
            };
            let (report, _) = median_regression_experiment(&mut model, &ds, &cfg)?;
            write!(out, "{}", report.to_text()).map_err(|e| Error::io("stdout", e))
        }
    }
}

//! CLE-RWKV assembly: HVI input, shallow conv, PS-DS, L-RWKV blocks with
//! FiLM, PS-US, a skip merge with the shallow features, and an output head
//! predicting a residual in HVI space.

mod checkpoint;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::blocks::{Film, FilmDims, LRwkvBlock};
use crate::color_hvi::{rgb_to_hvi, RgbImage};
use crate::error::{contract, Result};
use crate::losses::LossWeights;
use crate::numerics::{Bindings, ParamId, ParamStore, Real, Tape, Tensor, Var};
use crate::s2d::{ps_ds_embed, ps_us_embed};

pub use checkpoint::{digest_hex, CHECKPOINT_MAGIC};

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Variant {
    /// Takes a target luminance β through FiLM.
    Conditional,
    /// Fixed-target network with no β pathway.
    Base,
}

/// Colour space the network reads and predicts residuals in.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum ColorSpace {
    Hvi,
    /// Ablation: raw RGB planes, RGB residual.
    Srgb,
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct CleRwkvConfig {
    /// Shuffle factor of the PS-DS / PS-US embeddings.
    pub r: usize,
    /// Width of the shallow feature space.
    pub c_in: usize,
    pub c_model: usize,
    pub num_blocks: usize,
    pub film: FilmDims,
    pub variant: Variant,
    pub space: ColorSpace,
}

impl Default for CleRwkvConfig {
    fn default() -> Self {
        Self {
            r: 4,
            c_in: 16,
            c_model: 32,
            num_blocks: 4,
            film: FilmDims::default(),
            variant: Variant::Conditional,
            space: ColorSpace::Hvi,
        }
    }
}

impl CleRwkvConfig {
    pub fn base(self) -> Self {
        Self {
            variant: Variant::Base,
            ..self
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.r == 0 || self.num_blocks == 0 || self.c_in == 0 || self.c_model == 0 {
            return Err(contract(format!("invalid model config {self:?}")));
        }
        if self.film.anchors < 2 {
            return Err(contract("FiLM needs at least 2 anchors"));
        }
        Ok(())
    }
}

/// Training provenance stored alongside the weights.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct CheckpointMeta {
    pub seed: u64,
    pub weights: LossWeights,
    /// Range of β labels seen in training.
    pub beta_range: (f64, f64),
}

impl Default for CheckpointMeta {
    fn default() -> Self {
        Self {
            seed: 0,
            weights: LossWeights::default(),
            beta_range: (0.0, 1.0),
        }
    }
}

#[derive(Clone, Debug)]
struct Layout {
    shallow_k: ParamId,
    shallow_b: ParamId,
    ds_p: ParamId,
    ds_b: ParamId,
    blocks: Vec<LRwkvBlock>,
    film: Option<Film>,
    us_p: ParamId,
    us_b: ParamId,
    head_k: ParamId,
    head_b: ParamId,
}

/// Output nodes of one forward pass on a tape.
#[derive(Clone, Copy, Debug)]
pub struct ForwardVars {
    /// Final RGB prediction in `[0, 1]`.
    pub rgb: Var,
    /// Clipped HVI prediction (HVI space only).
    pub hvi: Option<Var>,
}

#[derive(Clone, Debug)]
pub struct CleRwkvModel {
    pub config: CleRwkvConfig,
    pub meta: CheckpointMeta,
    pub store: ParamStore,
    layout: Layout,
}

fn uniform(shape: &[usize], fan_in: usize, rng: &mut impl Rng) -> Tensor<f32> {
    let b = 1.0 / (fan_in as f64).sqrt();
    Tensor::from_fn(shape, |_| rng.random_range(-b..b) as f32)
}

impl CleRwkvModel {
    /// Fresh model; every random draw comes from `seed`.
    pub fn new(config: CleRwkvConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut store = ParamStore::new();
        let (r, ci, cm) = (config.r, config.c_in, config.c_model);
        let shallow_k = store.add("shallow.k", uniform(&[3, 3, 3, ci], 27, &mut rng));
        let shallow_b = store.add("shallow.b", Tensor::zeros(&[ci]));
        let ds_p = store.add("ps_ds.w", uniform(&[ci * r * r, cm], ci * r * r, &mut rng));
        let ds_b = store.add("ps_ds.b", Tensor::zeros(&[cm]));
        let blocks = (0..config.num_blocks)
            .map(|i| LRwkvBlock::new(&mut store, &format!("block{i}"), cm, &mut rng))
            .collect();
        let film = match config.variant {
            Variant::Conditional => Some(Film::new(&mut store, config.film, cm, config.num_blocks, &mut rng)?),
            Variant::Base => None,
        };
        let us_p = store.add("ps_us.w", uniform(&[cm, ci * r * r], cm, &mut rng));
        let us_b = store.add("ps_us.b", Tensor::zeros(&[ci * r * r]));
        let head_k = store.add("head.k", Tensor::zeros(&[3, 3, 2 * ci, 3]));
        let head_b = store.add("head.b", Tensor::zeros(&[3]));
        Ok(Self {
            config,
            meta: CheckpointMeta {
                seed,
                ..Default::default()
            },
            store,
            layout: Layout {
                shallow_k,
                shallow_b,
                ds_p,
                ds_b,
                blocks,
                film,
                us_p,
                us_b,
                head_k,
                head_b,
            },
        })
    }

    pub fn param_count(&self) -> usize {
        self.store.num_values()
    }

    /// Records the forward pass of an `(H, W, 3)` RGB tensor on `tape`,
    /// reading parameters through `b` (which may hold a cast copy of the
    /// store). `beta` must be given exactly when the model is conditional.
    pub fn forward_tape<T: Real>(
        &self,
        tape: &mut Tape<T>,
        b: &mut Bindings<T>,
        rgb: &Tensor<T>,
        beta: Option<f64>,
    ) -> Result<ForwardVars> {
        let (h, w) = match *rgb.shape() {
            [h, w, 3] => (h, w),
            ref s => return Err(contract(format!("model input must be (H, W, 3), got {s:?}"))),
        };
        let r = self.config.r;
        if h % r != 0 || w % r != 0 {
            return Err(contract(format!("{h}x{w} input is not divisible by r={r}; pad first")));
        }
        let film = match (&self.layout.film, beta) {
            (Some(f), Some(beta)) => Some((f, beta)),
            (None, None) => None,
            (Some(_), None) => return Err(contract("conditional model needs a target luminance")),
            (None, Some(_)) => return Err(contract("base model takes no target luminance")),
        };
        let input = match self.config.space {
            ColorSpace::Hvi => {
                let mut data = Vec::with_capacity(rgb.len());
                for p in rgb.data().chunks_exact(3) {
                    data.extend_from_slice(&rgb_to_hvi([p[0], p[1], p[2]]));
                }
                Tensor::new(rgb.shape(), data)?
            }
            ColorSpace::Srgb => rgb.clone(),
        };
        let l = &self.layout;
        let x = tape.constant(input)?;
        let (sk, sb) = (b.var(tape, l.shallow_k)?, b.var(tape, l.shallow_b)?);
        let shallow = tape.conv3x3(x, sk, Some(sb))?;
        let (dp, db) = (b.var(tape, l.ds_p)?, b.var(tape, l.ds_b)?);
        let mut z = ps_ds_embed(tape, shallow, r, dp, Some(db))?;
        let hidden = match film {
            Some((f, beta)) => Some(f.hidden(tape, b, beta)?),
            None => None,
        };
        for (i, block) in l.blocks.iter().enumerate() {
            let affine = match (film, hidden) {
                (Some((f, _)), Some(hd)) => Some(f.affine(tape, b, hd, i)?),
                _ => None,
            };
            z = block.forward(tape, b, z, affine)?;
        }
        let (up, ub) = (b.var(tape, l.us_p)?, b.var(tape, l.us_b)?);
        let restored = ps_us_embed(tape, z, r, up, Some(ub))?;
        let merged = tape.concat_channels(shallow, restored)?;
        let (hk, hb) = (b.var(tape, l.head_k)?, b.var(tape, l.head_b)?);
        let delta = tape.conv3x3(merged, hk, Some(hb))?;
        let pred = tape.add(x, delta)?;
        match self.config.space {
            ColorSpace::Hvi => {
                let hvi = tape.hvi_clip(pred)?;
                let rgb = tape.phvit(hvi)?;
                Ok(ForwardVars {
                    rgb: tape.clamp01(rgb)?,
                    hvi: Some(hvi),
                })
            }
            ColorSpace::Srgb => Ok(ForwardVars {
                rgb: tape.clamp01(pred)?,
                hvi: None,
            }),
        }
    }

    fn run(&self, img: &RgbImage, beta: Option<f64>) -> Result<RgbImage> {
        let mut tape = Tape::<f32>::inference();
        let mut b = Bindings::new(&self.store);
        let out = self.forward_tape(&mut tape, &mut b, &img.to_tensor(), beta)?;
        RgbImage::from_tensor(tape.value(out.rgb))
    }

    /// Conditional inference at target luminance `beta` (clamped to `[0, 1]`).
    /// Image dimensions must be multiples of `r`.
    pub fn forward(&self, img: &RgbImage, beta: f64) -> Result<RgbImage> {
        if self.config.variant != Variant::Conditional {
            return Err(contract("forward with a target luminance needs the conditional variant"));
        }
        self.run(img, Some(beta.clamp(0.0, 1.0)))
    }

    /// Fixed-target inference of the base variant.
    pub fn forward_base(&self, img: &RgbImage) -> Result<RgbImage> {
        if self.config.variant != Variant::Base {
            return Err(contract("forward_base called on a conditional model"));
        }
        self.run(img, None)
    }

    /// Pads to a multiple of `r`, runs the variant-appropriate forward pass
    /// and crops back. The base variant ignores `beta`.
    pub fn enhance(&self, img: &RgbImage, beta: f64) -> Result<RgbImage> {
        let (padded, crop) = pad_reflect_to_multiple(img, self.config.r);
        let out = match self.config.variant {
            Variant::Conditional => self.forward(&padded, beta)?,
            Variant::Base => self.forward_base(&padded)?,
        };
        Ok(crop.apply(&out))
    }
}

/// Original size recorded by [`pad_reflect_to_multiple`].
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Crop {
    pub height: usize,
    pub width: usize,
}

impl Crop {
    /// Top-left `height x width` window of `img`.
    pub fn apply(&self, img: &RgbImage) -> RgbImage {
        let mut data = Vec::with_capacity(self.height * self.width * 3);
        for y in 0..self.height {
            let row = y * img.width * 3;
            data.extend_from_slice(&img.data[row..row + self.width * 3]);
        }
        RgbImage {
            height: self.height,
            width: self.width,
            data,
        }
    }
}

fn reflect(i: usize, n: usize) -> usize {
    if n == 1 {
        return 0;
    }
    let period = 2 * (n - 1);
    let m = i % period;
    if m < n {
        m
    } else {
        period - m
    }
}

/// Mirror-pads bottom and right edges up to the next multiples of `r`.
pub fn pad_reflect_to_multiple(img: &RgbImage, r: usize) -> (RgbImage, Crop) {
    let r = r.max(1);
    let crop = Crop {
        height: img.height,
        width: img.width,
    };
    let h = img.height.div_ceil(r) * r;
    let w = img.width.div_ceil(r) * r;
    if h == img.height && w == img.width {
        return (img.clone(), crop);
    }
    let mut data = Vec::with_capacity(h * w * 3);
    for y in 0..h {
        let sy = reflect(y, img.height);
        for x in 0..w {
            let sx = reflect(x, img.width);
            data.extend_from_slice(&img.data[(sy * img.width + sx) * 3..][..3]);
        }
    }
    (RgbImage { height: h, width: w, data }, crop)
}

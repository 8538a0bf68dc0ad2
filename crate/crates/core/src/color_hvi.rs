//! HVI colour decomposition: polar chroma planes plus a max-intensity plane.
//!
//! A pixel is converted to HSV `(h, s, v)` and stored as
//! `(s cos 2πh, s sin 2πh, v)`. The chroma pair is invariant to a global
//! intensity scale and the map is exactly invertible through HSV.

use std::f64::consts::TAU;
use std::path::Path;

use crate::error::{contract, Error, Result};
use crate::numerics::{Real, Tensor};

/// Rec.601 luma weights.
pub const LUMA: [f64; 3] = [0.299, 0.587, 0.114];

/// An sRGB image with components in `[0, 1]`, stored row-major `(y, x, c)`.
#[derive(Clone, Debug, PartialEq)]
pub struct RgbImage {
    pub height: usize,
    pub width: usize,
    pub data: Vec<f32>,
}

impl RgbImage {
    pub fn new(height: usize, width: usize, data: Vec<f32>) -> Result<Self> {
        if data.len() != height * width * 3 {
            return Err(contract(format!(
                "{height}x{width} RGB image needs {} values, got {}",
                height * width * 3,
                data.len()
            )));
        }
        if let Some(i) = data.iter().position(|v| !(0.0..=1.0).contains(v)) {
            return Err(contract(format!("component {i} = {} outside [0, 1]", data[i])));
        }
        Ok(Self { height, width, data })
    }

    pub fn filled(height: usize, width: usize, rgb: [f32; 3]) -> Self {
        let mut data = Vec::with_capacity(height * width * 3);
        for _ in 0..height * width {
            data.extend_from_slice(&rgb);
        }
        Self { height, width, data }
    }

    pub fn from_u8(height: usize, width: usize, bytes: &[u8]) -> Result<Self> {
        Self::new(height, width, bytes.iter().map(|&b| b as f32 / 255.0).collect())
    }

    pub fn to_u8(&self) -> Vec<u8> {
        self.data
            .iter()
            .map(|&v| (v.clamp(0.0, 1.0) * 255.0).round() as u8)
            .collect()
    }

    /// Snap every component to the nearest 8-bit level.
    pub fn quantized(&self) -> Self {
        let bytes = self.to_u8();
        Self::from_u8(self.height, self.width, &bytes).expect("quantized values are in range")
    }

    /// `(H, W, 3)` tensor view of the pixels.
    pub fn to_tensor<T: Real>(&self) -> Tensor<T> {
        Tensor::from_fn(&[self.height, self.width, 3], |i| T::from_f64(self.data[i] as f64))
    }

    /// Inverse of [`to_tensor`](Self::to_tensor); values must lie in `[0, 1]`.
    pub fn from_tensor<T: Real>(t: &Tensor<T>) -> Result<Self> {
        match *t.shape() {
            [h, w, 3] => Self::new(h, w, t.data().iter().map(|v| v.to_f64() as f32).collect()),
            ref s => Err(contract(format!("expected an (H, W, 3) tensor, got {s:?}"))),
        }
    }

    pub fn pixels(&self) -> usize {
        self.height * self.width
    }

    pub fn pixel(&self, y: usize, x: usize) -> [f32; 3] {
        let i = (y * self.width + x) * 3;
        [self.data[i], self.data[i + 1], self.data[i + 2]]
    }

    pub fn set_pixel(&mut self, y: usize, x: usize, rgb: [f32; 3]) {
        let i = (y * self.width + x) * 3;
        self.data[i..i + 3].copy_from_slice(&rgb);
    }

    /// Mean Rec.601 luma.
    pub fn mean_luma(&self) -> f64 {
        let mut acc = 0.0;
        for px in self.data.chunks_exact(3) {
            acc += LUMA[0] * px[0] as f64 + LUMA[1] * px[1] as f64 + LUMA[2] * px[2] as f64;
        }
        acc / self.pixels().max(1) as f64
    }

    pub fn load_png(path: &Path) -> Result<Self> {
        let img = image::open(path).map_err(|e| match e {
            image::ImageError::IoError(io) => Error::io(path, io),
            other => Error::Format {
                what: "PNG",
                path: path.to_path_buf(),
                detail: other.to_string(),
            },
        })?;
        let rgb = img.to_rgb8();
        Self::from_u8(rgb.height() as usize, rgb.width() as usize, rgb.as_raw())
    }

    pub fn decode_png(bytes: &[u8]) -> Result<Self> {
        let img = image::load_from_memory_with_format(bytes, image::ImageFormat::Png)?;
        let rgb = img.to_rgb8();
        Self::from_u8(rgb.height() as usize, rgb.width() as usize, rgb.as_raw())
    }

    pub fn save_png(&self, path: &Path) -> Result<()> {
        let buf = image::RgbImage::from_raw(self.width as u32, self.height as u32, self.to_u8())
            .expect("buffer length matches dimensions");
        buf.save_with_format(path, image::ImageFormat::Png).map_err(|e| match e {
            image::ImageError::IoError(io) => Error::io(path, io),
            other => Error::Image(other),
        })
    }

    pub fn encode_png(&self) -> Result<Vec<u8>> {
        let buf = image::RgbImage::from_raw(self.width as u32, self.height as u32, self.to_u8())
            .expect("buffer length matches dimensions");
        let mut out = std::io::Cursor::new(Vec::new());
        buf.write_to(&mut out, image::ImageFormat::Png)?;
        Ok(out.into_inner())
    }
}

/// Chroma planes and intensity of an image, interleaved per pixel as
/// `(Hc, Vc, Imax)`.
#[derive(Clone, Debug, PartialEq)]
pub struct HviDecomposition {
    pub height: usize,
    pub width: usize,
    pub data: Vec<f32>,
}

impl HviDecomposition {
    pub fn new(height: usize, width: usize, data: Vec<f32>) -> Result<Self> {
        if data.len() != height * width * 3 {
            return Err(contract(format!(
                "{height}x{width} HVI map needs {} values, got {}",
                height * width * 3,
                data.len()
            )));
        }
        Ok(Self { height, width, data })
    }

    pub fn hc(&self, y: usize, x: usize) -> f32 {
        self.data[(y * self.width + x) * 3]
    }

    pub fn vc(&self, y: usize, x: usize) -> f32 {
        self.data[(y * self.width + x) * 3 + 1]
    }

    pub fn imax(&self, y: usize, x: usize) -> f32 {
        self.data[(y * self.width + x) * 3 + 2]
    }

    pub fn to_tensor<T: Real>(&self) -> Tensor<T> {
        Tensor::from_fn(&[self.height, self.width, 3], |i| T::from_f64(self.data[i] as f64))
    }

    pub fn mean_imax(&self) -> f64 {
        self.data.chunks_exact(3).map(|p| p[2] as f64).sum::<f64>() / (self.height * self.width).max(1) as f64
    }
}

/// RGB -> HSV with hue in `[0, 1)`. Ties in the maximum go R, then G, then B;
/// achromatic pixels get hue 0.
pub fn rgb_to_hsv<T: Real>(rgb: [T; 3]) -> [T; 3] {
    let [r, g, b] = rgb;
    let max = r.max(g).max(b);
    let min = r.min(g).min(b);
    let chroma = max - min;
    let six = T::from_f64(6.0);
    let s = if max > T::ZERO { chroma / max } else { T::ZERO };
    let h = if chroma <= T::ZERO {
        T::ZERO
    } else if r >= g && r >= b {
        let x = (g - b) / chroma;
        let x = if x < T::ZERO { x + six } else { x };
        x / six
    } else if g >= b {
        ((b - r) / chroma + T::from_f64(2.0)) / six
    } else {
        ((r - g) / chroma + T::from_f64(4.0)) / six
    };
    let h = if h >= T::ONE { h - T::ONE } else { h };
    [h, s, max]
}

/// Sextant HSV -> RGB.
pub fn hsv_to_rgb<T: Real>(hsv: [T; 3]) -> [T; 3] {
    let [h, s, v] = hsv;
    let six = T::from_f64(6.0);
    let f = |n: f64| {
        let kk = wrap6(T::from_f64(n) + h * six);
        let m = kk.min(T::from_f64(4.0) - kk).min(T::ONE).max(T::ZERO);
        v - v * s * m
    };
    [f(5.0), f(3.0), f(1.0)]
}

fn wrap6<T: Real>(x: T) -> T {
    let six = T::from_f64(6.0);
    let r = x - six * (x / six).floor();
    if r >= six {
        r - six
    } else {
        r
    }
}

/// Per-pixel forward transform.
pub fn rgb_to_hvi<T: Real>(rgb: [T; 3]) -> [T; 3] {
    let [h, s, v] = rgb_to_hsv(rgb);
    let angle = h * T::from_f64(TAU);
    [s * angle.cos(), s * angle.sin(), v]
}

/// Per-pixel inverse transform without clipping. Chroma magnitude is taken
/// as saturation, so callers must keep it within 1.
pub fn hvi_to_rgb<T: Real>(hvi: [T; 3]) -> [T; 3] {
    let [hc, vc, v] = hvi;
    let s = (hc * hc + vc * vc).sqrt();
    let mut h = vc.atan2(hc) / T::from_f64(TAU);
    if h < T::ZERO {
        h += T::ONE;
    }
    if h >= T::ONE {
        h -= T::ONE;
    }
    hsv_to_rgb([h, s, v])
}

/// Radially clips the chroma pair to magnitude 1 and clamps intensity to `[0, 1]`.
pub fn clip_hvi<T: Real>(hvi: [T; 3]) -> [T; 3] {
    let [hc, vc, v] = hvi;
    let s = (hc * hc + vc * vc).sqrt();
    let (hc, vc) = if s > T::ONE { (hc / s, vc / s) } else { (hc, vc) };
    [hc, vc, v.max(T::ZERO).min(T::ONE)]
}

/// Value and Jacobian `J[out][in]` of [`hvi_to_rgb`] at an in-range point.
/// At zero chroma the chroma columns are set to zero.
pub fn hvi_to_rgb_jacobian<T: Real>(hvi: [T; 3]) -> ([T; 3], [[T; 3]; 3]) {
    let [hc, vc, v] = hvi;
    let s2 = hc * hc + vc * vc;
    let s = s2.sqrt();
    let mut h = vc.atan2(hc) / T::from_f64(TAU);
    if h < T::ZERO {
        h += T::ONE;
    }
    if h >= T::ONE {
        h -= T::ONE;
    }
    let six = T::from_f64(6.0);
    let four = T::from_f64(4.0);
    let mut out = [T::ZERO; 3];
    let mut jac = [[T::ZERO; 3]; 3];
    for (ch, n) in [5.0, 3.0, 1.0].into_iter().enumerate() {
        let kk = wrap6(T::from_f64(n) + h * six);
        let raw = kk.min(four - kk);
        let m = raw.min(T::ONE).max(T::ZERO);
        // slope of m with respect to kk
        let dm = if raw > T::ZERO && raw < T::ONE {
            if kk < four - kk {
                T::ONE
            } else {
                -T::ONE
            }
        } else {
            T::ZERO
        };
        out[ch] = v - v * s * m;
        jac[ch][2] = T::ONE - s * m;
        if s > T::ZERO {
            let df_ds = -v * m;
            let df_dh = -v * s * dm * six;
            let dh_dhc = -vc / (T::from_f64(TAU) * s2);
            let dh_dvc = hc / (T::from_f64(TAU) * s2);
            jac[ch][0] = df_ds * hc / s + df_dh * dh_dhc;
            jac[ch][1] = df_ds * vc / s + df_dh * dh_dvc;
        }
    }
    (out, jac)
}

/// Forward HVI transform of an image.
pub fn hvit(img: &RgbImage) -> HviDecomposition {
    let mut data = Vec::with_capacity(img.data.len());
    for px in img.data.chunks_exact(3) {
        let out = rgb_to_hvi([px[0] as f64, px[1] as f64, px[2] as f64]);
        data.extend(out.iter().map(|&v| v as f32));
    }
    HviDecomposition {
        height: img.height,
        width: img.width,
        data,
    }
}

/// Perceptual inverse: radially clips chroma, clamps intensity and the
/// resulting RGB to `[0, 1]`.
pub fn phvit(hvi: &HviDecomposition) -> RgbImage {
    let mut data = Vec::with_capacity(hvi.data.len());
    for px in hvi.data.chunks_exact(3) {
        let clipped = clip_hvi([px[0] as f64, px[1] as f64, px[2] as f64]);
        let rgb = hvi_to_rgb(clipped);
        data.extend(rgb.iter().map(|&v| v.clamp(0.0, 1.0) as f32));
    }
    RgbImage {
        height: hvi.height,
        width: hvi.width,
        data,
    }
}

/// Chroma from `reference`, intensity from `beta_capture`.
pub fn synthesize_hybrid_target(reference: &RgbImage, beta_capture: &RgbImage) -> Result<RgbImage> {
    if reference.height != beta_capture.height || reference.width != beta_capture.width {
        return Err(contract(format!(
            "reference is {}x{} but capture is {}x{}",
            reference.height, reference.width, beta_capture.height, beta_capture.width
        )));
    }
    let mut data = Vec::with_capacity(reference.data.len());
    for (r, c) in reference.data.chunks_exact(3).zip(beta_capture.data.chunks_exact(3)) {
        let [hc, vc, _] = rgb_to_hvi([r[0] as f64, r[1] as f64, r[2] as f64]);
        let imax = c[0].max(c[1]).max(c[2]);
        // one channel always lands on v exactly, so Imax survives bit-exact
        let rgb = hvi_to_rgb(clip_hvi([hc, vc, imax as f64]));
        let px = rgb.map(|v| v.clamp(0.0, 1.0) as f32);
        data.extend_from_slice(&px);
    }
    Ok(RgbImage {
        height: reference.height,
        width: reference.width,
        data,
    })
}

//! The L-RWKV block (spatial mix, channel mix) and FiLM conditioning.
//!
//! Tokens are kept as `(H', W', C)` maps so the depth-wise convolutions see
//! the 2D layout; the WKV scan flattens them row-major.

use rand::Rng;

use crate::error::{contract, Result};
use crate::numerics::{Bindings, ParamId, ParamStore, Real, Tape, Tensor, Var};

fn uniform(shape: &[usize], bound: f64, rng: &mut impl Rng) -> Tensor<f32> {
    Tensor::from_fn(shape, |_| rng.random_range(-bound..bound) as f32)
}

/// Inverse of softplus, for initialising a raw decay from its target value.
pub fn softplus_inverse(y: f64) -> f64 {
    y + (-(-y).exp_m1()).ln()
}

fn check_tokens<T: Real>(tape: &Tape<T>, x: Var, c: usize, op: &str) -> Result<()> {
    match tape.shape(x) {
        [_, _, ch] if *ch == c => Ok(()),
        s => Err(contract(format!("{op}: expected (H', W', {c}) tokens, got {s:?}"))),
    }
}

#[derive(Clone, Debug)]
pub struct SpatialMix {
    pub channels: usize,
    ln_scale: ParamId,
    ln_offset: ParamId,
    /// Depth-wise kernels of the R, K, V paths.
    dw: [ParamId; 3],
    /// Projections W_R, W_K, W_V.
    proj: [ParamId; 3],
    w_o: ParamId,
    w_raw: ParamId,
    u: ParamId,
}

impl SpatialMix {
    pub fn new(store: &mut ParamStore, prefix: &str, c: usize, rng: &mut impl Rng) -> Self {
        let bound = 1.0 / (c as f64).sqrt();
        let ln_scale = store.add(format!("{prefix}.ln_scale"), Tensor::full(&[c], 1.0));
        let ln_offset = store.add(format!("{prefix}.ln_offset"), Tensor::zeros(&[c]));
        let dw = ["r", "k", "v"].map(|p| store.add(format!("{prefix}.dw_{p}"), uniform(&[3, 3, c], 1.0 / 3.0, rng)));
        let proj = ["r", "k", "v"].map(|p| store.add(format!("{prefix}.w_{p}"), uniform(&[c, c], bound, rng)));
        let w_o = store.add(format!("{prefix}.w_o"), Tensor::zeros(&[c, c]));
        let w_raw = store.add(
            format!("{prefix}.w_raw"),
            Tensor::from_fn(&[c], |i| softplus_inverse(1.0 + i as f64 / c as f64) as f32),
        );
        let u = store.add(format!("{prefix}.u"), Tensor::zeros(&[c]));
        Self {
            channels: c,
            ln_scale,
            ln_offset,
            dw,
            proj,
            w_o,
            w_raw,
            u,
        }
    }

    /// Returns `(sigmoid(R) * wkv, V)`, the pre-output gate and the value path.
    pub(crate) fn gated<T: Real>(&self, tape: &mut Tape<T>, b: &mut Bindings<T>, x: Var) -> Result<(Var, Var)> {
        check_tokens(tape, x, self.channels, "spatial_mix")?;
        let scale = b.var(tape, self.ln_scale)?;
        let offset = b.var(tape, self.ln_offset)?;
        let xn = tape.layer_norm(x, scale, offset)?;
        let mut paths = [xn; 3];
        for (i, path) in paths.iter_mut().enumerate() {
            let k = b.var(tape, self.dw[i])?;
            let local = tape.dwconv3x3(xn, k)?;
            let w = b.var(tape, self.proj[i])?;
            *path = tape.conv1x1(local, w, None)?;
        }
        let [r, k, v] = paths;
        let w_raw = b.var(tape, self.w_raw)?;
        let decay = tape.softplus(w_raw)?;
        let u = b.var(tape, self.u)?;
        let wkv = tape.biwkv(k, v, decay, u)?;
        let gate = tape.sigmoid(r)?;
        Ok((tape.mul(gate, wkv)?, v))
    }

    pub fn forward<T: Real>(&self, tape: &mut Tape<T>, b: &mut Bindings<T>, x: Var) -> Result<Var> {
        let (g, _) = self.gated(tape, b, x)?;
        let w_o = b.var(tape, self.w_o)?;
        tape.conv1x1(g, w_o, None)
    }
}

#[derive(Clone, Debug)]
pub struct ChannelMix {
    pub channels: usize,
    ln_scale: ParamId,
    ln_offset: ParamId,
    dw: [ParamId; 2],
    proj: [ParamId; 2],
    w_v: ParamId,
    w_o: ParamId,
}

impl ChannelMix {
    pub fn new(store: &mut ParamStore, prefix: &str, c: usize, rng: &mut impl Rng) -> Self {
        let bound = 1.0 / (c as f64).sqrt();
        let ln_scale = store.add(format!("{prefix}.ln_scale"), Tensor::full(&[c], 1.0));
        let ln_offset = store.add(format!("{prefix}.ln_offset"), Tensor::zeros(&[c]));
        let dw = ["r", "k"].map(|p| store.add(format!("{prefix}.dw_{p}"), uniform(&[3, 3, c], 1.0 / 3.0, rng)));
        let proj = ["r", "k"].map(|p| store.add(format!("{prefix}.w_{p}"), uniform(&[c, c], bound, rng)));
        let w_v = store.add(format!("{prefix}.w_v"), uniform(&[c, c], bound, rng));
        let w_o = store.add(format!("{prefix}.w_o"), Tensor::zeros(&[c, c]));
        Self {
            channels: c,
            ln_scale,
            ln_offset,
            dw,
            proj,
            w_v,
            w_o,
        }
    }

    pub fn forward<T: Real>(&self, tape: &mut Tape<T>, b: &mut Bindings<T>, x: Var) -> Result<Var> {
        check_tokens(tape, x, self.channels, "channel_mix")?;
        let scale = b.var(tape, self.ln_scale)?;
        let offset = b.var(tape, self.ln_offset)?;
        let xn = tape.layer_norm(x, scale, offset)?;
        let mut paths = [xn; 2];
        for (i, path) in paths.iter_mut().enumerate() {
            let k = b.var(tape, self.dw[i])?;
            let local = tape.dwconv3x3(xn, k)?;
            let w = b.var(tape, self.proj[i])?;
            *path = tape.conv1x1(local, w, None)?;
        }
        let [r, k] = paths;
        let act = tape.squared_relu(k)?;
        let w_v = b.var(tape, self.w_v)?;
        let v = tape.conv1x1(act, w_v, None)?;
        let gate = tape.sigmoid(r)?;
        let g = tape.mul(gate, v)?;
        let w_o = b.var(tape, self.w_o)?;
        tape.conv1x1(g, w_o, None)
    }
}

/// Interpolation weights over `m` uniformly spaced anchors in `[0, 1]`.
/// `beta` is clamped into range first.
pub fn anchor_weights(beta: f64, m: usize) -> Vec<f64> {
    let beta = if beta.is_nan() { 0.0 } else { beta.clamp(0.0, 1.0) };
    let pos = beta * (m - 1) as f64;
    let i = (pos.floor() as usize).min(m - 2);
    let t = pos - i as f64;
    let mut w = vec![0.0; m];
    w[i] = 1.0 - t;
    w[i + 1] += t;
    w
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct FilmDims {
    /// Number of anchors.
    pub anchors: usize,
    /// Embedding width.
    pub embed: usize,
    /// Hidden width of the conditioning MLP.
    pub hidden: usize,
}

impl Default for FilmDims {
    fn default() -> Self {
        Self {
            anchors: 16,
            embed: 32,
            hidden: 64,
        }
    }
}

/// Anchor table and conditioning MLP. The hidden layer is shared; each
/// block owns an output layer producing `(dgamma, mu)`.
#[derive(Clone, Debug)]
pub struct Film {
    pub dims: FilmDims,
    pub channels: usize,
    anchors: ParamId,
    w1: ParamId,
    b1: ParamId,
    heads: Vec<(ParamId, ParamId)>,
}

/// Per-block FiLM coefficients bound on a tape.
#[derive(Clone, Copy, Debug)]
pub struct Affine {
    pub dgamma: Var,
    pub mu: Var,
}

impl Film {
    pub fn new(store: &mut ParamStore, dims: FilmDims, c: usize, blocks: usize, rng: &mut impl Rng) -> Result<Self> {
        if dims.anchors < 2 {
            return Err(contract(format!("FiLM needs at least 2 anchors, got {}", dims.anchors)));
        }
        // smooth cosine rows, so anchors that rarely see data still sit
        // between their neighbours instead of at a random point
        let m1 = (dims.anchors - 1) as f64;
        let table = Tensor::from_fn(&[dims.anchors, dims.embed], |i| {
            let (t, d) = ((i / dims.embed) as f64 / m1, i % dims.embed);
            let freq = 0.5 + 0.25 * (d % 8) as f64;
            let phase = std::f64::consts::FRAC_PI_4 * (d / 8) as f64;
            (std::f64::consts::PI * freq * t + phase).cos() as f32
        });
        let anchors = store.add("film.anchors", table);
        let w1 = store.add("film.w1", uniform(&[dims.embed, dims.hidden], 1.0 / (dims.embed as f64).sqrt(), rng));
        let b1 = store.add("film.b1", Tensor::zeros(&[dims.hidden]));
        let heads = (0..blocks)
            .map(|i| {
                (
                    store.add(format!("film.head{i}.w"), Tensor::zeros(&[dims.hidden, 2 * c])),
                    store.add(format!("film.head{i}.b"), Tensor::zeros(&[2 * c])),
                )
            })
            .collect();
        Ok(Self {
            dims,
            channels: c,
            anchors,
            w1,
            b1,
            heads,
        })
    }

    /// Piecewise-linear embedding of `beta`, shape `(1, D)`.
    pub fn embedding<T: Real>(&self, tape: &mut Tape<T>, b: &mut Bindings<T>, beta: f64) -> Result<Var> {
        let w: Vec<T> = anchor_weights(beta, self.dims.anchors).into_iter().map(T::from_f64).collect();
        let wv = tape.constant(Tensor::new(&[1, self.dims.anchors], w)?)?;
        let table = b.var(tape, self.anchors)?;
        tape.matmul(wv, table)
    }

    /// Shared hidden activation `tanh(E W1 + b1)`, shape `(1, hidden)`.
    pub fn hidden<T: Real>(&self, tape: &mut Tape<T>, b: &mut Bindings<T>, beta: f64) -> Result<Var> {
        let e = self.embedding(tape, b, beta)?;
        let w1 = b.var(tape, self.w1)?;
        let b1 = b.var(tape, self.b1)?;
        let pre = tape.conv1x1(e, w1, Some(b1))?;
        tape.tanh(pre)
    }

    pub fn affine<T: Real>(&self, tape: &mut Tape<T>, b: &mut Bindings<T>, hidden: Var, block: usize) -> Result<Affine> {
        let (w, bias) = *self
            .heads
            .get(block)
            .ok_or_else(|| contract(format!("FiLM has no head for block {block}")))?;
        let w = b.var(tape, w)?;
        let bias = b.var(tape, bias)?;
        let out = tape.conv1x1(hidden, w, Some(bias))?;
        let c = self.channels;
        let dg = tape.slice_channels(out, 0, c)?;
        let mu = tape.slice_channels(out, c, c)?;
        Ok(Affine {
            dgamma: tape.reshape(dg, &[c])?,
            mu: tape.reshape(mu, &[c])?,
        })
    }
}

/// `x * (1 + dgamma) + mu`, per channel.
pub fn film_modulate<T: Real>(tape: &mut Tape<T>, x: Var, affine: Affine) -> Result<Var> {
    let gamma = tape.add_scalar(affine.dgamma, T::ONE)?;
    let scaled = tape.mul(x, gamma)?;
    tape.add(scaled, affine.mu)
}

/// Pre-norm residual block: `Y = X + SM(X)`, `Z = Y + CM(Y)`, then FiLM.
#[derive(Clone, Debug)]
pub struct LRwkvBlock {
    pub spatial: SpatialMix,
    pub channel: ChannelMix,
}

impl LRwkvBlock {
    pub fn new(store: &mut ParamStore, prefix: &str, c: usize, rng: &mut impl Rng) -> Self {
        Self {
            spatial: SpatialMix::new(store, &format!("{prefix}.spatial"), c, rng),
            channel: ChannelMix::new(store, &format!("{prefix}.channel"), c, rng),
        }
    }

    pub fn forward<T: Real>(&self, tape: &mut Tape<T>, b: &mut Bindings<T>, x: Var, film: Option<Affine>) -> Result<Var> {
        let s = self.spatial.forward(tape, b, x)?;
        let y = tape.add(x, s)?;
        let c = self.channel.forward(tape, b, y)?;
        let z = tape.add(y, c)?;
        match film {
            Some(a) => film_modulate(tape, z, a),
            None => Ok(z),
        }
    }
}

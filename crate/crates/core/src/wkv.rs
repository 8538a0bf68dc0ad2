//! Bidirectional WKV sequence mixing.
//!
//! For one channel with decay `w >= 0`, bonus `u`, keys `k` and values `v`
//! over `T` tokens the output at position `t` is the normalized mixture
//!
//! ```text
//!          sum_{i != t} exp(-(|t-i| - 1) w / T + k_i) v_i  +  exp(u + k_t) v_t
//! wkv_t = ---------------------------------------------------------------------
//!          sum_{i != t} exp(-(|t-i| - 1) w / T + k_i)      +  exp(u + k_t)
//! ```
//!
//! [`biwkv_naive`] evaluates this directly in O(T^2) and 64-bit precision and
//! serves as the oracle. [`biwkv_scan`] computes the same quantity in O(T)
//! with one left-to-right and one right-to-left accumulation, each carried as
//! a `(numerator, denominator, exponent)` triple so that `exp` never sees a
//! large positive argument. [`biwkv_backward`] runs four linear passes of the
//! same shape to produce exact gradients.

use std::fmt;
use std::time::Instant;

use crate::error::{contract, Error, Result};
use crate::numerics::{Real, Tensor};

/// Per-channel decay and self-bonus as seen by the kernel.
///
/// `w` is the effective decay and must be non-negative; layers keep an
/// unconstrained parameter and pass it through softplus.
#[derive(Clone, Debug, PartialEq)]
pub struct WkvParams<T = f32> {
    pub w: Vec<T>,
    pub u: Vec<T>,
}

impl<T: Real> WkvParams<T> {
    pub fn new(w: Vec<T>, u: Vec<T>) -> Result<Self> {
        if w.len() != u.len() {
            return Err(contract(format!(
                "decay has {} channels but bonus has {}",
                w.len(),
                u.len()
            )));
        }
        if let Some(c) = w.iter().position(|&x| !(x >= T::ZERO) || !x.is_finite()) {
            return Err(contract(format!("decay of channel {c} is negative or non-finite")));
        }
        Ok(Self { w, u })
    }

    pub fn channels(&self) -> usize {
        self.w.len()
    }
}

/// Gradients of a scalar loss with respect to every kernel input.
#[derive(Clone, Debug)]
pub struct WkvGrads<T = f32> {
    pub dk: Tensor<T>,
    pub dv: Tensor<T>,
    pub dw: Vec<T>,
    pub du: Vec<T>,
}

struct Layout {
    batch: usize,
    tokens: usize,
    channels: usize,
}

fn layout<T: Real>(k: &Tensor<T>, v: &Tensor<T>, params_channels: usize) -> Result<Layout> {
    if k.shape() != v.shape() {
        return Err(contract(format!(
            "key shape {:?} differs from value shape {:?}",
            k.shape(),
            v.shape()
        )));
    }
    let shape = k.shape();
    if shape.len() < 2 {
        return Err(contract(format!(
            "sequence tensors need at least (T, C) axes, got {shape:?}"
        )));
    }
    let channels = shape[shape.len() - 1];
    let tokens = shape[shape.len() - 2];
    if tokens == 0 {
        return Err(contract("sequence must hold at least one token"));
    }
    if channels != params_channels {
        return Err(contract(format!(
            "sequence has {channels} channels but parameters have {params_channels}"
        )));
    }
    Ok(Layout {
        batch: k.len() / (tokens * channels),
        tokens,
        channels,
    })
}

fn check_finite<T: Real>(op: &'static str, data: &[T], tokens: usize, channels: usize) -> Result<()> {
    if let Some(pos) = data.iter().position(|x| !x.is_finite()) {
        let c = pos % channels;
        let t = (pos / channels) % tokens;
        return Err(Error::Numeric {
            op,
            detail: format!("non-finite value at token {t}, channel {c}"),
        });
    }
    Ok(())
}

/// Direct O(T^2) evaluation in 64-bit precision with a per-output max shift.
pub fn biwkv_naive<T: Real>(
    k: &Tensor<T>,
    v: &Tensor<T>,
    params: &WkvParams<T>,
) -> Result<Tensor<f64>> {
    let lay = layout(k, v, params.channels())?;
    let (tn, cn) = (lay.tokens, lay.channels);
    let kd = k.data();
    let vd = v.data();
    let mut out = vec![0.0f64; k.len()];
    let mut logits = vec![0.0f64; tn];
    for b in 0..lay.batch {
        let base = b * tn * cn;
        for c in 0..cn {
            let d = params.w[c].to_f64() / tn as f64;
            let u = params.u[c].to_f64();
            for t in 0..tn {
                let mut top = f64::NEG_INFINITY;
                for (i, l) in logits.iter_mut().enumerate() {
                    let ki = kd[base + i * cn + c].to_f64();
                    *l = if i == t {
                        u + ki
                    } else {
                        -((t.abs_diff(i) - 1) as f64) * d + ki
                    };
                    top = top.max(*l);
                }
                let mut num = 0.0;
                let mut den = 0.0;
                for (i, &l) in logits.iter().enumerate() {
                    let e = (l - top).exp();
                    num += e * vd[base + i * cn + c].to_f64();
                    den += e;
                }
                out[base + t * cn + c] = num / den;
            }
        }
    }
    check_finite("biwkv_naive", &out, tn, cn)?;
    Tensor::new(k.shape(), out)
}

/// Linear-time evaluation of the same contract as [`biwkv_naive`].
pub fn biwkv_scan<T: Real>(k: &Tensor<T>, v: &Tensor<T>, params: &WkvParams<T>) -> Result<Tensor<T>> {
    let lay = layout(k, v, params.channels())?;
    let (tn, cn) = (lay.tokens, lay.channels);
    let mut out = vec![T::ZERO; k.len()];
    let decay: Vec<T> = params
        .w
        .iter()
        .map(|&w| w / T::from_f64(tn as f64))
        .collect();
    let mut fwd = vec![T::ZERO; 3 * tn * cn];
    for b in 0..lay.batch {
        let base = b * tn * cn;
        let kd = &k.data()[base..base + tn * cn];
        let vd = &v.data()[base..base + tn * cn];
        let od = &mut out[base..base + tn * cn];
        forward_accumulate(kd, vd, &decay, tn, cn, &mut fwd);

        // right-to-left pass, merged with the stored left-to-right state
        let mut num = vec![T::ZERO; cn];
        let mut den = vec![T::ZERO; cn];
        let mut p = vec![T::NEG_INFINITY; cn];
        for t in (0..tn).rev() {
            let row = t * cn;
            for c in 0..cn {
                let kt = kd[row + c];
                let vt = vd[row + c];
                let (fnum, fden, fp) = (fwd[3 * (row + c)], fwd[3 * (row + c) + 1], fwd[3 * (row + c) + 2]);
                let selfl = params.u[c] + kt;
                let q = fp.max(p[c]).max(selfl);
                let ef = (fp - q).exp();
                let eb = (p[c] - q).exp();
                let es = (selfl - q).exp();
                od[row + c] = (fnum * ef + num[c] * eb + es * vt) / (fden * ef + den[c] * eb + es);

                let np = (p[c] - decay[c]).max(kt);
                let carry = (p[c] - decay[c] - np).exp();
                let fresh = (kt - np).exp();
                num[c] = num[c] * carry + fresh * vt;
                den[c] = den[c] * carry + fresh;
                p[c] = np;
            }
        }
    }
    check_finite("biwkv_scan", &out, tn, cn)?;
    Tensor::new(k.shape(), out)
}

/// Left-to-right accumulation. `state[3*(t*C+c)..]` holds the
/// `(num, den, exponent)` of positions `i < t`.
fn forward_accumulate<T: Real>(kd: &[T], vd: &[T], decay: &[T], tn: usize, cn: usize, state: &mut [T]) {
    let mut num = vec![T::ZERO; cn];
    let mut den = vec![T::ZERO; cn];
    let mut p = vec![T::NEG_INFINITY; cn];
    for t in 0..tn {
        let row = t * cn;
        for c in 0..cn {
            state[3 * (row + c)] = num[c];
            state[3 * (row + c) + 1] = den[c];
            state[3 * (row + c) + 2] = p[c];
            let kt = kd[row + c];
            let np = (p[c] - decay[c]).max(kt);
            let carry = (p[c] - decay[c] - np).exp();
            let fresh = (kt - np).exp();
            num[c] = num[c] * carry + fresh * vd[row + c];
            den[c] = den[c] * carry + fresh;
            p[c] = np;
        }
    }
}

/// One directional accumulator for the backward pass: value/weight sums plus
/// their distance-weighted counterparts, all sharing one exponent.
#[derive(Clone, Copy)]
struct DirState<T> {
    num: T,
    den: T,
    dist_num: T,
    dist_den: T,
    p: T,
}

impl<T: Real> DirState<T> {
    fn empty() -> Self {
        Self {
            num: T::ZERO,
            den: T::ZERO,
            dist_num: T::ZERO,
            dist_den: T::ZERO,
            p: T::NEG_INFINITY,
        }
    }

    /// Moves one step away from the accumulated tokens and absorbs `(k, v)`.
    fn advance(&mut self, decay: T, k: T, v: T) {
        let np = (self.p - decay).max(k);
        let carry = (self.p - decay - np).exp();
        let fresh = (k - np).exp();
        // every absorbed token is now one step further away
        self.dist_num = (self.dist_num + self.num) * carry;
        self.dist_den = (self.dist_den + self.den) * carry;
        self.num = self.num * carry + fresh * v;
        self.den = self.den * carry + fresh;
        self.p = np;
    }
}

/// Signed, exponent-shifted accumulator for the adjoint scans.
#[derive(Clone, Copy)]
struct AdjState<T> {
    a: T,
    b: T,
    p: T,
}

impl<T: Real> AdjState<T> {
    fn empty() -> Self {
        Self {
            a: T::ZERO,
            b: T::ZERO,
            p: T::NEG_INFINITY,
        }
    }

    fn advance(&mut self, decay: T, expo: T, a: T, b: T) {
        let np = (self.p - decay).max(expo);
        let carry = (self.p - decay - np).exp();
        let fresh = (expo - np).exp();
        self.a = self.a * carry + fresh * a;
        self.b = self.b * carry + fresh * b;
        self.p = np;
    }
}

/// Analytic gradients of `sum(upstream * biwkv(k, v))`.
pub fn biwkv_backward<T: Real>(
    k: &Tensor<T>,
    v: &Tensor<T>,
    params: &WkvParams<T>,
    upstream: &Tensor<T>,
) -> Result<WkvGrads<T>> {
    let lay = layout(k, v, params.channels())?;
    if upstream.shape() != k.shape() {
        return Err(contract(format!(
            "upstream gradient shape {:?} differs from sequence shape {:?}",
            upstream.shape(),
            k.shape()
        )));
    }
    let (tn, cn) = (lay.tokens, lay.channels);
    let tf = T::from_f64(tn as f64);
    let decay: Vec<T> = params.w.iter().map(|&w| w / tf).collect();

    let mut dk = vec![T::ZERO; k.len()];
    let mut dv = vec![T::ZERO; k.len()];
    let mut dd = vec![T::ZERO; cn];
    let mut du = vec![T::ZERO; cn];

    let n = tn * cn;
    let mut fwd: Vec<DirState<T>> = vec![DirState::empty(); n];
    // per position: log-shift q, normalizer mantissa, output, g/den, g*wkv/den
    let mut q = vec![T::ZERO; n];
    let mut rho_g = vec![T::ZERO; n];
    let mut rho_gy = vec![T::ZERO; n];
    let mut adj_fwd: Vec<AdjState<T>> = vec![AdjState::empty(); n];

    for b in 0..lay.batch {
        let base = b * n;
        let kd = &k.data()[base..base + n];
        let vd = &v.data()[base..base + n];
        let gd = &upstream.data()[base..base + n];

        // pass 1: left-to-right value and distance sums
        let mut st = vec![DirState::<T>::empty(); cn];
        for t in 0..tn {
            for c in 0..cn {
                let idx = t * cn + c;
                fwd[idx] = st[c];
                st[c].advance(decay[c], kd[idx], vd[idx]);
            }
        }

        // pass 2: right-to-left, combine into outputs and the decay/bonus terms
        let mut st = vec![DirState::<T>::empty(); cn];
        for t in (0..tn).rev() {
            for c in 0..cn {
                let idx = t * cn + c;
                let f = fwd[idx];
                let bk = st[c];
                let kt = kd[idx];
                let vt = vd[idx];
                let selfl = params.u[c] + kt;
                let qt = f.p.max(bk.p).max(selfl);
                let ef = (f.p - qt).exp();
                let eb = (bk.p - qt).exp();
                let es = (selfl - qt).exp();
                let den = f.den * ef + bk.den * eb + es;
                let y = (f.num * ef + bk.num * eb + es * vt) / den;
                let g = gd[idx];

                let dist_num = f.dist_num * ef + bk.dist_num * eb;
                let dist_den = f.dist_den * ef + bk.dist_den * eb;
                dd[c] -= g * (dist_num - y * dist_den) / den;
                du[c] += g * (es / den) * (vt - y);

                q[idx] = qt;
                rho_g[idx] = g / den;
                rho_gy[idx] = g * y / den;
                st[c].advance(decay[c], kt, vt);
            }
        }

        // pass 3: left-to-right adjoint sums over t < i
        let mut st = vec![AdjState::<T>::empty(); cn];
        for i in 0..tn {
            for c in 0..cn {
                let idx = i * cn + c;
                adj_fwd[idx] = st[c];
                st[c].advance(decay[c], -q[idx], rho_g[idx], rho_gy[idx]);
            }
        }

        // pass 4: right-to-left adjoint sums over t > i, then combine
        let mut st = vec![AdjState::<T>::empty(); cn];
        for i in (0..tn).rev() {
            for c in 0..cn {
                let idx = i * cn + c;
                let f = adj_fwd[idx];
                let bk = st[c];
                let ki = kd[idx];
                let ef = (ki + f.p).exp();
                let eb = (ki + bk.p).exp();
                let es = (params.u[c] + ki - q[idx]).exp();
                let s_g = f.a * ef + bk.a * eb + es * rho_g[idx];
                let s_gy = f.b * ef + bk.b * eb + es * rho_gy[idx];
                dv[base + idx] = s_g;
                dk[base + idx] = vd[idx] * s_g - s_gy;
                st[c].advance(decay[c], -q[idx], rho_g[idx], rho_gy[idx]);
            }
        }
    }

    check_finite("biwkv_backward(dk)", &dk, tn, cn)?;
    check_finite("biwkv_backward(dv)", &dv, tn, cn)?;
    let dw: Vec<T> = dd.iter().map(|&x| x / tf).collect();
    check_finite("biwkv_backward(dw)", &dw, 1, cn)?;
    check_finite("biwkv_backward(du)", &du, 1, cn)?;
    Ok(WkvGrads {
        dk: Tensor::new(k.shape(), dk)?,
        dv: Tensor::new(k.shape(), dv)?,
        dw,
        du,
    })
}

/// Timing comparison between the two forward implementations.
#[derive(Clone, Debug)]
pub struct BenchReport {
    pub tokens: usize,
    pub channels: usize,
    pub naive_ns_per_token: f64,
    pub scan_ns_per_token: f64,
}

impl BenchReport {
    pub fn speedup(&self) -> f64 {
        self.naive_ns_per_token / self.scan_ns_per_token
    }
}

impl fmt::Display for BenchReport {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(
            f,
            "T={} C={} naive_ns_per_token={:.1} scan_ns_per_token={:.1} speedup={:.1}",
            self.tokens,
            self.channels,
            self.naive_ns_per_token,
            self.scan_ns_per_token,
            self.speedup()
        )
    }
}

/// Times both kernels on a deterministic pseudo-random sequence, taking the
/// best of `repeats` runs for each.
pub fn bench(tokens: usize, channels: usize, repeats: usize) -> Result<BenchReport> {
    use rand::{Rng, SeedableRng};
    let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(0x5eed);
    let shape = [1, tokens, channels];
    let k = Tensor::<f32>::from_fn(&shape, |_| rng.random_range(-1.0..1.0));
    let v = Tensor::<f32>::from_fn(&shape, |_| rng.random_range(-1.0..1.0));
    let params = WkvParams::new(
        (0..channels).map(|c| 1.0 + c as f32 / channels as f32).collect(),
        vec![0.0; channels],
    )?;
    let time = |f: &dyn Fn() -> Result<()>| -> Result<f64> {
        let mut best = f64::INFINITY;
        for _ in 0..repeats.max(1) {
            let start = Instant::now();
            f()?;
            best = best.min(start.elapsed().as_nanos() as f64);
        }
        Ok(best / tokens as f64)
    };
    let naive = time(&|| biwkv_naive(&k, &v, &params).map(|_| ()))?;
    let scan = time(&|| biwkv_scan(&k, &v, &params).map(|_| ()))?;
    Ok(BenchReport {
        tokens,
        channels,
        naive_ns_per_token: naive,
        scan_ns_per_token: scan,
    })
}

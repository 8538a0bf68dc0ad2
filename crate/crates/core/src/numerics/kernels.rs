//! Forward/backward math for the tape's dense operators.
//!
//! Feature maps are `(H, W, C)` row-major. All reductions run sequentially in
//! index-ascending order.

use super::{Real, Tensor};

pub(crate) fn hw_c(shape: &[usize]) -> (usize, usize, usize) {
    (shape[0], shape[1], shape[2])
}

/// `a[rows, k] @ b[k, m]`
pub(crate) fn matmul<T: Real>(a: &[T], b: &[T], rows: usize, k: usize, m: usize) -> Vec<T> {
    let mut out = vec![T::ZERO; rows * m];
    for r in 0..rows {
        let orow = &mut out[r * m..(r + 1) * m];
        let arow = &a[r * k..(r + 1) * k];
        for (i, &av) in arow.iter().enumerate() {
            if av == T::ZERO {
                continue;
            }
            let brow = &b[i * m..(i + 1) * m];
            for (o, &bv) in orow.iter_mut().zip(brow) {
                *o += av * bv;
            }
        }
    }
    out
}

/// Returns `(g @ b^T, a^T @ g)`.
pub(crate) fn matmul_backward<T: Real>(
    a: &[T],
    b: &[T],
    g: &[T],
    rows: usize,
    k: usize,
    m: usize,
) -> (Vec<T>, Vec<T>) {
    let mut da = vec![T::ZERO; rows * k];
    let mut db = vec![T::ZERO; k * m];
    for r in 0..rows {
        let grow = &g[r * m..(r + 1) * m];
        let arow = &a[r * k..(r + 1) * k];
        let darow = &mut da[r * k..(r + 1) * k];
        for i in 0..k {
            let brow = &b[i * m..(i + 1) * m];
            let mut acc = T::ZERO;
            for (&gv, &bv) in grow.iter().zip(brow) {
                acc += gv * bv;
            }
            darow[i] = acc;
            let av = arow[i];
            if av != T::ZERO {
                let dbrow = &mut db[i * m..(i + 1) * m];
                for (d, &gv) in dbrow.iter_mut().zip(grow) {
                    *d += av * gv;
                }
            }
        }
    }
    (da, db)
}

pub(crate) fn dwconv3x3<T: Real>(x: &Tensor<T>, k: &Tensor<T>) -> Vec<T> {
    let (h, w, c) = hw_c(x.shape());
    let xd = x.data();
    let kd = k.data();
    let mut out = vec![T::ZERO; x.len()];
    for y in 0..h {
        for xx in 0..w {
            let o = &mut out[(y * w + xx) * c..(y * w + xx + 1) * c];
            for dy in 0..3 {
                let sy = y as isize + dy as isize - 1;
                if sy < 0 || sy >= h as isize {
                    continue;
                }
                for dx in 0..3 {
                    let sx = xx as isize + dx as isize - 1;
                    if sx < 0 || sx >= w as isize {
                        continue;
                    }
                    let src = &xd[(sy as usize * w + sx as usize) * c..][..c];
                    let kr = &kd[(dy * 3 + dx) * c..][..c];
                    for ch in 0..c {
                        o[ch] += kr[ch] * src[ch];
                    }
                }
            }
        }
    }
    out
}

pub(crate) fn dwconv3x3_backward<T: Real>(x: &Tensor<T>, k: &Tensor<T>, g: &[T]) -> (Vec<T>, Vec<T>) {
    let (h, w, c) = hw_c(x.shape());
    let xd = x.data();
    let kd = k.data();
    let mut dx_ = vec![T::ZERO; x.len()];
    let mut dk = vec![T::ZERO; 9 * c];
    for y in 0..h {
        for xx in 0..w {
            let go = &g[(y * w + xx) * c..][..c];
            for dy in 0..3 {
                let sy = y as isize + dy as isize - 1;
                if sy < 0 || sy >= h as isize {
                    continue;
                }
                for dx in 0..3 {
                    let sx = xx as isize + dx as isize - 1;
                    if sx < 0 || sx >= w as isize {
                        continue;
                    }
                    let s = (sy as usize * w + sx as usize) * c;
                    let tap = (dy * 3 + dx) * c;
                    for ch in 0..c {
                        dx_[s + ch] += kd[tap + ch] * go[ch];
                        dk[tap + ch] += xd[s + ch] * go[ch];
                    }
                }
            }
        }
    }
    (dx_, dk)
}

/// Dense 3x3 same-padded convolution, kernel `(3, 3, Cin, Cout)`.
pub(crate) fn conv3x3<T: Real>(x: &Tensor<T>, k: &Tensor<T>, bias: Option<&Tensor<T>>) -> Vec<T> {
    let (h, w, ci) = hw_c(x.shape());
    let co = k.shape()[3];
    let xd = x.data();
    let kd = k.data();
    let mut out = vec![T::ZERO; h * w * co];
    for y in 0..h {
        for xx in 0..w {
            let o = &mut out[(y * w + xx) * co..][..co];
            if let Some(b) = bias {
                o.copy_from_slice(b.data());
            }
            for dy in 0..3 {
                let sy = y as isize + dy as isize - 1;
                if sy < 0 || sy >= h as isize {
                    continue;
                }
                for dx in 0..3 {
                    let sx = xx as isize + dx as isize - 1;
                    if sx < 0 || sx >= w as isize {
                        continue;
                    }
                    let src = &xd[(sy as usize * w + sx as usize) * ci..][..ci];
                    let tap = &kd[(dy * 3 + dx) * ci * co..][..ci * co];
                    for (i, &sv) in src.iter().enumerate() {
                        if sv == T::ZERO {
                            continue;
                        }
                        for (ov, &kv) in o.iter_mut().zip(&tap[i * co..(i + 1) * co]) {
                            *ov += sv * kv;
                        }
                    }
                }
            }
        }
    }
    out
}

/// Returns `(dx, dk, dbias)`.
pub(crate) fn conv3x3_backward<T: Real>(x: &Tensor<T>, k: &Tensor<T>, g: &[T]) -> (Vec<T>, Vec<T>, Vec<T>) {
    let (h, w, ci) = hw_c(x.shape());
    let co = k.shape()[3];
    let xd = x.data();
    let kd = k.data();
    let mut dx_ = vec![T::ZERO; x.len()];
    let mut dk = vec![T::ZERO; k.len()];
    let mut db = vec![T::ZERO; co];
    for y in 0..h {
        for xx in 0..w {
            let go = &g[(y * w + xx) * co..][..co];
            for (d, &gv) in db.iter_mut().zip(go) {
                *d += gv;
            }
            for dy in 0..3 {
                let sy = y as isize + dy as isize - 1;
                if sy < 0 || sy >= h as isize {
                    continue;
                }
                for dx in 0..3 {
                    let sx = xx as isize + dx as isize - 1;
                    if sx < 0 || sx >= w as isize {
                        continue;
                    }
                    let s = (sy as usize * w + sx as usize) * ci;
                    let tap = (dy * 3 + dx) * ci * co;
                    for i in 0..ci {
                        let krow = &kd[tap + i * co..][..co];
                        let mut acc = T::ZERO;
                        for (&kv, &gv) in krow.iter().zip(go) {
                            acc += kv * gv;
                        }
                        dx_[s + i] += acc;
                        let sv = xd[s + i];
                        let dkrow = &mut dk[tap + i * co..][..co];
                        for (d, &gv) in dkrow.iter_mut().zip(go) {
                            *d += sv * gv;
                        }
                    }
                }
            }
        }
    }
    (dx_, dk, db)
}

pub(crate) const LN_EPS: f64 = 1e-5;

/// Layer norm over the last axis. Returns `(y, xhat, inv_std per row)`.
pub(crate) fn layer_norm<T: Real>(x: &[T], scale: &[T], offset: &[T], c: usize) -> (Vec<T>, Vec<T>, Vec<T>) {
    let rows = x.len() / c;
    let cf = T::from_f64(c as f64);
    let eps = T::from_f64(LN_EPS);
    let mut y = vec![T::ZERO; x.len()];
    let mut xhat = vec![T::ZERO; x.len()];
    let mut inv = vec![T::ZERO; rows];
    for r in 0..rows {
        let row = &x[r * c..(r + 1) * c];
        let mut mean = T::ZERO;
        for &v in row {
            mean += v;
        }
        mean = mean / cf;
        let mut var = T::ZERO;
        for &v in row {
            var += (v - mean) * (v - mean);
        }
        var = var / cf;
        let is = T::ONE / (var + eps).sqrt();
        inv[r] = is;
        for i in 0..c {
            let xh = (row[i] - mean) * is;
            xhat[r * c + i] = xh;
            y[r * c + i] = xh * scale[i] + offset[i];
        }
    }
    (y, xhat, inv)
}

/// Returns `(dx, dscale, doffset)`.
pub(crate) fn layer_norm_backward<T: Real>(
    xhat: &[T],
    inv: &[T],
    scale: &[T],
    g: &[T],
    c: usize,
) -> (Vec<T>, Vec<T>, Vec<T>) {
    let rows = xhat.len() / c;
    let cf = T::from_f64(c as f64);
    let mut dx = vec![T::ZERO; xhat.len()];
    let mut ds = vec![T::ZERO; c];
    let mut db = vec![T::ZERO; c];
    let mut dxh = vec![T::ZERO; c];
    for r in 0..rows {
        let xr = &xhat[r * c..(r + 1) * c];
        let gr = &g[r * c..(r + 1) * c];
        let mut m1 = T::ZERO;
        let mut m2 = T::ZERO;
        for i in 0..c {
            ds[i] += gr[i] * xr[i];
            db[i] += gr[i];
            dxh[i] = gr[i] * scale[i];
            m1 += dxh[i];
            m2 += dxh[i] * xr[i];
        }
        m1 = m1 / cf;
        m2 = m2 / cf;
        for i in 0..c {
            dx[r * c + i] = inv[r] * (dxh[i] - m1 - xr[i] * m2);
        }
    }
    (dx, ds, db)
}

/// Per-channel valid correlation with a fixed `(kh, kw)` kernel.
pub(crate) fn filter2d_valid<T: Real>(x: &Tensor<T>, kernel: &Tensor<T>) -> (Vec<T>, [usize; 3]) {
    let (h, w, c) = hw_c(x.shape());
    let (kh, kw) = (kernel.shape()[0], kernel.shape()[1]);
    let (oh, ow) = (h + 1 - kh, w + 1 - kw);
    let xd = x.data();
    let kd = kernel.data();
    let mut out = vec![T::ZERO; oh * ow * c];
    for y in 0..oh {
        for xx in 0..ow {
            let o = &mut out[(y * ow + xx) * c..][..c];
            for dy in 0..kh {
                for dx in 0..kw {
                    let kv = kd[dy * kw + dx];
                    if kv == T::ZERO {
                        continue;
                    }
                    let src = &xd[((y + dy) * w + xx + dx) * c..][..c];
                    for (ov, &sv) in o.iter_mut().zip(src) {
                        *ov += kv * sv;
                    }
                }
            }
        }
    }
    (out, [oh, ow, c])
}

pub(crate) fn filter2d_valid_backward<T: Real>(x_shape: &[usize], kernel: &Tensor<T>, g: &[T]) -> Vec<T> {
    let (h, w, c) = hw_c(x_shape);
    let (kh, kw) = (kernel.shape()[0], kernel.shape()[1]);
    let (oh, ow) = (h + 1 - kh, w + 1 - kw);
    let kd = kernel.data();
    let mut dx_ = vec![T::ZERO; h * w * c];
    for y in 0..oh {
        for xx in 0..ow {
            let go = &g[(y * ow + xx) * c..][..c];
            for dy in 0..kh {
                for dx in 0..kw {
                    let kv = kd[dy * kw + dx];
                    if kv == T::ZERO {
                        continue;
                    }
                    let dst = &mut dx_[((y + dy) * w + xx + dx) * c..][..c];
                    for (d, &gv) in dst.iter_mut().zip(go) {
                        *d += kv * gv;
                    }
                }
            }
        }
    }
    dx_
}

pub(crate) fn avg_pool2<T: Real>(x: &Tensor<T>) -> (Vec<T>, [usize; 3]) {
    let (h, w, c) = hw_c(x.shape());
    let (oh, ow) = (h / 2, w / 2);
    let xd = x.data();
    let quarter = T::from_f64(0.25);
    let mut out = vec![T::ZERO; oh * ow * c];
    for y in 0..oh {
        for xx in 0..ow {
            for ch in 0..c {
                let at = |yy: usize, xq: usize| xd[(yy * w + xq) * c + ch];
                out[(y * ow + xx) * c + ch] = quarter
                    * (at(2 * y, 2 * xx) + at(2 * y, 2 * xx + 1) + at(2 * y + 1, 2 * xx) + at(2 * y + 1, 2 * xx + 1));
            }
        }
    }
    (out, [oh, ow, c])
}

pub(crate) fn avg_pool2_backward<T: Real>(x_shape: &[usize], g: &[T]) -> Vec<T> {
    let (h, w, c) = hw_c(x_shape);
    let (oh, ow) = (h / 2, w / 2);
    let quarter = T::from_f64(0.25);
    let mut dx = vec![T::ZERO; h * w * c];
    for y in 0..oh {
        for xx in 0..ow {
            for ch in 0..c {
                let gv = quarter * g[(y * ow + xx) * c + ch];
                for (yy, xq) in [(2 * y, 2 * xx), (2 * y, 2 * xx + 1), (2 * y + 1, 2 * xx), (2 * y + 1, 2 * xx + 1)] {
                    dx[(yy * w + xq) * c + ch] += gv;
                }
            }
        }
    }
    dx
}

//! Space-to-depth folding and the embeddings built on it.
//!
//! Channel order after unshuffle is `c * r * r + dy * r + dx`: source channel
//! major, then raster order inside the `r x r` block.

use crate::error::{contract, Result};
use crate::numerics::{Real, Tape, Tensor, Var};

fn hwc(x: &Tensor<impl Real>, op: &str) -> Result<(usize, usize, usize)> {
    match *x.shape() {
        [h, w, c] => Ok((h, w, c)),
        ref s => Err(contract(format!("{op}: expected (H, W, C), got {s:?}"))),
    }
}

/// `(H, W, C) -> (H/r, W/r, C r^2)`.
pub fn pixel_unshuffle<T: Real>(x: &Tensor<T>, r: usize) -> Result<Tensor<T>> {
    let (h, w, c) = hwc(x, "pixel_unshuffle")?;
    if r == 0 || h % r != 0 || w % r != 0 {
        return Err(contract(format!("pixel_unshuffle: {h}x{w} is not divisible by r={r}")));
    }
    let (oh, ow, oc) = (h / r, w / r, c * r * r);
    let src = x.data();
    let mut out = vec![T::ZERO; src.len()];
    for y in 0..oh {
        for xx in 0..ow {
            let base = (y * ow + xx) * oc;
            for ch in 0..c {
                for dy in 0..r {
                    for dx in 0..r {
                        out[base + ch * r * r + dy * r + dx] = src[((y * r + dy) * w + xx * r + dx) * c + ch];
                    }
                }
            }
        }
    }
    Tensor::new(&[oh, ow, oc], out)
}

/// `(H, W, C) -> (H r, W r, C / r^2)`; exact inverse of [`pixel_unshuffle`].
pub fn pixel_shuffle<T: Real>(x: &Tensor<T>, r: usize) -> Result<Tensor<T>> {
    let (h, w, c) = hwc(x, "pixel_shuffle")?;
    if r == 0 || c % (r * r) != 0 {
        return Err(contract(format!("pixel_shuffle: {c} channels not divisible by r^2 (r={r})")));
    }
    let (oh, ow, oc) = (h * r, w * r, c / (r * r));
    let src = x.data();
    let mut out = vec![T::ZERO; src.len()];
    for y in 0..h {
        for xx in 0..w {
            let base = (y * w + xx) * c;
            for ch in 0..oc {
                for dy in 0..r {
                    for dx in 0..r {
                        out[((y * r + dy) * ow + xx * r + dx) * oc + ch] = src[base + ch * r * r + dy * r + dx];
                    }
                }
            }
        }
    }
    Tensor::new(&[oh, ow, oc], out)
}

/// PS-DS: unshuffle by `r`, then a 1x1 projection to the model width.
pub fn ps_ds_embed<T: Real>(tape: &mut Tape<T>, x: Var, r: usize, proj: Var, bias: Option<Var>) -> Result<Var> {
    let folded = tape.pixel_unshuffle(x, r)?;
    tape.conv1x1(folded, proj, bias)
}

/// PS-US: 1x1 projection to `C_out r^2` channels, then shuffle by `r`.
pub fn ps_us_embed<T: Real>(tape: &mut Tape<T>, x: Var, r: usize, proj: Var, bias: Option<Var>) -> Result<Var> {
    let wide = tape.conv1x1(x, proj, bias)?;
    tape.pixel_shuffle(wide, r)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random(shape: &[usize], seed: u64) -> Tensor<f64> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        Tensor::from_fn(shape, |_| rng.random_range(-1.0..1.0))
    }

    #[test]
    fn two_by_two_folds_into_one_token() {
        let x = Tensor::<f32>::new(&[2, 2, 1], vec![1.0, 2.0, 3.0, 4.0]).unwrap();
        let y = pixel_unshuffle(&x, 2).unwrap();
        assert_eq!(y.shape(), &[1, 1, 4]);
        assert_eq!(y.data(), &[1.0, 2.0, 3.0, 4.0]);
        assert_eq!(pixel_shuffle(&y, 2).unwrap(), x);
    }

    #[test]
    fn unit_factor_is_identity() {
        let x = random(&[3, 5, 2], 1);
        assert_eq!(pixel_unshuffle(&x, 1).unwrap(), x);
        assert_eq!(pixel_shuffle(&x, 1).unwrap(), x);
    }

    #[test]
    fn index_formula_holds_elementwise() {
        let x = random(&[4, 4, 2], 2);
        let y = pixel_unshuffle(&x, 2).unwrap();
        let r = 2;
        for yy in 0..2 {
            for xx in 0..2 {
                for c in 0..2 {
                    for dy in 0..r {
                        for dx in 0..r {
                            let out = y.data()[(yy * 2 + xx) * 8 + c * r * r + dy * r + dx];
                            let inp = x.data()[((yy * r + dy) * 4 + xx * r + dx) * 2 + c];
                            assert_eq!(out.to_bits(), inp.to_bits());
                        }
                    }
                }
            }
        }
    }

    #[test]
    fn divisibility_is_enforced() {
        let x = random(&[3, 4, 1], 3);
        assert!(pixel_unshuffle(&x, 2).is_err());
        let y = random(&[2, 2, 6], 3);
        assert!(pixel_shuffle(&y, 2).is_err());
        // unshuffle by 2, shuffle by 4: 4 channels do not hold a 4x4 block
        let z = pixel_unshuffle(&random(&[4, 4, 1], 4), 2).unwrap();
        assert!(pixel_shuffle(&z, 4).is_err());
    }

    #[test]
    fn ds_token_count_and_us_shape() {
        let mut tape = Tape::<f64>::inference();
        let x = tape.constant(random(&[32, 32, 3], 5)).unwrap();
        let p = tape.constant(random(&[48, 8], 6)).unwrap();
        let t = ps_ds_embed(&mut tape, x, 4, p, None).unwrap();
        assert_eq!(tape.shape(t), &[8, 8, 8]);
        assert_eq!(tape.value(t).rows(), 64);
        let q = tape.constant(random(&[8, 5 * 16], 7)).unwrap();
        let u = ps_us_embed(&mut tape, t, 4, q, None).unwrap();
        assert_eq!(tape.shape(u), &[32, 32, 5]);
    }

    #[test]
    fn identity_projection_is_pure_unshuffle() {
        let x0 = random(&[4, 4, 2], 8);
        let eye = Tensor::from_fn(&[8, 8], |i| if i / 8 == i % 8 { 1.0 } else { 0.0 });
        let mut tape = Tape::<f64>::inference();
        let x = tape.constant(x0.clone()).unwrap();
        let p = tape.constant(eye).unwrap();
        let y = ps_ds_embed(&mut tape, x, 2, p, None).unwrap();
        assert_eq!(tape.value(y), &pixel_unshuffle(&x0, 2).unwrap());
    }

    #[test]
    fn inverse_projections_round_trip() {
        // orthogonal projection: its transpose is its inverse
        let r = 2;
        let n = 3 * r * r;
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let mut q = vec![0.0f64; n * n];
        // Gram-Schmidt on random columns
        let mut cols: Vec<Vec<f64>> = Vec::new();
        while cols.len() < n {
            let mut v: Vec<f64> = (0..n).map(|_| rng.random_range(-1.0..1.0)).collect();
            for c in &cols {
                let d: f64 = v.iter().zip(c).map(|(a, b)| a * b).sum();
                v.iter_mut().zip(c).for_each(|(a, b)| *a -= d * b);
            }
            let norm = v.iter().map(|a| a * a).sum::<f64>().sqrt();
            cols.push(v.iter().map(|a| a / norm).collect());
        }
        for (j, c) in cols.iter().enumerate() {
            for i in 0..n {
                q[i * n + j] = c[i];
            }
        }
        let qt: Vec<f64> = (0..n * n).map(|k| q[(k % n) * n + k / n]).collect();
        let x0 = random(&[6, 4, 3], 10);
        let mut tape = Tape::<f64>::inference();
        let x = tape.constant(x0.clone()).unwrap();
        let p = tape.constant(Tensor::new(&[n, n], q).unwrap()).unwrap();
        let pinv = tape.constant(Tensor::new(&[n, n], qt).unwrap()).unwrap();
        let d = ps_ds_embed(&mut tape, x, r, p, None).unwrap();
        let u = ps_us_embed(&mut tape, d, r, pinv, None).unwrap();
        assert!(tape.value(u).max_abs_diff(&x0) < 1e-6);
    }

    #[test]
    fn zero_input_gives_zero_or_bias() {
        let mut tape = Tape::<f64>::inference();
        let x = tape.constant(Tensor::zeros(&[2, 2, 4])).unwrap();
        let p = tape.constant(random(&[4, 4], 11)).unwrap();
        let y = ps_us_embed(&mut tape, x, 2, p, None).unwrap();
        assert!(tape.value(y).data().iter().all(|&v| v == 0.0));
        let b = tape.constant(Tensor::full(&[4], 0.25)).unwrap();
        let y = ps_us_embed(&mut tape, x, 2, p, Some(b)).unwrap();
        assert!(tape.value(y).data().iter().all(|&v| v == 0.25));
    }

    /// Finite-difference Jacobian of PS-DS: every output token depends on
    /// exactly the pixels of its own r x r patch.
    #[test]
    fn ds_jacobian_is_patch_local() {
        let (h, w, c, r, cm) = (8, 8, 3, 4, 6);
        let x0 = random(&[h, w, c], 12);
        let proj = random(&[c * r * r, cm], 13);
        let eval = |x: &Tensor<f64>| {
            let mut tape = Tape::<f64>::inference();
            let xv = tape.constant(x.clone()).unwrap();
            let p = tape.constant(proj.clone()).unwrap();
            let y = ps_ds_embed(&mut tape, xv, r, p, None).unwrap();
            tape.value(y).clone()
        };
        let eps = 1e-5;
        for py in 0..h {
            for px in 0..w {
                for ch in 0..c {
                    let mut up = x0.clone();
                    let mut dn = x0.clone();
                    up.data_mut()[(py * w + px) * c + ch] += eps;
                    dn.data_mut()[(py * w + px) * c + ch] -= eps;
                    let (yu, yd) = (eval(&up), eval(&dn));
                    for ty in 0..h / r {
                        for tx in 0..w / r {
                            let own = ty == py / r && tx == px / r;
                            let base = (ty * (w / r) + tx) * cm;
                            let moved = (0..cm).any(|k| ((yu.data()[base + k] - yd.data()[base + k]) / (2.0 * eps)).abs() > 1e-9);
                            assert_eq!(moved, own, "pixel ({py},{px},{ch}) token ({ty},{tx})");
                        }
                    }
                }
            }
        }
    }

    proptest! {
        #[test]
        fn shuffle_inverts_unshuffle_bitwise(hb in 1usize..4, wb in 1usize..4, c in 1usize..4, r in 1usize..4, seed in any::<u64>()) {
            let x = random(&[hb * r, wb * r, c], seed).cast::<f32>();
            let y = pixel_unshuffle(&x, r).unwrap();
            prop_assert_eq!(y.shape()[0] * y.shape()[1] * r * r, hb * r * wb * r);
            let back = pixel_shuffle(&y, r).unwrap();
            prop_assert!(back.data().iter().zip(x.data()).all(|(a, b)| a.to_bits() == b.to_bits()));
        }
    }
}

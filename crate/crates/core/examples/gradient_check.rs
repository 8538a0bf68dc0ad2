//! Finite-difference check of one L-RWKV block with FiLM conditioning,
//! over every parameter and the input tokens.

use clerwkv::blocks::{Film, FilmDims, LRwkvBlock};
use clerwkv::numerics::{grad_check, Bindings, GradCheckConfig, ParamStore, Tape, Tensor};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn main() -> clerwkv::Result<()> {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let mut store = ParamStore::new();
    let block = LRwkvBlock::new(&mut store, "b0", 8, &mut rng);
    let film = Film::new(&mut store, FilmDims { anchors: 4, embed: 6, hidden: 5 }, 8, 1, &mut rng)?;
    // output projections start at zero, which would hide most gradients
    for p in store.iter_mut() {
        if p.name.contains("w_o") {
            p.value.data_mut().iter_mut().for_each(|v| *v = rng.random_range(-0.3..0.3));
        }
    }
    let s64 = store.cast::<f64>();
    let np = s64.num_values();
    let x0: Vec<f64> = (0..4 * 4 * 8).map(|_| rng.random_range(-1.0..1.0)).collect();
    let mut point = s64.flatten();
    point.extend_from_slice(&x0);
    // a fixed random projection of the output as the scalar under test
    let proj = Tensor::<f64>::from_fn(&[4, 4, 8], |_| rng.random_range(-1.0..1.0));

    let eval = |p: &[f64], want: bool| -> clerwkv::Result<(f64, Vec<f64>)> {
        let mut s = s64.clone();
        s.assign_flat(&p[..np])?;
        let mut t = if want { Tape::new() } else { Tape::inference() };
        let mut b = Bindings::new(&s);
        let x = t.input(Tensor::new(&[4, 4, 8], p[np..].to_vec())?)?;
        let h = film.hidden(&mut t, &mut b, 0.37)?;
        let a = film.affine(&mut t, &mut b, h, 0)?;
        let y = block.forward(&mut t, &mut b, x, Some(a))?;
        let pv = t.constant(proj.clone())?;
        let y = t.mul(y, pv)?;
        let l = t.mean(y)?;
        let val = t.value(l).item();
        if !want {
            return Ok((val, vec![]));
        }
        let g = t.backward(l)?;
        s.zero_grad();
        g.accumulate_into(&mut s);
        let mut grad = s.flatten_grads();
        grad.extend_from_slice(g.wrt(x).expect("input gradient").data());
        Ok((val, grad))
    };
    let cfg = GradCheckConfig::default();
    let rep = grad_check(|p| eval(p, false).map(|r| r.0), |p| eval(p, true).map(|r| r.1), &point, cfg)?;
    println!(
        "{} coordinates, h={:e}: max rel err {:.2e} at {} -> {}",
        point.len(),
        cfg.h,
        rep.max_rel_err,
        rep.worst,
        if rep.passed() { "pass" } else { "FAIL" }
    );
    Ok(())
}

//! Pixel unshuffle / shuffle and the patch locality of the PS-DS embedding.

use clerwkv::numerics::{Tape, Tensor};
use clerwkv::s2d::{pixel_shuffle, pixel_unshuffle, ps_ds_embed};

fn main() -> clerwkv::Result<()> {
    let x = Tensor::<f32>::from_fn(&[8, 8, 3], |i| i as f32);
    let folded = pixel_unshuffle(&x, 4)?;
    println!("unshuffle (8, 8, 3) by 4 -> {:?}", folded.shape());
    let back = pixel_shuffle(&folded, 4)?;
    println!("shuffle restores the input bitwise: {}", back == x);

    // which input pixels feed token (1, 0)?
    let proj = Tensor::<f64>::from_fn(&[48, 6], |i| ((i % 11) as f64 - 5.0) / 10.0);
    let mut tape = Tape::<f64>::new();
    let xv = tape.input(x.cast())?;
    let p = tape.constant(proj)?;
    let tokens = ps_ds_embed(&mut tape, xv, 4, p, None)?;
    let mask = tape.constant(Tensor::from_fn(&[2, 2, 6], |i| if i / 6 == 2 { 1.0 } else { 0.0 }))?;
    let picked = tape.mul(tokens, mask)?;
    let loss = tape.mean(picked)?;
    let grads = tape.backward(loss)?;
    let g = grads.wrt(xv).expect("input gradient");
    println!("input pixels reaching token (1, 0):");
    for y in 0..8 {
        let row: String = (0..8).map(|x| if (0..3).any(|c| g.data()[(y * 8 + x) * 3 + c] != 0.0) { '#' } else { '.' }).collect();
        println!("  {row}");
    }
    Ok(())
}

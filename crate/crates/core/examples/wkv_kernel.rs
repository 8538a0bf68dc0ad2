//! Bi-WKV: linear-time scan against the quadratic reference, then a timing
//! comparison over growing sequence lengths.

use clerwkv::numerics::Tensor;
use clerwkv::wkv::{bench, biwkv_naive, biwkv_scan, WkvParams};

fn main() -> clerwkv::Result<()> {
    let (t, c) = (9, 2);
    let k = Tensor::<f64>::from_fn(&[1, t, c], |i| ((i * 7) % 5) as f64 - 2.0);
    let v = Tensor::<f64>::from_fn(&[1, t, c], |i| if i / c == 4 { 1.0 } else { 0.0 });
    let params = WkvParams::new(vec![2.0, 6.0], vec![0.5, 0.5])?;
    let scan = biwkv_scan(&k, &v, &params)?;
    let naive = biwkv_naive(&k, &v, &params)?;
    println!("impulse at token 4, per-token response (channel 0 | channel 1):");
    for i in 0..t {
        println!(
            "  t={i}  {:.5} | {:.5}   naive {:.5} | {:.5}",
            scan.data()[i * c],
            scan.data()[i * c + 1],
            naive.data()[i * c],
            naive.data()[i * c + 1]
        );
    }
    for tokens in [64, 256, 1024] {
        println!("{}", bench(tokens, 32, 3)?);
    }
    Ok(())
}

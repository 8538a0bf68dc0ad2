//! Round-trips a synthetic image through the HVI transform and shows that
//! chroma survives a global dimming while intensity does not.

use clerwkv::color_hvi::{hvit, phvit, rgb_to_hvi, synthesize_hybrid_target, RgbImage};

fn main() -> clerwkv::Result<()> {
    let (h, w) = (24, 32);
    let data = (0..h * w)
        .flat_map(|i| {
            let (y, x) = ((i / w) as f32 / h as f32, (i % w) as f32 / w as f32);
            [x, y, 1.0 - 0.5 * (x + y)]
        })
        .collect();
    let img = RgbImage::new(h, w, data)?;
    let back = phvit(&hvit(&img));
    let err = img.data.iter().zip(&back.data).map(|(a, b)| (a - b).abs()).fold(0.0f32, f32::max);
    println!("round trip max abs error: {err:.2e}");

    let px = [0.8, 0.4, 0.1];
    for k in [1.0, 0.5, 0.05] {
        let [hc, vc, i] = rgb_to_hvi(px.map(|c: f64| c * k));
        println!("rgb x {k:<4}: H={hc:+.6} V={vc:+.6} I={i:.3}");
    }

    // chroma of a bright reference, intensity of a dim capture
    let dim = RgbImage::new(h, w, img.data.iter().map(|v| v * 0.3).collect())?;
    let hybrid = synthesize_hybrid_target(&img, &dim)?;
    println!(
        "mean luma: reference {:.3}, dim capture {:.3}, hybrid {:.3}",
        img.mean_luma(),
        dim.mean_luma(),
        hybrid.mean_luma()
    );
    Ok(())
}

//! The two reasons brightening a dark capture is not the same as capturing
//! more light: noise gain under mean matching, and the non-linear ISP.

use clerwkv::lightsynth::{generate_scene, isp_transfer, noncommute_gap, IspConfig, RadianceScene};
use clerwkv::losses::noise_variance_ratio;

fn main() -> clerwkv::Result<()> {
    for k in [2.0, 4.0, 8.0] {
        let r = noise_variance_ratio(k, 10_000, 1)?;
        println!("gain {k}: noise variance grows {r:.2}x (k^2 = {})", k * k);
    }

    let flat = RadianceScene::flat(4, 4, [0.25; 3]);
    let gamma = IspConfig::pure_gamma(2.2);
    println!(
        "flat 0.25 through gamma 2.2: T(R) = {:.4}, T(2R) = {:.4}, gap at k=2 = {:.4}",
        isp_transfer(0.25, &gamma),
        isp_transfer(0.5, &gamma),
        noncommute_gap(&flat, 2.0, &gamma)
    );
    println!("linear ISP gap: {:.4}", noncommute_gap(&flat, 2.0, &IspConfig::degenerate()));
    let isp = IspConfig::default();
    for seed in 0..4 {
        let scene = generate_scene(seed, 40, 40);
        let gaps: Vec<String> = [1.5, 2.0, 4.0].iter().map(|&k| format!("{:.4}", noncommute_gap(&scene, k, &isp))).collect();
        println!("scene {seed}: default ISP gap at k=1.5/2/4: {}", gaps.join(" / "));
    }
    Ok(())
}

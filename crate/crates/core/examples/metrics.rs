//! PSNR and SSIM with and without gt-mean scaling: a correctly structured
//! but too-dark prediction scores badly until its brightness is matched.

use clerwkv::color_hvi::RgbImage;
use clerwkv::losses::{luminance_histogram, PairMetrics, HIST_BINS};

fn main() -> clerwkv::Result<()> {
    let (h, w) = (32, 32);
    let gt = RgbImage::new(
        h,
        w,
        (0..h * w * 3).map(|i| 0.2 + 0.6 * ((i / 3 % w) as f32 / w as f32) * (((i % 3) + 1) as f32 / 3.0)).collect(),
    )?;
    for gain in [1.0, 0.8, 0.5] {
        let pred = RgbImage::new(h, w, gt.data.iter().map(|v| v * gain).collect())?;
        let m = PairMetrics::measure(&pred, &gt, gt.mean_luma())?;
        println!(
            "gain {gain}: PSNR {:.2} dB (gt-mean {:.2}), SSIM {:.4} (gt-mean {:.4}), luma error {:.3}",
            m.psnr, m.psnr_gt_mean, m.ssim, m.ssim_gt_mean, m.luminance_error
        );
    }
    let hist = luminance_histogram(&gt, HIST_BINS);
    let occupied = hist.iter().filter(|&&v| v > 0.0).count();
    println!("{occupied} of {HIST_BINS} luminance bins occupied");
    Ok(())
}

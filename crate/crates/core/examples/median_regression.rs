//! Regression to the median: a base model trained with an L1 loss on
//! targets of every brightness lands near the median target luminance,
//! whatever brightness is wanted.

use clerwkv::lightsynth::{Dataset, SynthConfig};
use clerwkv::model::{CleRwkvConfig, CleRwkvModel};
use clerwkv::trainer::{l1_optimal_constant, median_regression_experiment, paradigm_gap, TrainConfig};

fn main() -> clerwkv::Result<()> {
    let targets = [0.2, 0.5, 0.8];
    println!("L1-optimal constant for {targets:?}: {:?}", l1_optimal_constant(&targets));

    let epochs = std::env::args().nth(1).and_then(|a| a.parse().ok()).unwrap_or(60);
    let data = Dataset::synthesize(&SynthConfig::default())?;
    let mut base = CleRwkvModel::new(CleRwkvConfig::default().base(), 0)?;
    let cfg = TrainConfig {
        epochs,
        ..TrainConfig::default()
    };
    let (report, _) = median_regression_experiment(&mut base, &data, &cfg)?;
    print!("{}", report.to_text());
    let p = paradigm_gap(&base, &data.test())?;
    println!("PSNR against every target level: {:.2} dB, after gt-mean scaling {:.2} dB", p.psnr, p.psnr_gt_mean);
    Ok(())
}

//! Trains the conditional model on a small synthetic dataset, saves the
//! checkpoint and enhances one held-out capture at three target levels.
//!
//! `cargo run --release --example train_conditional -- [epochs] [out.ckpt]`

use clerwkv::lightsynth::{Dataset, SynthConfig};
use clerwkv::model::{CleRwkvConfig, CleRwkvModel};
use clerwkv::trainer::{train_with, TargetPolicy, TrainConfig};

fn main() -> clerwkv::Result<()> {
    let mut args = std::env::args().skip(1);
    let epochs = args.next().and_then(|a| a.parse().ok()).unwrap_or(20);
    let out = args.next().unwrap_or_else(|| "conditional.ckpt".into());
    let data = Dataset::synthesize(&SynthConfig::default())?;
    let mut model = CleRwkvModel::new(CleRwkvConfig::default(), 0)?;
    println!("{} parameters, {} training scenes", model.param_count(), data.train().len());
    let cfg = TrainConfig {
        epochs,
        targets: TargetPolicy::BalancedBeta,
        ..TrainConfig::default()
    };
    let log = train_with(&mut model, &data.train(), &data.test(), &cfg, |s| {
        if s.step % 50 == 0 {
            println!("step {:>5} loss {:.4} lr {:.2e}", s.step, s.loss, s.lr);
        }
    })?;
    println!("final loss {:.4}", log.final_loss().unwrap_or(f64::NAN));
    model.save(out.as_ref())?;
    println!("saved {out} (sha256 {})", model.digest());

    let stack = data.test()[0];
    let input = &stack.levels[0].image;
    for beta in [0.15, 0.3, 0.45] {
        let y = model.enhance(input, beta)?;
        println!("β={beta:.2}: input luma {:.3} -> output luma {:.3}", input.mean_luma(), y.mean_luma());
    }
    Ok(())
}

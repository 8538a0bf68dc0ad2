//! β sweeps on held-out scenes: how closely the output mean luminance
//! follows the requested β. Trains a model first unless a checkpoint path
//! is given.
//!
//! `cargo run --release --example controllability -- [model.ckpt]`

use clerwkv::lightsynth::{Dataset, SynthConfig};
use clerwkv::model::{CleRwkvConfig, CleRwkvModel};
use clerwkv::trainer::{controllability_eval, train, TargetPolicy, TrainConfig};

fn main() -> clerwkv::Result<()> {
    let data = Dataset::synthesize(&SynthConfig::default())?;
    let model = match std::env::args().nth(1) {
        Some(path) => CleRwkvModel::load(path.as_ref())?,
        None => {
            let mut m = CleRwkvModel::new(CleRwkvConfig::default(), 0)?;
            println!("no checkpoint given; training 40 epochs first");
            train(&mut m, &data.train(), &[], &TrainConfig { epochs: 40, targets: TargetPolicy::BalancedBeta, ..Default::default() })?;
            m
        }
    };
    let rep = controllability_eval(&model, &data.test(), 16)?;
    print!("{}", rep.to_text());
    println!(
        "within 0.05 of β: {:.1}%, worst sweep {} monotonicity violations",
        100.0 * rep.fraction_tracking(0.05),
        rep.max_violations(0.01)
    );
    Ok(())
}

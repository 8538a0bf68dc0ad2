//! Synthesizes a small multi-illumination dataset, prints each stack's
//! labels and writes it to disk in the layout the CLI reads.
//!
//! `cargo run --release --example lightsynth_dataset -- /tmp/lightsynth`

use std::path::PathBuf;

use clerwkv::lightsynth::{Dataset, SynthConfig};

fn main() -> clerwkv::Result<()> {
    let out: PathBuf = std::env::args().nth(1).unwrap_or_else(|| "lightsynth-mini".into()).into();
    let cfg = SynthConfig {
        scenes: 11,
        levels: 8,
        ..SynthConfig::default()
    };
    let data = Dataset::synthesize(&cfg)?;
    for s in &data.stacks {
        let betas: Vec<String> = s.betas().iter().map(|b| format!("{b:.3}")).collect();
        println!(
            "scene {:>2} ({}): reference level {} of {}, β = [{}]",
            s.index,
            if data.test().iter().any(|t| t.index == s.index) { "test" } else { "train" },
            s.reference + 1,
            s.levels.len(),
            betas.join(", ")
        );
    }
    let (lo, hi) = data.beta_range();
    println!("β range {lo:.3}..{hi:.3}");
    data.export(&out)?;
    let back = Dataset::load(&out)?;
    println!("wrote {} and reloaded {} stacks", out.display(), back.stacks.len());
    Ok(())
}

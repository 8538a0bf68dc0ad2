//! Serves a checkpoint over HTTP (`/health`, `/info`, `/enhance`).
//! Without a checkpoint, an untrained model is served, which is enough to
//! exercise the contract.
//!
//! `cargo run --release --example serve -- [model.ckpt] [127.0.0.1:8080]`
//!
//! ```text
//! curl -s localhost:8080/info
//! curl -s -X POST localhost:8080/enhance \
//!   -d "{\"image\":\"$(base64 -w0 dark.png)\",\"beta\":\"0.4\"}"
//! ```

use clerwkv::model::{CleRwkvConfig, CleRwkvModel};

#[tokio::main]
async fn main() -> clerwkv::Result<()> {
    let mut args = std::env::args().skip(1);
    let model = match args.next() {
        Some(path) if path.ends_with(".ckpt") => CleRwkvModel::load(path.as_ref())?,
        _ => CleRwkvModel::new(CleRwkvConfig::default(), 0)?,
    };
    let addr = args.next().unwrap_or_else(|| "127.0.0.1:8080".into());
    let addr = addr.parse().expect("socket address like 127.0.0.1:8080");
    clerwkv::service::serve(model, addr, false).await
}

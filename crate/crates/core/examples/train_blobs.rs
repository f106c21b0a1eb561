//! Trains the single dynamic block on binary blobs and prints the metrics
//! table. Pass a step count to shorten or lengthen the run.
//!
//! cargo run --release --example train_blobs -- [steps] [out_dir]

use std::path::PathBuf;

use steerkit::train::{train_network, TrainConfig, METRICS_HEADER};
use steerkit::blocks::Network;

fn main() -> steerkit::Result<()> {
    let mut args = std::env::args().skip(1);
    let steps = args.next().map_or(300, |s| s.parse().expect("step count"));
    let out = PathBuf::from(args.next().unwrap_or_else(|| "target/train_blobs".into()));
    let cfg = TrainConfig {
        steps,
        eval_interval: (steps / 10).max(1),
        ..TrainConfig::default()
    };
    let mut net = Network::from_text(&cfg.spec, 1, cfg.seed)?;
    println!("{} ({} parameters)", cfg.spec, net.param_count());
    println!("{METRICS_HEADER}");
    let outcome = train_network(&mut net, &cfg, Some(&out), |r| {
        println!("{},{:.5},{:.4},{:.4},{:.4}", r.step, r.loss, r.pixel_f, r.ods, r.ois);
    })?;
    println!("final pixel F {:.4}; checkpoint in {}", outcome.final_eval.pixel_f, out.join("checkpoint").display());
    Ok(())
}

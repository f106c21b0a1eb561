//! The synthetic blob boundary task: renders a few samples of every mode,
//! reports how well plain gradient magnitude separates boundary pixels and
//! dumps PGMs.
//!
//! cargo run --example blob_data -- [out_dir]

use std::path::PathBuf;

use steerkit::data::{blob_sample, dump, gradient_magnitude_auc, BlobConfig, BlobMode};

fn main() -> steerkit::Result<()> {
    let out = PathBuf::from(std::env::args().nth(1).unwrap_or_else(|| "target/blob_data".into()));
    let cfg = BlobConfig::default();
    for mode in [BlobMode::Binary, BlobMode::Textured, BlobMode::Hard] {
        let s = blob_sample(0, 0, mode, &cfg)?;
        let boundary = s.target.data().iter().filter(|v| **v > 0.5).count();
        let auc = gradient_magnitude_auc(0, 32, mode, 1.0, &cfg)?;
        println!("{mode:<9} seed {:>20}  boundary px {boundary:>4}  gradient AUC {auc:.4}", s.seed);
        dump(&out.join(mode.to_string()), 0, 4, mode, &cfg)?;
    }
    println!("samples written under {}", out.display());
    Ok(())
}

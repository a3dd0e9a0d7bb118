//! Interrupt a run after its first stage, resume it, and confirm the result
//! matches an uninterrupted run byte for byte.
//!
//! cargo run --release --example resume

use ads_unet::config::RunConfig;
use ads_unet::data::SyntheticSpec;
use ads_unet::run::{cmd_train, ENSEMBLE_FILE, METRICS_FILE, TrainOptions};

fn main() -> ads_unet::error::Result<()> {
    let dir = tempfile::tempdir().expect("temp dir");
    let mut base = RunConfig::synthetic(dir.path().join("data"), dir.path().join("straight"), 4);
    base.model.max_depth = 2;
    base.model.base_filters = 4;
    base.data.synthetic = Some(SyntheticSpec { seed: 4, tile_size: 16, max_depth: 2, train_tiles: 16, test_tiles: 4, ..Default::default() });
    base.train.epochs = 10;
    base.train.learning_rate = 1e-2;
    base.train.batch_size = 4;

    cmd_train(&base, &TrainOptions::default())?;
    let split = RunConfig { output: dir.path().join("split"), ..base.clone() };
    cmd_train(&split, &TrainOptions { stop_after: Some(1), verbose: true })?;
    println!("interrupted after stage 1; resuming");
    let resumed = cmd_train(&split, &TrainOptions { stop_after: None, verbose: true })?;
    println!("resumed from stage {}", resumed.resumed_from);
    for f in [ENSEMBLE_FILE, METRICS_FILE, "stage2.bin"] {
        let same = std::fs::read(base.output.join(f)).unwrap() == std::fs::read(split.output.join(f)).unwrap();
        println!("{f}: identical {same}");
    }
    Ok(())
}

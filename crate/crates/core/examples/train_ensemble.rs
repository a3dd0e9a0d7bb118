//! Train a four-stage boosted ensemble on synthetic data and score every
//! learner and both ensemble modes on the held-out split.
//!
//! cargo run --release --example train_ensemble -- [work_dir] [epochs]

use std::path::PathBuf;

use ads_unet::config::RunConfig;
use ads_unet::data::Split;
use ads_unet::run::{cmd_eval, cmd_train, EvalMode, TrainOptions};

fn main() -> ads_unet::error::Result<()> {
    let mut args = std::env::args().skip(1);
    let work = PathBuf::from(args.next().unwrap_or_else(|| "ensemble_demo".into()));
    let mut cfg = RunConfig::synthetic(work.join("data"), work.join("run"), 0);
    cfg.train.epochs = args.next().map_or(5, |s| s.parse().expect("epochs"));

    let summary = cmd_train(&cfg, &TrainOptions { stop_after: None, verbose: true })?;
    for r in &summary.records {
        println!(
            "UNet^{}: eps {:.4} alpha {:.4} trainable {} frozen {}",
            r.depth,
            r.error,
            r.alpha,
            r.trainable_parameters,
            r.frozen.len()
        );
    }
    let report = cmd_eval(&cfg.output, None, Split::Test, &[EvalMode::PerLearner, EvalMode::Avg, EvalMode::Alpha])?;
    println!("{}", report.table());
    Ok(())
}

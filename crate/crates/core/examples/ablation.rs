//! Toggle deep supervision, skip-connection recalibration and sample
//! re-weighting in all eight combinations and tabulate each learner and both
//! ensemble modes.
//!
//! cargo run --release --example ablation -- [work_dir] [epochs]

use std::path::PathBuf;

use ads_unet::boosting::EnsembleMode;
use ads_unet::config::RunConfig;
use ads_unet::data::{Split, SyntheticSpec};
use ads_unet::run::{cmd_eval, cmd_train, EvalMode, TrainOptions};

fn main() -> ads_unet::error::Result<()> {
    let mut args = std::env::args().skip(1);
    let work = PathBuf::from(args.next().unwrap_or_else(|| "ablation_demo".into()));
    let epochs: usize = args.next().map_or(4, |s| s.parse().expect("epochs"));

    println!("{:<6} {:<6} {:<9} {:>8} {:>8} {:>8} {:>9} {:>10}", "ds", "scse", "reweight", "UNet^1", "UNet^2", "UNet^3", "ens(avg)", "ens(alpha)");
    for k in 0..8u32 {
        let (ds, scse, rw) = (k & 1 != 0, k & 2 != 0, k & 4 != 0);
        let cfg = RunConfig {
            output: work.join(format!("run{k}")),
            ..RunConfig::synthetic(work.join("data"), "", 0).with_toggles(ds, scse, rw, EnsembleMode::Alpha)
        };
        let mut cfg = cfg;
        cfg.model.max_depth = 3;
        cfg.data.synthetic = Some(SyntheticSpec { max_depth: 3, ..Default::default() });
        cfg.train.epochs = epochs;
        cmd_train(&cfg, &TrainOptions::default())?;
        let report = cmd_eval(&cfg.output, None, Split::Test, &[EvalMode::PerLearner, EvalMode::Avg, EvalMode::Alpha])?;
        let cell = |m: &str| report.row(m).map_or("-".to_string(), |r| format!("{:.2}", 100.0 * r.pooled_miou));
        println!(
            "{:<6} {:<6} {:<9} {:>8} {:>8} {:>8} {:>9} {:>10}",
            ds,
            scse,
            rw,
            cell("UNet^1"),
            cell("UNet^2"),
            cell("UNet^3"),
            cell("ens(avg)"),
            cell("ens(alpha)")
        );
    }
    Ok(())
}

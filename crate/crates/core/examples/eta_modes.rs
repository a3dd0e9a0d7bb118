//! Compare the three block-weight modes: free softmax weights, bounded
//! weights with the dominant block's prediction, and bounded weights with the
//! weighted-sum prediction. Prints the final weights of each stage.
//!
//! cargo run --release --example eta_modes -- [work_dir] [eta_lr_scale]

use std::path::PathBuf;

use ads_unet::config::RunConfig;
use ads_unet::data::{Split, SyntheticSpec};
use ads_unet::run::{cmd_eval, cmd_train, EvalMode, TrainOptions};
use ads_unet::supervision::{EtaMode, EtaWeights};

fn main() -> ads_unet::error::Result<()> {
    let mut args = std::env::args().skip(1);
    let work = PathBuf::from(args.next().unwrap_or_else(|| "eta_modes_demo".into()));
    let scale: f64 = args.next().map_or(100.0, |s| s.parse().expect("scale"));

    for mode in [EtaMode::Unconstrained, EtaMode::Bounded, EtaMode::BoundedSum] {
        let name = format!("{mode:?}").to_lowercase();
        let mut cfg = RunConfig::synthetic(work.join("data"), work.join(&name), 0);
        cfg.model.max_depth = 3;
        cfg.data.synthetic = Some(SyntheticSpec { max_depth: 3, ..Default::default() });
        cfg.train.epochs = 6;
        cfg.train.eta_mode = mode;
        cfg.train.eta_lr_scale = scale;
        let summary = cmd_train(&cfg, &TrainOptions::default())?;
        println!("{name}:");
        for r in &summary.records {
            let w = EtaWeights { raw_logits: r.eta_raw.clone(), mode };
            let (lo, hi) = EtaWeights::tilde_bounds(r.depth);
            println!("  stage {} eta {:.3?} eta~ {:.3?} (bounds {lo:.3}..{hi:.3})", r.depth, w.eta(), w.eta_tilde());
        }
        let report = cmd_eval(&cfg.output, None, Split::Test, &[EvalMode::PerLearner, EvalMode::Alpha])?;
        println!("{}", report.table());
    }
    Ok(())
}

//! Layer similarity inside a trained ensemble, and how it changes when the
//! skip-connection recalibration is removed. Writes CSV matrices and heatmaps.
//!
//! cargo run --release --example cka_analysis -- [work_dir]

use std::path::PathBuf;

use ads_unet::analysis::{matrix_diff, write_matrix_csv};
use ads_unet::config::RunConfig;
use ads_unet::data::SyntheticSpec;
use ads_unet::plot::heatmap;
use ads_unet::run::{cmd_analyze, cmd_train, AnalysisKind, AnalyzeOptions, TrainOptions};

fn main() -> ads_unet::error::Result<()> {
    let work = PathBuf::from(std::env::args().nth(1).unwrap_or_else(|| "cka_demo".into()));
    let mut matrices = Vec::new();
    for scse in [true, false] {
        let mut cfg = RunConfig::synthetic(work.join("data"), work.join(format!("scse_{scse}")), 0);
        cfg.model.max_depth = 3;
        cfg.model.scse = scse;
        cfg.data.synthetic = Some(SyntheticSpec { max_depth: 3, ..Default::default() });
        cfg.train.epochs = 4;
        cmd_train(&cfg, &TrainOptions::default())?;
        let out = cmd_analyze(Some(&cfg.output), None, AnalysisKind::Cka, &AnalyzeOptions::new(cfg.output.join("analysis")))?;
        let (labels, m) = out.cka.expect("similarity matrix");
        println!("scse {scse}: {} layers, files {:?}", labels.len(), out.files);
        matrices.push((labels, m));
    }
    let diff = matrix_diff(&matrices[0].1, &matrices[1].1)?;
    let labels = &matrices[0].0;
    write_matrix_csv(&work.join("cka_diff.csv"), labels, &diff)?;
    let values: Vec<f64> = (0..diff.nrows()).flat_map(|r| (0..diff.ncols()).map(move |c| (r, c))).map(|(r, c)| diff[(r, c)]).collect();
    heatmap(&work.join("cka_diff.png"), &values, diff.nrows(), diff.ncols(), -0.5, 0.5, 12)?;
    let (mut best, mut at) = (0.0f64, (0, 0));
    for r in 0..diff.nrows() {
        for c in 0..diff.ncols() {
            if diff[(r, c)].abs() > best.abs() {
                best = diff[(r, c)];
                at = (r, c);
            }
        }
    }
    println!("largest change {best:+.3} between {} and {}", labels[at.0], labels[at.1]);
    Ok(())
}

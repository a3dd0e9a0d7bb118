use std::fs;
use std::path::Path;

use ads_unet::boosting::EnsembleMode;
use ads_unet::config::RunConfig;
use ads_unet::data::{generate_synthetic, Split, SyntheticSpec};
use ads_unet::error::Error;
use ads_unet::run::*;

fn tiny(root: &Path, out: &Path, depth: usize) -> RunConfig {
    let mut cfg = RunConfig::synthetic(root, out, 3);
    cfg.data.synthetic = Some(SyntheticSpec {
        seed: 3,
        classes: 3,
        tile_size: 16,
        max_depth: depth,
        train_tiles: 16,
        test_tiles: 4,
        ..Default::default()
    });
    cfg.model.max_depth = depth;
    cfg.model.base_filters = 4;
    cfg.train.epochs = 10;
    cfg.train.learning_rate = 1e-2;
    cfg.train.batch_size = 4;
    cfg
}

fn read(p: &Path) -> Vec<u8> {
    fs::read(p).unwrap()
}

#[test]
fn interrupted_run_resumes_to_the_same_artifacts() {
    let tmp = tempfile::tempdir().unwrap();
    let data = tmp.path().join("data");
    let a = tiny(&data, &tmp.path().join("a"), 2);
    let full = cmd_train(&a, &TrainOptions::default()).unwrap();
    assert_eq!(full.records.len(), 2);

    let b = RunConfig { output: tmp.path().join("b"), ..a.clone() };
    let first = cmd_train(&b, &TrainOptions { stop_after: Some(1), verbose: false }).unwrap();
    assert_eq!(first.records.len(), 1);
    let rest = cmd_train(&b, &TrainOptions::default()).unwrap();
    assert_eq!(rest.resumed_from, 1);

    for f in [ENSEMBLE_FILE, METRICS_FILE, BOOST_LOG_FILE, "stage2.bin", "stage2.toml", "eta_stage2.csv"] {
        assert_eq!(read(&a.output.join(f)), read(&b.output.join(f)), "{f} differs");
    }
    // config echo re-parses to the same value
    assert_eq!(load_run_config(&a.output).unwrap(), a);
    // a finished run is a no-op
    assert_eq!(cmd_train(&a, &TrainOptions::default()).unwrap().resumed_from, 2);
}

#[test]
fn run_directory_is_exclusive_and_bound_to_its_config() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = tiny(&tmp.path().join("data"), &tmp.path().join("run"), 1);
    let lock = RunLock::acquire(&cfg.output).unwrap();
    assert!(matches!(cmd_train(&cfg, &TrainOptions::default()), Err(Error::Locked(_))));
    drop(lock);
    cmd_train(&cfg, &TrainOptions::default()).unwrap();
    let mut other = cfg.clone();
    other.train.epochs = 2;
    assert!(matches!(cmd_train(&other, &TrainOptions::default()), Err(Error::Config(_))));
}

#[test]
fn eval_and_analysis_reports() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = tiny(&tmp.path().join("data"), &tmp.path().join("run"), 2);
    cmd_train(&cfg, &TrainOptions::default()).unwrap();
    let all = [EvalMode::PerLearner, EvalMode::Avg, EvalMode::Alpha];
    let report = cmd_eval(&cfg.output, None, Split::Test, &all).unwrap();
    let names: Vec<&str> = report.rows.iter().map(|r| r.model.as_str()).collect();
    assert_eq!(names, ["UNet^1", "UNet^2", "ens(avg)", "ens(alpha)"]);
    assert!(report.rows.iter().all(|r| (0.0..=1.0).contains(&r.miou) && (0.0..=1.0).contains(&r.pooled_miou)));
    assert!(report.table().lines().count() == 3);

    let out = tmp.path().join("analysis");
    let opts = AnalyzeOptions { samples: 4, ..AnalyzeOptions::new(&out) };
    let cka = cmd_analyze(Some(&cfg.output), None, AnalysisKind::Cka, &opts).unwrap();
    let (labels, m) = cka.cka.unwrap();
    assert_eq!(labels.len(), 3 + 5);
    assert!((0..m.nrows()).all(|k| m[(k, k)] == 1.0));
    assert!(out.join("cka.png").exists());

    let eta = cmd_analyze(Some(&cfg.output), None, AnalysisKind::EtaPlots, &opts).unwrap();
    assert_eq!(eta.eta_bands.len(), 2);
    assert!(eta.eta_bands.iter().all(|b| b.within(1e-9)), "{:?}", eta.eta_bands);

    let stats = cmd_analyze(None, Some(&cfg.data.root), AnalysisKind::MaskStats, &opts).unwrap();
    assert_eq!(stats.label_reports.len(), 2);
    assert!(out.join("mask_stats.csv").exists());

    fs::remove_file(cfg.output.join("eta_stage2.csv")).unwrap();
    match cmd_analyze(Some(&cfg.output), None, AnalysisKind::EtaPlots, &opts) {
        Err(e @ Error::MissingFile { .. }) => assert!(e.to_string().contains("eta_stage2.csv")),
        other => panic!("expected missing file, got {other:?}"),
    }
}

#[test]
fn singleton_manifest_and_class_mismatch() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = tiny(&tmp.path().join("data"), &tmp.path().join("run"), 1);
    cmd_train(&cfg, &TrainOptions::default()).unwrap();
    let ens = Ensemble::load(&cfg.output).unwrap();
    let report = cmd_eval(&cfg.output, None, Split::Test, &[EvalMode::PerLearner, EvalMode::Alpha, EvalMode::Avg]).unwrap();
    assert_eq!(report.rows[0].miou, report.row("ens(alpha)").unwrap().miou);
    assert_eq!(report.rows[0].pooled_miou, report.row("ens(avg)").unwrap().pooled_miou);
    assert_eq!(ens.manifest.weights(EnsembleMode::Avg), vec![1.0]);

    let other = tmp.path().join("four");
    generate_synthetic(&SyntheticSpec { classes: 4, tile_size: 16, train_tiles: 2, test_tiles: 2, ..Default::default() }, &other).unwrap();
    assert!(matches!(cmd_eval(&cfg.output, Some(&other), Split::Test, &[EvalMode::Alpha]), Err(Error::Dimension(_))));
}

//! Run directories: per-stage checkpoints and logs, resumable training,
//! ensemble loading, evaluation and analysis reports.

use std::collections::BTreeMap;
use std::fs::{self, File, OpenOptions};
use std::path::{Path, PathBuf};

use nalgebra::DMatrix;
use serde::{Deserialize, Serialize};

use crate::analysis::{
    cka_from_grams, collect_activations, incorrect_label_ratio, write_matrix_csv, LabelErrorReport, LayerGram,
    WindowPlacement,
};
use crate::boosting::{ensemble_combine, BoostState, EnsembleEntry, EnsembleManifest, EnsembleMode};
use crate::config::RunConfig;
use crate::data::{load_dataset, Dataset, DatasetManifest, Split};
use crate::error::{Error, Result};
use crate::model::params::TensorEntry;
use crate::model::{learner_blocks, supervised_blocks, ArchConfig, BlockId, NestedUNet, ParamStore};
use crate::plot::{heatmap, line_chart, palette, Series};
use crate::supervision::{argmax_labels, EtaMode, EtaWeights};
use crate::train::{predict_learner, pooled_miou, EpochLog, EtaSnapshot, EvalRow, StageReport, Trainer};
use crate::tensor::Tensor;

pub const CONFIG_FILE: &str = "config.toml";
pub const ENSEMBLE_FILE: &str = "manifest.toml";
pub const BOOST_LOG_FILE: &str = "boost_log.csv";
pub const METRICS_FILE: &str = "metrics.csv";
const LOCK_FILE: &str = ".lock";

pub fn checkpoint_name(depth: usize) -> String {
    format!("stage{depth}.bin")
}

pub fn sidecar_name(depth: usize) -> String {
    format!("stage{depth}.toml")
}

pub fn eta_log_name(depth: usize) -> String {
    format!("eta_stage{depth}.csv")
}

/// Everything known about one completed stage; stored next to its parameter blob.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StageRecord {
    pub depth: usize,
    pub dtype: String,
    pub seed: u64,
    pub filter_ladder: Vec<usize>,
    pub eta_mode: EtaMode,
    pub eta_raw: Vec<f64>,
    pub eta_tilde: Vec<f64>,
    pub error: f64,
    pub alpha: f64,
    pub accepted: bool,
    /// Mean training-set score of the learner.
    pub train_miou: f64,
    pub trainable_parameters: usize,
    pub max_eta_seen: f64,
    pub max_eta_tilde_seen: f64,
    pub min_eta_tilde_seen: f64,
    /// Extremes of the sample weights this learner was trained with.
    pub min_weight: f64,
    pub max_weight: f64,
    pub blob_bytes: usize,
    pub arch: ArchConfig,
    pub frozen: Vec<BlockId>,
    /// Boosting state after this stage.
    pub boost: BoostState,
    pub epochs: Vec<EpochLog>,
    pub eta_log: Vec<EtaSnapshot>,
    pub tensors: Vec<TensorEntry>,
}

impl StageRecord {
    fn from_report(report: &StageReport, net: &NestedUNet<f32>, boost: &BoostState, seed: u64, eta_mode: EtaMode) -> Self {
        let eta_raw = report.eta.last().map(|s| s.raw.clone()).unwrap_or_default();
        let eta_tilde = EtaWeights { raw_logits: eta_raw.clone(), mode: EtaMode::Bounded }.eta_tilde();
        let fold = |f: fn(f64, f64) -> f64, init| report.weights_used.iter().copied().fold(init, f);
        Self {
            depth: report.stage,
            dtype: "f32".into(),
            seed,
            filter_ladder: (0..=net.arch.max_depth).map(|l| net.channels(l)).collect(),
            eta_mode,
            eta_raw,
            eta_tilde,
            error: report.verdict.error,
            alpha: report.verdict.alpha,
            accepted: report.verdict.accepted,
            train_miou: report.scores.iter().sum::<f64>() / report.scores.len().max(1) as f64,
            trainable_parameters: report.trainable_parameters,
            max_eta_seen: report.max_eta_seen,
            max_eta_tilde_seen: report.max_eta_tilde_seen,
            min_eta_tilde_seen: report.min_eta_tilde_seen,
            min_weight: fold(f64::min, f64::INFINITY),
            max_weight: fold(f64::max, 0.0),
            blob_bytes: 0,
            arch: net.arch.clone(),
            frozen: net.frozen().iter().copied().collect(),
            boost: boost.clone(),
            epochs: report.epochs.clone(),
            eta_log: report.eta.clone(),
            tensors: Vec::new(),
        }
    }
}

fn write_atomic(path: &Path, bytes: &[u8]) -> Result<()> {
    let tmp = path.with_extension("tmp");
    fs::write(&tmp, bytes).map_err(|e| Error::io(&tmp, e))?;
    fs::rename(&tmp, path).map_err(|e| Error::io(path, e))
}

fn read_text(path: &Path, hint: &str) -> Result<String> {
    fs::read_to_string(path).map_err(|e| match e.kind() {
        std::io::ErrorKind::NotFound => Error::MissingFile { path: path.to_path_buf(), hint: hint.into() },
        _ => Error::io(path, e),
    })
}

/// Writes `stage{d}.bin` and then its sidecar; the sidecar marks the stage complete.
pub fn save_checkpoint(dir: &Path, record: &mut StageRecord, net: &NestedUNet<f32>) -> Result<()> {
    let (blob, index) = net.params.to_blob();
    record.blob_bytes = blob.len();
    record.tensors = index;
    write_atomic(&dir.join(checkpoint_name(record.depth)), &blob)?;
    let text = toml::to_string(record).map_err(|e| Error::Checkpoint(e.to_string()))?;
    write_atomic(&dir.join(sidecar_name(record.depth)), text.as_bytes())
}

pub fn load_record(dir: &Path, depth: usize) -> Result<StageRecord> {
    let path = dir.join(sidecar_name(depth));
    let text = read_text(&path, "stage sidecar written by `train`")?;
    let rec: StageRecord = toml::from_str(&text).map_err(|e| Error::Parse { path: path.clone(), message: e.to_string() })?;
    if rec.depth != depth || rec.dtype != "f32" {
        return Err(Error::Checkpoint(format!("{} describes depth {} ({}), expected {depth} (f32)", path.display(), rec.depth, rec.dtype)));
    }
    Ok(rec)
}

/// Restores the grid as it was at the end of stage `depth`.
pub fn load_checkpoint(dir: &Path, depth: usize) -> Result<(StageRecord, NestedUNet<f32>)> {
    let rec = load_record(dir, depth)?;
    let path = dir.join(checkpoint_name(depth));
    let blob = fs::read(&path).map_err(|e| match e.kind() {
        std::io::ErrorKind::NotFound => Error::MissingFile { path: path.clone(), hint: "parameter blob written by `train`".into() },
        _ => Error::io(&path, e),
    })?;
    if blob.len() != rec.blob_bytes {
        return Err(Error::Checkpoint(format!("{} has {} bytes, sidecar expects {}", path.display(), blob.len(), rec.blob_bytes)));
    }
    let params = ParamStore::from_blob(&blob, &rec.tensors)?;
    let net = NestedUNet::from_parts(rec.arch.clone(), params, rec.frozen.iter().copied().collect());
    Ok((rec, net))
}

/// Exclusive ownership of a run directory for the lifetime of the value.
pub struct RunLock {
    _file: File,
}

impl RunLock {
    pub fn acquire(dir: &Path) -> Result<Self> {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        let path = dir.join(LOCK_FILE);
        let file = OpenOptions::new().create(true).truncate(false).write(true).open(&path).map_err(|e| Error::io(&path, e))?;
        match file.try_lock() {
            Ok(()) => Ok(Self { _file: file }),
            Err(fs::TryLockError::WouldBlock) => Err(Error::Locked(dir.to_path_buf())),
            Err(fs::TryLockError::Error(e)) => Err(Error::io(&path, e)),
        }
    }
}

fn write_csv(path: &Path, header: &[&str], rows: impl IntoIterator<Item = Vec<String>>) -> Result<()> {
    let mut w = csv::Writer::from_path(path)?;
    w.write_record(header)?;
    for r in rows {
        w.write_record(&r)?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}

fn write_eta_log(dir: &Path, rec: &StageRecord) -> Result<()> {
    let blocks = supervised_blocks(rec.depth);
    let rows = rec.eta_log.iter().flat_map(|snap| {
        let w = EtaWeights { raw_logits: snap.raw.clone(), mode: EtaMode::Bounded };
        let (eta, tilde) = (w.eta(), w.eta_tilde());
        blocks
            .iter()
            .enumerate()
            .map(move |(k, id)| vec![snap.epoch.to_string(), id.level.to_string(), id.column.to_string(), eta[k].to_string(), tilde[k].to_string()])
            .collect::<Vec<_>>()
    });
    write_csv(&dir.join(eta_log_name(rec.depth)), &["epoch", "block_i", "block_j", "eta", "eta_tilde"], rows)
}

/// Rewrites the boost log, the metrics table and the ensemble manifest from the sidecars.
fn write_run_logs(dir: &Path, records: &[StageRecord]) -> Result<()> {
    let boost_rows = records.iter().flat_map(|r| {
        r.epochs.iter().map(move |e| {
            vec![
                r.depth.to_string(),
                e.epoch.to_string(),
                e.train_loss.to_string(),
                r.error.to_string(),
                r.alpha.to_string(),
                r.min_weight.to_string(),
                r.max_weight.to_string(),
            ]
        })
    });
    write_csv(
        &dir.join(BOOST_LOG_FILE),
        &["stage", "epoch", "train_loss", "epsilon", "alpha", "min_weight", "max_weight"],
        boost_rows,
    )?;
    let metric_rows = records.iter().map(|r| {
        vec![
            r.depth.to_string(),
            r.accepted.to_string(),
            r.error.to_string(),
            r.alpha.to_string(),
            r.train_miou.to_string(),
            r.epochs.last().map_or(String::new(), |e| e.train_loss.to_string()),
            r.max_eta_seen.to_string(),
            r.max_eta_tilde_seen.to_string(),
            r.min_eta_tilde_seen.to_string(),
            r.trainable_parameters.to_string(),
        ]
    });
    write_csv(
        &dir.join(METRICS_FILE),
        &[
            "stage",
            "accepted",
            "epsilon",
            "alpha",
            "train_miou",
            "final_train_loss",
            "max_eta",
            "max_eta_tilde",
            "min_eta_tilde",
            "trainable_parameters",
        ],
        metric_rows,
    )?;
    let manifest = manifest_from_records(records)?;
    write_atomic(&dir.join(ENSEMBLE_FILE), manifest.to_toml()?.as_bytes())
}

fn manifest_from_records(records: &[StageRecord]) -> Result<EnsembleManifest> {
    let first = records.first().ok_or_else(|| Error::Stage("no completed stage".into()))?;
    Ok(EnsembleManifest {
        classes: first.arch.classes,
        filter_ladder: first.filter_ladder.clone(),
        seed: first.seed,
        eta_mode: first.eta_mode,
        entries: records
            .iter()
            .map(|r| EnsembleEntry {
                depth: r.depth,
                checkpoint: checkpoint_name(r.depth),
                eta_tilde: r.eta_tilde.clone(),
                alpha: r.alpha,
            })
            .collect(),
    })
}

/// Reads `config.toml` of a run directory.
pub fn load_run_config(dir: &Path) -> Result<RunConfig> {
    let path = dir.join(CONFIG_FILE);
    let text = read_text(&path, "not a run directory created by `train`")?;
    RunConfig::from_toml(&text, &path)
}

#[derive(Debug, Clone, Default)]
pub struct TrainOptions {
    /// Stop (resumably) after this stage.
    pub stop_after: Option<usize>,
    /// Progress lines on stderr.
    pub verbose: bool,
}

#[derive(Debug, Clone)]
pub struct TrainSummary {
    pub run_dir: PathBuf,
    /// Stages found complete on disk before this call.
    pub resumed_from: usize,
    pub records: Vec<StageRecord>,
    pub manifest: EnsembleManifest,
}

/// Runs (or resumes) the stage loop described by `cfg`.
pub fn cmd_train(cfg: &RunConfig, opts: &TrainOptions) -> Result<TrainSummary> {
    cfg.validate()?;
    let dir = cfg.output.clone();
    let _lock = RunLock::acquire(&dir)?;
    let cfg_path = dir.join(CONFIG_FILE);
    if cfg_path.exists() {
        let existing = load_run_config(&dir)?;
        if &existing != cfg {
            return Err(Error::Config(vec![format!(
                "{} holds a different configuration; choose a new output directory to start a fresh run",
                dir.display()
            )]));
        }
    } else {
        write_atomic(&cfg_path, cfg.to_toml()?.as_bytes())?;
    }

    let data_manifest = cfg.prepare_data()?;
    let train = load_dataset(&cfg.data.root, &data_manifest, Split::Train)?;
    let arch = cfg.model.arch(data_manifest.channels, data_manifest.classes);
    let total = cfg.model.max_depth;

    let mut done = 0;
    while done < total && dir.join(sidecar_name(done + 1)).exists() {
        done += 1;
    }
    let mut records = (1..=done).map(|d| load_record(&dir, d)).collect::<Result<Vec<_>>>()?;
    let mut trainer = if done > 0 {
        let (rec, net) = load_checkpoint(&dir, done)?;
        if rec.arch != arch || rec.seed != cfg.seed {
            return Err(Error::Checkpoint(format!("stage {done} checkpoint does not match the configured model")));
        }
        Trainer::resume(net, rec.boost, &train, cfg.train.clone(), cfg.seed)?
    } else {
        Trainer::new(NestedUNet::new(arch), &train, cfg.train.clone(), cfg.seed)?
    };

    let last = opts.stop_after.map_or(total, |s| s.min(total));
    for depth in done + 1..=last {
        let report = trainer.train_stage(depth)?;
        let mut rec = StageRecord::from_report(&report, &trainer.net, &trainer.boost, cfg.seed, cfg.train.eta_mode);
        save_checkpoint(&dir, &mut rec, &trainer.net)?;
        if trainer.net.arch.deep_supervision {
            write_eta_log(&dir, &rec)?;
        }
        if opts.verbose {
            eprintln!(
                "stage {depth}: loss {:.4} train mIoU {:.4} eps {:.4} alpha {:.4}{}",
                rec.epochs.last().map_or(f64::NAN, |e| e.train_loss),
                rec.train_miou,
                rec.error,
                rec.alpha,
                if rec.accepted { "" } else { " (discarded)" }
            );
        }
        records.push(rec);
        write_run_logs(&dir, &records)?;
    }
    let manifest = manifest_from_records(&records)?;
    Ok(TrainSummary { run_dir: dir, resumed_from: done, records, manifest })
}

/// A trained ensemble: one grid snapshot per learner.
pub struct Ensemble {
    pub manifest: EnsembleManifest,
    pub learners: Vec<NestedUNet<f32>>,
}

impl Ensemble {
    pub fn load(run_dir: &Path) -> Result<Self> {
        let path = run_dir.join(ENSEMBLE_FILE);
        let manifest = EnsembleManifest::from_toml(&read_text(&path, "written by `train` after the first stage")?)?;
        manifest.validate()?;
        let learners = manifest
            .entries
            .iter()
            .map(|e| {
                let (rec, net) = load_checkpoint(run_dir, e.depth)?;
                if e.checkpoint != checkpoint_name(e.depth) || rec.alpha != e.alpha {
                    return Err(Error::Checkpoint(format!("manifest entry {} disagrees with its sidecar", e.depth)));
                }
                Ok(net)
            })
            .collect::<Result<_>>()?;
        Ok(Self { manifest, learners })
    }

    pub fn classes(&self) -> usize {
        self.manifest.classes
    }

    /// Probability maps `[N, C, H, W]` of learner `depth`.
    pub fn predict_learner(&self, depth: usize, images: &Tensor<f32>) -> Result<Tensor<f32>> {
        let net = self
            .learners
            .get(depth.wrapping_sub(1))
            .ok_or_else(|| Error::InvalidArgument(format!("no learner of depth {depth}")))?;
        predict_learner(net, depth, self.manifest.eta_mode, images)
    }

    /// Ensemble probability and label map of every image in `images` (`[N, ch, H, W]`).
    pub fn predict(&self, images: &Tensor<f32>, mode: EnsembleMode) -> Result<Vec<(Tensor<f32>, Vec<u8>)>> {
        let weights = self.manifest.weights(mode);
        let mut maps = Vec::new();
        for (k, w) in weights.iter().enumerate() {
            if *w > 0.0 {
                maps.push((*w, self.predict_learner(k + 1, images)?));
            }
        }
        (0..images.shape()[0])
            .map(|n| {
                let per: Vec<Tensor<f32>> = maps.iter().map(|(_, m)| m.index0(n)).collect();
                let items: Vec<(f64, &Tensor<f32>)> = maps.iter().zip(&per).map(|((w, _), t)| (*w, t)).collect();
                ensemble_combine(&items)
            })
            .collect()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum EvalMode {
    PerLearner,
    Alpha,
    Avg,
}

#[derive(Debug, Clone, PartialEq)]
pub struct EvalReport {
    pub rows: Vec<EvalRow>,
}

impl EvalReport {
    pub fn row(&self, model: &str) -> Option<&EvalRow> {
        self.rows.iter().find(|r| r.model == model)
    }

    pub fn write_csv(&self, path: &Path) -> Result<()> {
        let rows = self.rows.iter().map(|r| vec![r.model.clone(), r.miou.to_string(), r.pooled_miou.to_string()]);
        write_csv(path, &["model", "miou", "pooled_miou"], rows)
    }

    /// One column per model, rows for dataset-level and mean per-image mIoU (percent).
    pub fn table(&self) -> String {
        let width = self.rows.iter().map(|r| r.model.len()).max().unwrap_or(0).max(8);
        let mut out = format!("{:<10}", "");
        for r in &self.rows {
            out += &format!(" {:>width$}", r.model);
        }
        for (label, f) in [("pooled", (|r: &EvalRow| r.pooled_miou) as fn(&EvalRow) -> f64), ("per-image", |r: &EvalRow| r.miou)] {
            out += &format!("\n{label:<10}");
            for r in &self.rows {
                out += &format!(" {:>width$.2}", 100.0 * f(r));
            }
        }
        out
    }
}

pub fn learner_label(depth: usize) -> String {
    format!("UNet^{depth}")
}

pub fn ensemble_label(mode: EnsembleMode) -> &'static str {
    match mode {
        EnsembleMode::Alpha => "ens(alpha)",
        EnsembleMode::Avg => "ens(avg)",
    }
}

fn score_labels(labels: &[Vec<u8>], data: &Dataset, model: String) -> Result<EvalRow> {
    let targets = data.label_maps();
    let per: Vec<f64> = labels
        .iter()
        .zip(&targets)
        .map(|(p, t)| crate::boosting::miou_labels(p, t, data.classes))
        .collect::<Result<_>>()?;
    Ok(EvalRow {
        model,
        miou: per.iter().sum::<f64>() / per.len().max(1) as f64,
        pooled_miou: pooled_miou(labels, &targets, data.classes),
    })
}

/// Scores each learner and both ensemble modes on `data`.
pub fn evaluate(ensemble: &Ensemble, data: &Dataset, modes: &[EvalMode], batch: usize) -> Result<EvalReport> {
    if data.classes != ensemble.classes() {
        return Err(Error::Dimension(format!(
            "ensemble predicts {} classes, dataset has {}",
            ensemble.classes(),
            data.classes
        )));
    }
    let idx: Vec<usize> = (0..data.len()).collect();
    let mut maps: BTreeMap<usize, Vec<Tensor<f32>>> = BTreeMap::new();
    for chunk in idx.chunks(batch.max(1)) {
        let (images, _) = data.batch(chunk, None)?;
        for d in 1..=ensemble.learners.len() {
            let probs = ensemble.predict_learner(d, &images)?;
            maps.entry(d).or_default().extend((0..chunk.len()).map(|k| probs.index0(k)));
        }
    }
    let mut rows = Vec::new();
    if modes.contains(&EvalMode::PerLearner) {
        for (d, m) in &maps {
            let labels: Vec<Vec<u8>> = m.iter().map(argmax_labels).collect();
            rows.push(score_labels(&labels, data, learner_label(*d))?);
        }
    }
    for (mode, ens) in [(EvalMode::Avg, EnsembleMode::Avg), (EvalMode::Alpha, EnsembleMode::Alpha)] {
        if modes.contains(&mode) {
            let labels = crate::train::ensemble_labels(&maps, &ensemble.manifest.weights(ens))?;
            rows.push(score_labels(&labels, data, ensemble_label(ens).into())?);
        }
    }
    Ok(EvalReport { rows })
}

/// Dataset of a run: `data_root` if given, else the one named in the run's config.
fn run_dataset(run_dir: Option<&Path>, data_root: Option<&Path>, split: Split) -> Result<(PathBuf, DatasetManifest, Dataset)> {
    let root = match (data_root, run_dir) {
        (Some(r), _) => r.to_path_buf(),
        (None, Some(run)) => load_run_config(run)?.data.root,
        (None, None) => return Err(Error::InvalidArgument("a dataset root or a run directory is required".into())),
    };
    let manifest = DatasetManifest::load(&root)?;
    let data = load_dataset(&root, &manifest, split)?;
    Ok((root, manifest, data))
}

/// Evaluates a completed run on `split` of its dataset (or `data_root`).
pub fn cmd_eval(run_dir: &Path, data_root: Option<&Path>, split: Split, modes: &[EvalMode]) -> Result<EvalReport> {
    let ensemble = Ensemble::load(run_dir)?;
    let (_, _, data) = run_dataset(Some(run_dir), data_root, split)?;
    evaluate(&ensemble, &data, modes, 16)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AnalysisKind {
    Cka,
    MaskStats,
    EtaPlots,
}

#[derive(Debug, Clone)]
pub struct AnalyzeOptions {
    pub out: PathBuf,
    pub split: Split,
    /// Images used for similarity analysis.
    pub samples: usize,
    /// Pooling factors for mask statistics.
    pub factors: Vec<usize>,
}

impl AnalyzeOptions {
    pub fn new(out: impl Into<PathBuf>) -> Self {
        Self { out: out.into(), split: Split::Test, samples: 32, factors: vec![2, 4, 8, 16] }
    }
}

/// Observed range of the logged block weights of one stage.
#[derive(Debug, Clone, PartialEq)]
pub struct EtaBand {
    pub depth: usize,
    pub mode: EtaMode,
    pub min: f64,
    pub max: f64,
    /// Theoretical range of the plotted quantity (`[0, 1]` when unconstrained).
    pub lower: f64,
    pub upper: f64,
}

impl EtaBand {
    pub fn within(&self, tol: f64) -> bool {
        self.min >= self.lower - tol && self.max <= self.upper + tol
    }
}

#[derive(Debug, Clone, Default)]
pub struct AnalysisOutput {
    pub files: Vec<PathBuf>,
    pub cka: Option<(Vec<String>, DMatrix<f64>)>,
    pub label_reports: Vec<LabelErrorReport>,
    pub eta_bands: Vec<EtaBand>,
}

/// Writes the requested report files into `opts.out`.
pub fn cmd_analyze(run_dir: Option<&Path>, data_root: Option<&Path>, what: AnalysisKind, opts: &AnalyzeOptions) -> Result<AnalysisOutput> {
    fs::create_dir_all(&opts.out).map_err(|e| Error::io(&opts.out, e))?;
    let need_run = || run_dir.ok_or_else(|| Error::InvalidArgument(format!("{what:?} needs a run directory")));
    match what {
        AnalysisKind::MaskStats => mask_stats(run_dir, data_root, opts),
        AnalysisKind::Cka => cka_report(need_run()?, data_root, opts),
        AnalysisKind::EtaPlots => eta_plots(need_run()?, opts),
    }
}

fn mask_stats(run_dir: Option<&Path>, data_root: Option<&Path>, opts: &AnalyzeOptions) -> Result<AnalysisOutput> {
    let (_, manifest, data) = run_dataset(run_dir, data_root, opts.split)?;
    let t = manifest.tile_size;
    let factors: Vec<usize> = opts.factors.iter().copied().filter(|f| *f > 0 && t % f == 0).collect();
    let masks = data.label_maps();
    let mut out = AnalysisOutput::default();
    let mut rows = Vec::new();
    for placement in [WindowPlacement::Tiled, WindowPlacement::UnitStride] {
        let r = incorrect_label_ratio(&masks, t, t, &factors, placement)?;
        let name = match placement {
            WindowPlacement::Tiled => "tiled",
            WindowPlacement::UnitStride => "unit_stride",
        };
        rows.extend(r.factors.iter().map(|f| {
            vec![name.to_string(), f.factor.to_string(), f.mixed_windows.to_string(), f.windows.to_string(), f.ratio.to_string()]
        }));
        out.label_reports.push(r);
    }
    let path = opts.out.join("mask_stats.csv");
    write_csv(&path, &["placement", "factor", "mixed_windows", "windows", "ratio"], rows)?;
    out.files.push(path);
    Ok(out)
}

fn cka_report(run_dir: &Path, data_root: Option<&Path>, opts: &AnalyzeOptions) -> Result<AnalysisOutput> {
    let ensemble = Ensemble::load(run_dir)?;
    let (_, _, data) = run_dataset(Some(run_dir), data_root, opts.split)?;
    let n = opts.samples.min(data.len());
    if n < 2 {
        return Err(Error::InvalidArgument(format!("similarity needs at least 2 images, have {n}")));
    }
    let idx: Vec<usize> = (0..n).collect();
    let (images, _) = data.batch(&idx, None)?;
    let mut grams = Vec::new();
    for (k, net) in ensemble.learners.iter().enumerate() {
        let depth = k + 1;
        for s in collect_activations(net, depth, &images, &learner_blocks(depth))? {
            grams.push(LayerGram::new(&s)?);
        }
    }
    let m = cka_from_grams(&grams)?;
    let labels: Vec<String> = grams.iter().map(|g| g.layer.clone()).collect();
    let csv_path = opts.out.join("cka.csv");
    write_matrix_csv(&csv_path, &labels, &m)?;
    let png = opts.out.join("cka.png");
    let values: Vec<f64> = (0..m.nrows()).flat_map(|r| (0..m.ncols()).map(move |c| (r, c))).map(|(r, c)| m[(r, c)]).collect();
    heatmap(&png, &values, m.nrows(), m.ncols(), 0.0, 1.0, 12)?;
    Ok(AnalysisOutput { files: vec![csv_path, png], cka: Some((labels, m)), ..Default::default() })
}

#[derive(Deserialize)]
struct EtaRow {
    epoch: usize,
    block_i: usize,
    block_j: usize,
    eta: f64,
    eta_tilde: f64,
}

fn eta_plots(run_dir: &Path, opts: &AnalyzeOptions) -> Result<AnalysisOutput> {
    let cfg = load_run_config(run_dir)?;
    let mode = cfg.train.eta_mode;
    let mut out = AnalysisOutput::default();
    let mut summary = Vec::new();
    for depth in 1..=cfg.model.max_depth {
        let path = run_dir.join(eta_log_name(depth));
        if !path.exists() {
            let hint = if cfg.model.deep_supervision {
                format!("written by `train` when stage {depth} completes")
            } else {
                "runs without deep supervision log no block weights".into()
            };
            return Err(Error::MissingFile { path, hint });
        }
        let mut series: BTreeMap<(usize, usize), Vec<(f64, f64)>> = BTreeMap::new();
        let mut rdr = csv::Reader::from_path(&path)?;
        for row in rdr.deserialize() {
            let r: EtaRow = row?;
            let v = if mode.is_bounded() { r.eta_tilde } else { r.eta };
            series.entry((r.block_i, r.block_j)).or_default().push((r.epoch as f64, v));
        }
        let (lower, upper) = if mode.is_bounded() { EtaWeights::tilde_bounds(depth) } else { (0.0, 1.0) };
        let values = series.values().flatten().map(|p| p.1);
        let band = EtaBand {
            depth,
            mode,
            min: values.clone().fold(f64::INFINITY, f64::min),
            max: values.fold(f64::NEG_INFINITY, f64::max),
            lower,
            upper,
        };
        let epochs = series.values().flatten().map(|p| p.0).fold(1.0, f64::max);
        let lines: Vec<Series> =
            series.into_values().enumerate().map(|(k, points)| Series { points, color: palette(k) }).collect();
        let png = opts.out.join(format!("eta_stage{depth}.png"));
        let guides: Vec<f64> = if mode.is_bounded() { vec![lower, upper] } else { Vec::new() };
        line_chart(&png, &lines, (0.0, epochs), (0.0, 1.0), &guides, (480, 320))?;
        out.files.push(png);
        summary.push(vec![
            depth.to_string(),
            band.min.to_string(),
            band.max.to_string(),
            band.lower.to_string(),
            band.upper.to_string(),
            band.within(1e-9).to_string(),
        ]);
        out.eta_bands.push(band);
    }
    let path = opts.out.join("eta_summary.csv");
    write_csv(&path, &["stage", "min", "max", "lower_bound", "upper_bound", "within_bounds"], summary)?;
    out.files.push(path);
    Ok(out)
}

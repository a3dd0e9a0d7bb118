use std::path::PathBuf;
use std::process::ExitCode;

use ads_unet::boosting::EnsembleMode;
use ads_unet::config::RunConfig;
use ads_unet::data::{generate_synthetic, DatasetManifest, Split, SyntheticSpec};
use ads_unet::error::{Error, Result};
use ads_unet::run::{cmd_analyze, cmd_eval, cmd_train, AnalysisKind, AnalyzeOptions, EvalMode, TrainOptions};
use ads_unet::supervision::EtaMode;
use clap::{Args, Parser, Subcommand, ValueEnum};

#[derive(Parser)]
#[command(name = "ads-unet", version, about = "Stage-wise boosted nested UNet ensembles")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate the synthetic texture dataset, or index an existing image/mask directory.
    GenData(GenData),
    /// Train (or resume) a run.
    Train(Train),
    /// Score every learner and both ensemble modes.
    Eval(Eval),
    /// Similarity matrices, mask statistics or block-weight plots.
    Analyze(Analyze),
}

#[derive(Args)]
struct GenData {
    #[arg(long)]
    out: PathBuf,
    /// Index `out/{train,test}/{images,masks}` instead of generating.
    #[arg(long)]
    scan: bool,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long, default_value_t = 4)]
    classes: usize,
    /// Image channels when scanning (1 or 3).
    #[arg(long, default_value_t = 3)]
    channels: usize,
    #[arg(long, default_value_t = 64)]
    tile_size: usize,
    /// Tiling stride when scanning (defaults to the tile size).
    #[arg(long)]
    stride: Option<usize>,
    #[arg(long, default_value_t = 4)]
    max_depth: usize,
    #[arg(long, default_value_t = 2)]
    cells_per_class: usize,
    #[arg(long, default_value_t = 0.15)]
    noise: f64,
    #[arg(long, default_value_t = 0.1)]
    tint: f64,
    #[arg(long, default_value_t = 64)]
    train_tiles: usize,
    #[arg(long, default_value_t = 16)]
    test_tiles: usize,
}

#[derive(Clone, Copy, ValueEnum)]
enum EtaArg {
    Unconstrained,
    Bounded,
    BoundedSum,
}

#[derive(Clone, Copy, ValueEnum)]
enum EnsembleArg {
    Alpha,
    Avg,
}

#[derive(Args)]
struct Train {
    /// Run configuration file; flags below override its values.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Dataset root (generated synthetically if it has no manifest).
    #[arg(long)]
    data: Option<PathBuf>,
    #[arg(long)]
    output: Option<PathBuf>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    max_depth: Option<usize>,
    #[arg(long)]
    base_filters: Option<usize>,
    #[arg(long)]
    epochs: Option<usize>,
    #[arg(long)]
    batch_size: Option<usize>,
    #[arg(long)]
    learning_rate: Option<f64>,
    #[arg(long)]
    eta_lr_scale: Option<f64>,
    #[arg(long, value_enum)]
    eta_mode: Option<EtaArg>,
    #[arg(long, value_enum)]
    ensemble: Option<EnsembleArg>,
    #[arg(long)]
    no_deep_supervision: bool,
    #[arg(long)]
    no_scse: bool,
    #[arg(long)]
    no_reweighting: bool,
    /// Stop after this stage; rerun the same command to resume.
    #[arg(long)]
    stop_after: Option<usize>,
    /// Validate and print the effective configuration without training.
    #[arg(long)]
    dry_run: bool,
}

#[derive(Clone, Copy, ValueEnum)]
enum SplitArg {
    Train,
    Test,
}

impl From<SplitArg> for Split {
    fn from(s: SplitArg) -> Self {
        match s {
            SplitArg::Train => Split::Train,
            SplitArg::Test => Split::Test,
        }
    }
}

#[derive(Clone, Copy, PartialEq, ValueEnum)]
enum EvalArg {
    PerLearner,
    Alpha,
    Avg,
}

#[derive(Args)]
struct Eval {
    #[arg(long)]
    run: PathBuf,
    /// Dataset root (defaults to the run's dataset).
    #[arg(long)]
    data: Option<PathBuf>,
    #[arg(long, value_enum, default_value = "test")]
    split: SplitArg,
    /// Rows to report (repeatable; all by default).
    #[arg(long, value_enum)]
    mode: Vec<EvalArg>,
    /// Also write the report as CSV.
    #[arg(long)]
    csv: Option<PathBuf>,
}

#[derive(Clone, Copy, ValueEnum)]
enum WhatArg {
    Cka,
    MaskStats,
    EtaPlots,
}

#[derive(Args)]
struct Analyze {
    #[arg(long, value_enum)]
    what: WhatArg,
    #[arg(long)]
    run: Option<PathBuf>,
    #[arg(long)]
    data: Option<PathBuf>,
    /// Output directory (defaults to `<run>/analysis`, or `analysis`).
    #[arg(long)]
    out: Option<PathBuf>,
    #[arg(long, value_enum, default_value = "test")]
    split: SplitArg,
    /// Images used for similarity analysis.
    #[arg(long, default_value_t = 32)]
    samples: usize,
    #[arg(long, value_delimiter = ',', default_value = "2,4,8,16")]
    factors: Vec<usize>,
}

fn gen_data(a: GenData) -> Result<()> {
    let manifest = if a.scan {
        DatasetManifest::scan(&a.out, a.classes, a.channels, a.tile_size, a.stride.unwrap_or(a.tile_size))?
    } else {
        let spec = SyntheticSpec {
            seed: a.seed,
            classes: a.classes,
            tile_size: a.tile_size,
            max_depth: a.max_depth,
            cells_per_class: a.cells_per_class,
            noise: a.noise,
            tint: a.tint,
            train_tiles: a.train_tiles,
            test_tiles: a.test_tiles,
        };
        generate_synthetic(&spec, &a.out)?
    };
    println!("{}: {} train / {} test pairs", a.out.display(), manifest.train.len(), manifest.test.len());
    Ok(())
}

fn train_config(a: &Train) -> Result<RunConfig> {
    let mut cfg = match &a.config {
        Some(path) => {
            let text = std::fs::read_to_string(path).map_err(|e| Error::Io { path: path.clone(), source: e })?;
            RunConfig::from_toml(&text, path)?
        }
        None => {
            let (Some(data), Some(output)) = (&a.data, &a.output) else {
                return Err(Error::InvalidArgument("without --config both --data and --output are required".into()));
            };
            RunConfig::synthetic(data, output, a.seed.unwrap_or(0))
        }
    };
    if let Some(v) = &a.data {
        cfg.data.root = v.clone();
    }
    if let Some(v) = &a.output {
        cfg.output = v.clone();
    }
    if let Some(v) = a.seed {
        cfg.seed = v;
    }
    if let Some(v) = a.max_depth {
        cfg.model.max_depth = v;
        if let Some(s) = cfg.data.synthetic.as_mut() {
            s.max_depth = v;
        }
    }
    if let Some(v) = a.base_filters {
        cfg.model.base_filters = v;
    }
    if let Some(v) = a.epochs {
        cfg.train.epochs = v;
    }
    if let Some(v) = a.batch_size {
        cfg.train.batch_size = v;
    }
    if let Some(v) = a.learning_rate {
        cfg.train.learning_rate = v;
    }
    if let Some(v) = a.eta_lr_scale {
        cfg.train.eta_lr_scale = v;
    }
    if let Some(v) = a.eta_mode {
        cfg.train.eta_mode = match v {
            EtaArg::Unconstrained => EtaMode::Unconstrained,
            EtaArg::Bounded => EtaMode::Bounded,
            EtaArg::BoundedSum => EtaMode::BoundedSum,
        };
    }
    if let Some(v) = a.ensemble {
        cfg.ensemble.mode = match v {
            EnsembleArg::Alpha => EnsembleMode::Alpha,
            EnsembleArg::Avg => EnsembleMode::Avg,
        };
    }
    cfg.model.deep_supervision &= !a.no_deep_supervision;
    cfg.model.scse &= !a.no_scse;
    cfg.train.reweighting &= !a.no_reweighting;
    Ok(cfg)
}

fn train(a: Train) -> Result<()> {
    let cfg = train_config(&a)?;
    cfg.validate()?;
    if a.dry_run {
        print!("{}", cfg.to_toml()?);
        return Ok(());
    }
    let summary = cmd_train(&cfg, &TrainOptions { stop_after: a.stop_after, verbose: true })?;
    println!(
        "{}: {} of {} stages complete ({} resumed)",
        summary.run_dir.display(),
        summary.records.len(),
        cfg.model.max_depth,
        summary.resumed_from
    );
    Ok(())
}

fn eval(a: Eval) -> Result<()> {
    let mut modes: Vec<EvalMode> = a
        .mode
        .iter()
        .map(|m| match m {
            EvalArg::PerLearner => EvalMode::PerLearner,
            EvalArg::Alpha => EvalMode::Alpha,
            EvalArg::Avg => EvalMode::Avg,
        })
        .collect();
    if modes.is_empty() {
        modes = vec![EvalMode::PerLearner, EvalMode::Avg, EvalMode::Alpha];
    }
    let report = cmd_eval(&a.run, a.data.as_deref(), a.split.into(), &modes)?;
    println!("{}", report.table());
    if let Some(path) = a.csv {
        report.write_csv(&path)?;
    }
    Ok(())
}

fn analyze(a: Analyze) -> Result<()> {
    let out = a.out.unwrap_or_else(|| a.run.as_ref().map_or_else(|| PathBuf::from("analysis"), |r| r.join("analysis")));
    let opts = AnalyzeOptions { out, split: a.split.into(), samples: a.samples, factors: a.factors };
    let what = match a.what {
        WhatArg::Cka => AnalysisKind::Cka,
        WhatArg::MaskStats => AnalysisKind::MaskStats,
        WhatArg::EtaPlots => AnalysisKind::EtaPlots,
    };
    let result = cmd_analyze(a.run.as_deref(), a.data.as_deref(), what, &opts)?;
    for r in &result.label_reports {
        for f in &r.factors {
            println!("{:?} factor {:>2}: {:.4} ({} of {} windows)", r.placement, f.factor, f.ratio, f.mixed_windows, f.windows);
        }
    }
    for b in &result.eta_bands {
        println!("stage {}: weights in [{:.4}, {:.4}], bounds [{:.4}, {:.4}]", b.depth, b.min, b.max, b.lower, b.upper);
    }
    for f in &result.files {
        println!("wrote {}", f.display());
    }
    Ok(())
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let result = match cli.command {
        Command::GenData(a) => gen_data(a),
        Command::Train(a) => train(a),
        Command::Eval(a) => eval(a),
        Command::Analyze(a) => analyze(a),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            let record = serde_json::json!({ "error": e.kind(), "message": e.to_string() });
            eprintln!("{record}");
            ExitCode::FAILURE
        }
    }
}

use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand};
use dmtlr_core::datagen::{generate_dataset, Regime, DEFAULT_GRID, MANIFEST_FILE, TARGET_NAMES};
use dmtlr_core::dmtlr::{ModelKind, TrainConfig};
use dmtlr_core::featurizer::{build_backbone, pretrain_backbone, BackboneSpec, PretrainConfig, PretrainedBackbone};
use dmtlr_core::harness::{render_plots, run_experiment, run_single, ExperimentConfig, METRICS_FILE};
use dmtlr_core::pipeline::{load_dataset, TargetSelection};
use serde_json::json;

#[derive(Parser, Debug)]
#[command(name = "dmtlr", version, about = "Multimodal transfer-learned regression on synthetic microstructures")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Simulate a dataset of microstructure images with descriptors and targets.
    Generate(GenerateArgs),
    /// Pretrain the convolutional backbone on a source-regime dataset and save it frozen.
    Pretrain(PretrainArgs),
    /// Train one model on one split and save it.
    Train(TrainArgs),
    /// Run every model kind over several independent trials and write reports.
    Experiment(ExperimentArgs),
    /// Re-render plots from the CSVs of a finished experiment.
    Report(ReportArgs),
}

#[derive(Args, Debug)]
struct GenerateArgs {
    #[arg(long, default_value_t = 900)]
    count: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long, default_value = "target", value_parser = parse_regime)]
    regime: Regime,
    /// Simulation grid edge; must be a power of two.
    #[arg(long, default_value_t = DEFAULT_GRID)]
    grid: usize,
    #[arg(long, short, default_value = "data")]
    output: PathBuf,
}

#[derive(Args, Debug)]
struct PretrainArgs {
    /// Source-regime dataset directory or manifest.
    #[arg(long)]
    source: PathBuf,
    #[arg(long, short, default_value = "backbone.ckpt")]
    output: PathBuf,
    #[arg(long, default_value_t = PretrainConfig::default().epochs)]
    epochs: usize,
    #[arg(long, default_value_t = PretrainConfig::default().lr)]
    lr: f64,
    #[arg(long, default_value_t = PretrainConfig::default().batch_size)]
    batch_size: usize,
    /// Seeds both the backbone initialisation and pretraining.
    #[arg(long, default_value_t = 0)]
    seed: u64,
}

#[derive(Args, Debug)]
struct TrainFlags {
    #[arg(long, default_value_t = TrainConfig::default().epochs)]
    epochs: usize,
    #[arg(long, default_value_t = TrainConfig::default().batch_size)]
    batch_size: usize,
    #[arg(long, default_value_t = TrainConfig::default().lr)]
    lr: f64,
    #[arg(long, default_value_t = TrainConfig::default().lr_decay)]
    lr_decay: f64,
    /// Accept a learning rate outside [1e-4, 1e-3].
    #[arg(long)]
    allow_lr_override: bool,
    /// `all` or a one-based target index (1..6).
    #[arg(long, default_value = "all", value_parser = parse_targets)]
    targets: TargetSelection,
}

impl TrainFlags {
    fn config(&self, seed: u64) -> TrainConfig {
        TrainConfig {
            epochs: self.epochs,
            batch_size: self.batch_size,
            lr: self.lr,
            lr_decay: self.lr_decay,
            seed,
            n_output: self.targets.width(),
            allow_lr_override: self.allow_lr_override,
        }
    }
}

#[derive(Args, Debug)]
struct TrainArgs {
    /// Target-regime dataset directory or manifest.
    #[arg(long)]
    dataset: PathBuf,
    /// Frozen backbone checkpoint; needed unless `--kind stats`.
    #[arg(long)]
    backbone: Option<PathBuf>,
    #[arg(long, default_value = "dmtlr", value_parser = parse_kind)]
    kind: ModelKind,
    #[command(flatten)]
    train: TrainFlags,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long, short, default_value = "run")]
    output: PathBuf,
}

#[derive(Args, Debug)]
struct ExperimentArgs {
    #[arg(long)]
    dataset: PathBuf,
    #[arg(long)]
    backbone: Option<PathBuf>,
    /// Comma-separated subset of dmtlr, image, stats.
    #[arg(long, default_value = "dmtlr,image,stats", value_delimiter = ',', value_parser = parse_kind)]
    kinds: Vec<ModelKind>,
    #[arg(long, default_value_t = 5)]
    trials: usize,
    #[command(flatten)]
    train: TrainFlags,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Concurrent trials; defaults to DMTLR_THREADS or 1.
    #[arg(long)]
    threads: Option<usize>,
    #[arg(long)]
    no_plots: bool,
    #[arg(long, short, default_value = "results")]
    output: PathBuf,
}

#[derive(Args, Debug)]
struct ReportArgs {
    /// Directory holding the experiment's CSV files.
    dir: PathBuf,
}

fn parse_regime(s: &str) -> Result<Regime, String> {
    s.parse().map_err(|e: dmtlr_core::Error| e.to_string())
}

fn parse_kind(s: &str) -> Result<ModelKind, String> {
    s.parse().map_err(|e: dmtlr_core::Error| e.to_string())
}

fn parse_targets(s: &str) -> Result<TargetSelection, String> {
    if s.eq_ignore_ascii_case("all") {
        return Ok(TargetSelection::All);
    }
    match s.parse::<usize>() {
        Ok(i) if (1..=TARGET_NAMES.len()).contains(&i) => Ok(TargetSelection::Single(i - 1)),
        _ => Err(format!("expected `all` or a target index in 1..={}", TARGET_NAMES.len())),
    }
}

fn manifest_of(path: &Path) -> PathBuf {
    if path.is_dir() {
        path.join(MANIFEST_FILE)
    } else {
        path.to_path_buf()
    }
}

fn generate(args: &GenerateArgs) -> Result<()> {
    let manifest = generate_dataset(args.count, args.regime, args.grid, args.seed, &args.output)
        .with_context(|| format!("generating into {}", args.output.display()))?;
    let undefined = manifest.meta.as_ref().map_or(0, |m| m.undefined_length_scale.len());
    println!(
        "wrote {} {} samples ({}x{}) to {}",
        manifest.rows.len(),
        args.regime.as_str(),
        args.grid,
        args.grid,
        args.output.display()
    );
    if undefined > 0 {
        println!("{undefined} samples have no defined length scale");
    }
    Ok(())
}

fn pretrain(args: &PretrainArgs) -> Result<()> {
    let source = load_dataset(&manifest_of(&args.source))
        .with_context(|| format!("loading source dataset {}", args.source.display()))?;
    let config = PretrainConfig {
        epochs: args.epochs,
        lr: args.lr,
        batch_size: args.batch_size,
        seed: args.seed,
    };
    let shape = source.images.shape();
    let spec = BackboneSpec {
        input_size: (shape[1], shape[2], shape[3]),
        ..BackboneSpec::default()
    };
    let fresh = build_backbone(&spec, args.seed)?;
    let backbone = pretrain_backbone(fresh, &source, &config)?.freeze();
    if let Some(report) = backbone.report() {
        println!(
            "held-out accuracy {:.3} (before {:.3}) on {} rows",
            report.heldout_accuracy, report.initial_heldout_accuracy, report.n_heldout
        );
    }
    if let Some(parent) = args.output.parent().filter(|p| !p.as_os_str().is_empty()) {
        fs::create_dir_all(parent).with_context(|| format!("creating {}", parent.display()))?;
    }
    backbone.save(&args.output)?;
    println!("saved frozen backbone {} to {}", backbone.weight_hash(), args.output.display());
    Ok(())
}

fn train_one(args: &TrainArgs) -> Result<()> {
    let backbone = match (&args.backbone, args.kind.uses_images()) {
        (Some(p), true) => Some(
            PretrainedBackbone::load(p)
                .with_context(|| format!("loading backbone {}", p.display()))?
                .freeze(),
        ),
        (None, true) => bail!("--kind {} needs --backbone", args.kind),
        (_, false) => None,
    };
    let config = args.train.config(args.seed);
    config.validate()?;
    fs::create_dir_all(&args.output).with_context(|| format!("creating {}", args.output.display()))?;
    let raw = load_dataset(&manifest_of(&args.dataset))
        .with_context(|| format!("loading dataset {}", args.dataset.display()))?;
    let run = run_single(&raw, backbone.as_ref(), args.kind, args.train.targets, &config, args.seed)?;
    let mut fits = Vec::new();
    for (target, fit) in &run.fits {
        let name = TARGET_NAMES[target - 1];
        match fit {
            Ok((r2, slope)) => println!("target {target} {name:<18} R2 {r2:.4} slope {slope:.4}"),
            Err(e) => println!("target {target} {name:<18} fit undefined: {e}"),
        }
        fits.push(json!({
            "target_index": target,
            "name": name,
            "r2": fit.as_ref().ok().map(|f| f.0),
            "slope": fit.as_ref().ok().map(|f| f.1),
        }));
    }
    let report = &run.report;
    println!(
        "final train loss {:.4}, test loss {:.4}",
        report.train_loss.last().copied().unwrap_or(f64::NAN),
        report.test_loss.last().copied().unwrap_or(f64::NAN)
    );

    run.model.save(&args.output.join("model.ckpt"))?;
    let summary = json!({
        "kind": args.kind,
        "seed": args.seed,
        "n_train": run.n_train,
        "n_test": run.n_test,
        "config": config,
        "report": report,
        "fits": fits,
    });
    let path = args.output.join("train_report.json");
    fs::write(&path, serde_json::to_string_pretty(&summary)?).with_context(|| format!("writing {}", path.display()))?;
    println!("saved model and report to {}", args.output.display());
    Ok(())
}

fn experiment(args: &ExperimentArgs) -> Result<()> {
    let mut config = ExperimentConfig::new(&args.dataset, &args.output);
    config.backbone = args.backbone.clone();
    config.kinds = args.kinds.clone();
    config.targets = args.train.targets;
    config.trials = args.trials;
    config.train = args.train.config(0);
    config.seed = args.seed;
    config.threads = args.threads;
    config.plots = !args.no_plots;
    let result = run_experiment(&config)?;
    println!("{:<7} {:<11} {:>8} {:>8} {:>8}", "target", "kind", "r2", "ci", "slope");
    for row in &result.metrics {
        println!(
            "{:<7} {:<11} {:>8.4} {:>8.4} {:>8.4}",
            row.target_index,
            row.kind.as_str(),
            row.r2_mean,
            row.r2_ci_halfwidth,
            row.slope_mean
        );
    }
    for kind in ModelKind::ALL.into_iter().filter(|k| config.kinds.contains(k)) {
        println!("mean R2 {:<11} {:.4}", kind.as_str(), result.mean_r2(kind));
    }
    if !result.failures.is_empty() {
        println!("{} undefined fits, see failures.csv", result.failures.len());
    }
    println!("reports written to {}", args.output.display());
    Ok(())
}

fn report(args: &ReportArgs) -> Result<()> {
    let metrics = args.dir.join(METRICS_FILE);
    if !metrics.is_file() {
        bail!("{} not found", metrics.display());
    }
    let plots = render_plots(&args.dir)?;
    for p in &plots {
        println!("{}", p.display());
    }
    println!("rendered {} plots", plots.len());
    Ok(())
}

fn run(cli: Cli) -> Result<()> {
    match cli.command {
        Command::Generate(a) => generate(&a),
        Command::Pretrain(a) => pretrain(&a),
        Command::Train(a) => train_one(&a),
        Command::Experiment(a) => experiment(&a),
        Command::Report(a) => report(&a),
    }
}

fn main() -> ExitCode {
    match run(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::FAILURE
        }
    }
}

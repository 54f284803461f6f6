//! Multi-trial experiments over the three model kinds with per-target R²,
//! confidence intervals, CSV reports and plots.

mod metrics;
pub mod plot;

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};
use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::Mutex;

use serde::Serialize;

pub use metrics::{confidence_interval, linear_fit, r_squared, t_quantile_975, LinearFit};

use crate::datagen::{MANIFEST_FILE, TARGET_NAMES};
use crate::dmtlr::{build_model, train_on_inputs, ModelInputs, ModelKind, TrainConfig, TrainReport};
use crate::error::{Error, Result};
use crate::featurizer::PretrainedBackbone;
use crate::nn::Mode;
use crate::pipeline::{load_dataset, prepare, split, RawDataset, TargetSelection};
use crate::rng::{derive_seed, seeded};
use crate::tensor::Tensor;

pub const METRICS_FILE: &str = "metrics.csv";
pub const LOSS_CURVES_FILE: &str = "loss_curves.csv";
pub const PREDICTIONS_FILE: &str = "predictions.csv";
pub const FAILURES_FILE: &str = "failures.csv";
pub const REPORT_FILE: &str = "report.json";
pub const THREADS_ENV: &str = "DMTLR_THREADS";

const R2_DEFINITION: &str = "squared Pearson correlation of the least-squares fit of predicted on true test values, in physical units";
const PLOT_SIZE: (usize, usize) = (320, 240);

#[derive(Clone, Debug, PartialEq)]
pub struct ExperimentConfig {
    /// Manifest file, or a directory containing `manifest.csv`.
    pub dataset: PathBuf,
    /// Backbone checkpoint; required when an image-bearing kind is run.
    pub backbone: Option<PathBuf>,
    pub kinds: Vec<ModelKind>,
    pub targets: TargetSelection,
    pub trials: usize,
    pub train: TrainConfig,
    pub output_dir: PathBuf,
    pub seed: u64,
    /// Trials run concurrently; `None` reads `DMTLR_THREADS` (default 1).
    pub threads: Option<usize>,
    pub plots: bool,
}

impl ExperimentConfig {
    pub fn new(dataset: impl Into<PathBuf>, output_dir: impl Into<PathBuf>) -> Self {
        Self {
            dataset: dataset.into(),
            backbone: None,
            kinds: ModelKind::ALL.to_vec(),
            targets: TargetSelection::All,
            trials: 5,
            train: TrainConfig::default(),
            output_dir: output_dir.into(),
            seed: 0,
            threads: None,
            plots: true,
        }
    }

    pub fn manifest_path(&self) -> PathBuf {
        if self.dataset.is_dir() {
            self.dataset.join(MANIFEST_FILE)
        } else {
            self.dataset.clone()
        }
    }

    fn kinds(&self) -> Vec<ModelKind> {
        let mut kinds = Vec::new();
        for &k in &self.kinds {
            if !kinds.contains(&k) {
                kinds.push(k);
            }
        }
        kinds
    }

    fn thread_count(&self) -> usize {
        self.threads
            .or_else(|| std::env::var(THREADS_ENV).ok().and_then(|v| v.trim().parse().ok()))
            .unwrap_or(1)
            .clamp(1, self.trials.max(1))
    }
}

/// One row of `metrics.csv`.
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct MetricsRow {
    /// One-based target index.
    pub target_index: usize,
    pub kind: ModelKind,
    pub r2_mean: f64,
    pub r2_ci_halfwidth: f64,
    pub slope_mean: f64,
    /// Trials with a defined fit.
    pub trials: usize,
}

/// A trial whose fit for one target was undefined.
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct FitFailure {
    pub kind: ModelKind,
    pub trial: usize,
    pub target_index: usize,
    pub reason: String,
}

#[derive(Clone, Debug, PartialEq)]
pub struct RunRecord {
    pub kind: ModelKind,
    pub trial: usize,
    pub report: TrainReport,
    /// `w_f` hash of the trained model (image-bearing kinds).
    pub backbone_hash_after: Option<String>,
    /// Per selected target: `Ok((r2, slope))` or the failure reason.
    pub fits: Vec<FitOutcome>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct PredictionRow {
    pub kind: ModelKind,
    pub trial: usize,
    pub sample_id: String,
    pub target_index: usize,
    pub true_value: f64,
    pub predicted: f64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct ExperimentResult {
    pub metrics: Vec<MetricsRow>,
    pub runs: Vec<RunRecord>,
    pub predictions: Vec<PredictionRow>,
    pub failures: Vec<FitFailure>,
    pub backbone_hash: Option<String>,
}

impl ExperimentResult {
    /// Mean of `r2_mean` over targets for one kind.
    pub fn mean_r2(&self, kind: ModelKind) -> f64 {
        let v: Vec<f64> = self.metrics.iter().filter(|m| m.kind == kind).map(|m| m.r2_mean).collect();
        v.iter().sum::<f64>() / v.len() as f64
    }

    pub fn runs_of(&self, kind: ModelKind) -> impl Iterator<Item = &RunRecord> {
        self.runs.iter().filter(move |r| r.kind == kind)
    }
}

/// Checks inputs and the output directory, loads everything, runs all
/// trials and writes the reports.
pub fn run_experiment(config: &ExperimentConfig) -> Result<ExperimentResult> {
    if config.trials < 2 {
        return Err(Error::Experiment(format!(
            "confidence intervals need at least 2 trials, got {}",
            config.trials
        )));
    }
    if config.kinds.is_empty() {
        return Err(Error::Experiment("no model kinds selected".into()));
    }
    config.train.validate()?;
    let manifest = config.manifest_path();
    if !manifest.is_file() {
        return Err(Error::Experiment(format!("dataset manifest {} not found", manifest.display())));
    }
    let needs_backbone = config.kinds.iter().any(|k| k.uses_images());
    let backbone_path = match (&config.backbone, needs_backbone) {
        (Some(p), true) if !p.is_file() => {
            return Err(Error::Experiment(format!("backbone checkpoint {} not found", p.display())))
        }
        (None, true) => {
            return Err(Error::Experiment(
                "image-bearing model kinds need a backbone checkpoint".into(),
            ))
        }
        (p, true) => p.clone(),
        (_, false) => None,
    };
    ensure_writable(&config.output_dir)?;
    let backbone = backbone_path
        .map(|p| PretrainedBackbone::load(&p).map(PretrainedBackbone::freeze))
        .transpose()?;
    let raw = load_dataset(&manifest)?;
    let result = run_trials(config, &raw, backbone.as_ref())?;
    write_reports(config, &result, backbone.as_ref())?;
    Ok(result)
}

fn ensure_writable(dir: &Path) -> Result<()> {
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let probe = dir.join(".write_probe");
    fs::write(&probe, b"").map_err(|e| Error::io(&probe, e))?;
    fs::remove_file(&probe).map_err(|e| Error::io(&probe, e))
}

struct TrialOutput {
    runs: Vec<RunRecord>,
    predictions: Vec<PredictionRow>,
}

/// Runs every trial in memory. Trials are independent, so the outcome does
/// not depend on the thread count.
pub fn run_trials(
    config: &ExperimentConfig,
    raw: &RawDataset,
    backbone: Option<&PretrainedBackbone>,
) -> Result<ExperimentResult> {
    let kinds = config.kinds();
    if kinds.iter().any(|k| k.uses_images()) && backbone.is_none() {
        return Err(Error::Experiment("image-bearing model kinds need a backbone".into()));
    }
    let n_threads = config.thread_count();
    let next = AtomicUsize::new(0);
    let outputs: Mutex<Vec<Option<Result<TrialOutput>>>> = Mutex::new((0..config.trials).map(|_| None).collect());
    std::thread::scope(|s| {
        for _ in 0..n_threads {
            s.spawn(|| loop {
                let trial = next.fetch_add(1, Ordering::SeqCst);
                if trial >= config.trials {
                    break;
                }
                let out = run_trial(config, &kinds, raw, backbone, trial);
                let failed = out.is_err();
                outputs.lock().expect("no worker panicked")[trial] = Some(out);
                if failed {
                    next.store(config.trials, Ordering::SeqCst);
                }
            });
        }
    });
    let mut runs = Vec::new();
    let mut predictions = Vec::new();
    for out in outputs.into_inner().expect("no worker panicked").into_iter().flatten() {
        let out = out?;
        runs.extend(out.runs);
        predictions.extend(out.predictions);
    }
    let columns = config.targets.columns();
    let mut metrics = Vec::new();
    let mut failures = Vec::new();
    for (pos, &col) in columns.iter().enumerate() {
        for &kind in &kinds {
            let mut r2 = Vec::new();
            let mut slopes = Vec::new();
            for run in runs.iter().filter(|r| r.kind == kind) {
                match &run.fits[pos] {
                    Ok((r, s)) => {
                        r2.push(*r);
                        slopes.push(*s);
                    }
                    Err(reason) => failures.push(FitFailure {
                        kind,
                        trial: run.trial,
                        target_index: col + 1,
                        reason: reason.clone(),
                    }),
                }
            }
            let mean = |v: &[f64]| if v.is_empty() { f64::NAN } else { v.iter().sum::<f64>() / v.len() as f64 };
            let halfwidth = confidence_interval(&r2).map_or(f64::NAN, |c| c.1);
            metrics.push(MetricsRow {
                target_index: col + 1,
                kind,
                r2_mean: mean(&r2),
                r2_ci_halfwidth: halfwidth,
                slope_mean: mean(&slopes),
                trials: r2.len(),
            });
        }
    }
    Ok(ExperimentResult {
        metrics,
        runs,
        predictions,
        failures,
        backbone_hash: backbone.map(PretrainedBackbone::weight_hash),
    })
}

fn run_trial(
    config: &ExperimentConfig,
    kinds: &[ModelKind],
    raw: &RawDataset,
    backbone: Option<&PretrainedBackbone>,
    trial: usize,
) -> Result<TrialOutput> {
    let trial_seed = derive_seed(config.seed, trial as u64);
    let plan = split(raw.len(), derive_seed(trial_seed, 0))?;
    let input_hw = backbone.map_or((raw.images.shape()[1], raw.images.shape()[2]), |b| {
        (b.spec().input_size.0, b.spec().input_size.1)
    });
    let (pre, train_set, test_set) = prepare(raw, &plan, config.targets, input_hw)?;
    let n_output = config.targets.width();
    let image_bb = backbone.filter(|_| kinds.iter().any(|k| k.uses_images()));
    let train_inputs = ModelInputs::from_prepared(image_bb, &train_set)?;
    let test_inputs = ModelInputs::from_prepared(image_bb, &test_set)?;
    let stats_train = ModelInputs::from_prepared(None, &train_set)?;
    let stats_test = ModelInputs::from_prepared(None, &test_set)?;
    let true_phys = pre.unscale_targets(&test_set.targets)?;
    let mut out = TrialOutput {
        runs: Vec::new(),
        predictions: Vec::new(),
    };
    for &kind in kinds {
        let kind_index = ModelKind::ALL.iter().position(|&k| k == kind).expect("known kind") as u64;
        let mut model = build_model(
            kind,
            backbone,
            raw.descriptors.row_len(),
            n_output,
            derive_seed(trial_seed, 100 + kind_index),
        )?;
        let train_config = TrainConfig {
            seed: derive_seed(trial_seed, 200 + kind_index),
            n_output,
            ..config.train.clone()
        };
        let (tr, te) = if kind.uses_images() {
            (&train_inputs, &test_inputs)
        } else {
            (&stats_train, &stats_test)
        };
        let report = train_on_inputs(&mut model, tr, te, &train_config)?;
        let pred = model.predict_inputs(te, Mode::Eval, &mut seeded(0))?;
        let pred_phys = pre.unscale_targets(&pred)?;
        let fits = (0..n_output)
            .map(|j| {
                let t = column(&true_phys, j);
                let p = column(&pred_phys, j);
                r_squared(&t, &p).map_err(|e| e.to_string())
            })
            .collect();
        for (i, id) in test_set.sample_ids.iter().enumerate() {
            for (j, &col) in pre.target_columns.iter().enumerate() {
                out.predictions.push(PredictionRow {
                    kind,
                    trial,
                    sample_id: id.clone(),
                    target_index: col + 1,
                    true_value: true_phys.row(i)[j],
                    predicted: pred_phys.row(i)[j],
                });
            }
        }
        out.runs.push(RunRecord {
            kind,
            trial,
            report,
            backbone_hash_after: model.backbone().map(PretrainedBackbone::weight_hash),
            fits,
        });
    }
    Ok(out)
}

fn column(t: &Tensor, j: usize) -> Vec<f64> {
    (0..t.rows()).map(|i| t.row(i)[j]).collect()
}

/// `(r2, slope)` of a defined fit, or the reason it is undefined.
pub type FitOutcome = std::result::Result<(f64, f64), String>;

/// Outcome of [`run_single`].
#[derive(Clone, Debug)]
pub struct SingleRun {
    pub model: crate::dmtlr::DmtlrModel,
    pub report: TrainReport,
    pub n_train: usize,
    pub n_test: usize,
    /// One-based target index with its test-split fit.
    pub fits: Vec<(usize, FitOutcome)>,
}

/// One split, one model, one training run. `seed` drives the split, the
/// initialisation and the batch order.
pub fn run_single(
    raw: &RawDataset,
    backbone: Option<&PretrainedBackbone>,
    kind: ModelKind,
    targets: TargetSelection,
    train: &TrainConfig,
    seed: u64,
) -> Result<SingleRun> {
    let plan = split(raw.len(), derive_seed(seed, 0))?;
    let input_hw = backbone.map_or((raw.images.shape()[1], raw.images.shape()[2]), |b| {
        (b.spec().input_size.0, b.spec().input_size.1)
    });
    let (pre, train_set, test_set) = prepare(raw, &plan, targets, input_hw)?;
    let n_output = targets.width();
    let mut model = build_model(kind, backbone, raw.descriptors.row_len(), n_output, derive_seed(seed, 1))?;
    let config = TrainConfig {
        seed: derive_seed(seed, 2),
        n_output,
        ..train.clone()
    };
    let train_inputs = ModelInputs::from_prepared(model.backbone(), &train_set)?;
    let test_inputs = ModelInputs::from_prepared(model.backbone(), &test_set)?;
    let report = train_on_inputs(&mut model, &train_inputs, &test_inputs, &config)?;
    let truth = pre.unscale_targets(&test_set.targets)?;
    let pred = pre.unscale_targets(&model.predict_inputs(&test_inputs, Mode::Eval, &mut seeded(0))?)?;
    let fits = pre
        .target_columns
        .iter()
        .enumerate()
        .map(|(j, &col)| (col + 1, r_squared(&column(&truth, j), &column(&pred, j)).map_err(|e| e.to_string())))
        .collect();
    Ok(SingleRun {
        model,
        report,
        n_train: train_set.len(),
        n_test: test_set.len(),
        fits,
    })
}

fn csv_err(path: &Path) -> impl Fn(csv::Error) -> Error + '_ {
    move |e| Error::Io {
        path: path.to_path_buf(),
        source: std::io::Error::other(e),
    }
}

fn write_csv<R: Serialize>(path: &Path, rows: &[R], header_if_empty: &[&str]) -> Result<()> {
    let mut w = csv::Writer::from_path(path).map_err(csv_err(path))?;
    if rows.is_empty() {
        w.write_record(header_if_empty).map_err(csv_err(path))?;
    }
    for r in rows {
        w.serialize(r).map_err(csv_err(path))?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}

#[derive(Serialize)]
struct LossRow<'a> {
    kind: &'a str,
    trial: usize,
    epoch: usize,
    train_loss: f64,
    test_loss: f64,
}

#[derive(Serialize)]
struct PredictionCsvRow<'a> {
    kind: &'a str,
    trial: usize,
    sample_id: &'a str,
    target_index: usize,
    target_name: &'a str,
    true_value: f64,
    predicted: f64,
}

/// Writes `metrics.csv`, `loss_curves.csv`, `predictions.csv`,
/// `failures.csv`, `report.json` and (optionally) plots.
pub fn write_reports(config: &ExperimentConfig, result: &ExperimentResult, backbone: Option<&PretrainedBackbone>) -> Result<()> {
    let dir = &config.output_dir;
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    write_csv(
        &dir.join(METRICS_FILE),
        &result.metrics,
        &["target_index", "kind", "r2_mean", "r2_ci_halfwidth", "slope_mean", "trials"],
    )?;
    let mut loss_rows = Vec::new();
    for run in &result.runs {
        for (e, (tr, te)) in run.report.train_loss.iter().zip(&run.report.test_loss).enumerate() {
            loss_rows.push(LossRow {
                kind: run.kind.as_str(),
                trial: run.trial,
                epoch: e + 1,
                train_loss: *tr,
                test_loss: *te,
            });
        }
    }
    write_csv(
        &dir.join(LOSS_CURVES_FILE),
        &loss_rows,
        &["kind", "trial", "epoch", "train_loss", "test_loss"],
    )?;
    let preds: Vec<PredictionCsvRow> = result
        .predictions
        .iter()
        .map(|p| PredictionCsvRow {
            kind: p.kind.as_str(),
            trial: p.trial,
            sample_id: &p.sample_id,
            target_index: p.target_index,
            target_name: TARGET_NAMES.get(p.target_index - 1).copied().unwrap_or(""),
            true_value: p.true_value,
            predicted: p.predicted,
        })
        .collect();
    write_csv(
        &dir.join(PREDICTIONS_FILE),
        &preds,
        &["kind", "trial", "sample_id", "target_index", "target_name", "true_value", "predicted"],
    )?;
    write_csv(
        &dir.join(FAILURES_FILE),
        &result.failures,
        &["kind", "trial", "target_index", "reason"],
    )?;
    let report = serde_json::json!({
        "r2_definition": R2_DEFINITION,
        "ci": "mean ± t(0.975, k-1) · s / sqrt(k) over trials with a defined fit",
        "dataset": config.dataset,
        "kinds": config.kinds(),
        "targets": config.targets.columns().iter().map(|c| c + 1).collect::<Vec<_>>(),
        "trials": config.trials,
        "seed": config.seed,
        "train": config.train,
        "backbone_hash": result.backbone_hash,
        "source_task": backbone.and_then(PretrainedBackbone::report),
    });
    let path = dir.join(REPORT_FILE);
    let text = serde_json::to_string_pretty(&report).map_err(|e| Error::Experiment(e.to_string()))?;
    fs::write(&path, text).map_err(|e| Error::io(&path, e))?;
    if config.plots {
        render_plots(dir)?;
    }
    Ok(())
}

/// Re-renders every plot from `loss_curves.csv` and `predictions.csv` in
/// `dir` into `dir/plots`.
pub fn render_plots(dir: &Path) -> Result<Vec<PathBuf>> {
    let plots = dir.join("plots");
    fs::create_dir_all(&plots).map_err(|e| Error::io(&plots, e))?;
    let mut written = Vec::new();
    let (w, h) = PLOT_SIZE;

    let path = dir.join(LOSS_CURVES_FILE);
    let mut curves: BTreeMap<(String, usize), (Vec<f64>, Vec<f64>)> = BTreeMap::new();
    let mut rdr = csv::Reader::from_path(&path).map_err(csv_err(&path))?;
    for rec in rdr.records() {
        let rec = rec.map_err(csv_err(&path))?;
        let entry = curves.entry((rec[0].to_string(), parse(&path, &rec[1])?)).or_default();
        entry.0.push(parse(&path, &rec[3])?);
        entry.1.push(parse(&path, &rec[4])?);
    }
    let kinds: Vec<String> = curves.keys().map(|k| k.0.clone()).collect::<std::collections::BTreeSet<_>>().into_iter().collect();
    for kind in &kinds {
        let mut series = Vec::new();
        for ((k, _), (tr, te)) in &curves {
            if k == kind {
                series.push(tr.clone());
                series.push(te.clone());
            }
        }
        let stem = format!("loss_{kind}");
        plot::loss_plot(&series, w, h).save(&plots, &stem)?;
        written.push(plots.join(format!("{stem}.png")));
    }

    let path = dir.join(PREDICTIONS_FILE);
    let mut points: BTreeMap<(String, usize), (Vec<f64>, Vec<f64>)> = BTreeMap::new();
    let mut rdr = csv::Reader::from_path(&path).map_err(csv_err(&path))?;
    for rec in rdr.records() {
        let rec = rec.map_err(csv_err(&path))?;
        let entry = points.entry((rec[0].to_string(), parse(&path, &rec[3])?)).or_default();
        entry.0.push(parse(&path, &rec[5])?);
        entry.1.push(parse(&path, &rec[6])?);
    }
    for ((kind, target), (t, p)) in &points {
        let stem = format!("scatter_{kind}_t{target}");
        plot::scatter_plot(t, p, w, h).save(&plots, &stem)?;
        written.push(plots.join(format!("{stem}.png")));
    }
    Ok(written)
}

fn parse<T: std::str::FromStr>(path: &Path, s: &str) -> Result<T> {
    s.parse().map_err(|_| Error::Io {
        path: path.to_path_buf(),
        source: std::io::Error::new(std::io::ErrorKind::InvalidData, format!("cannot parse `{s}`")),
    })
}

use std::path::PathBuf;

use dmtlr_core::datagen::{generate_dataset as gen_dataset, generate_sample, Regime, MANIFEST_FILE, TARGET_NAMES};
use dmtlr_core::dmtlr::{build_model, DmtlrModel, ModelKind, TrainConfig};
use dmtlr_core::featurizer::{build_backbone, pretrain_backbone, BackboneSpec, PretrainConfig, PretrainedBackbone};
use dmtlr_core::harness::{self, ExperimentConfig};
use dmtlr_core::pipeline::{self, RawDataset, TargetSelection};
use pyo3::exceptions::{PyIOError, PyValueError};
use pyo3::prelude::*;
use pyo3::types::PyDict;

fn to_py(e: dmtlr_core::Error) -> PyErr {
    match e {
        dmtlr_core::Error::Io { .. } => PyIOError::new_err(e.to_string()),
        other => PyValueError::new_err(other.to_string()),
    }
}

fn parse<T: std::str::FromStr<Err = dmtlr_core::Error>>(s: &str) -> PyResult<T> {
    s.parse().map_err(to_py)
}

/// `"all"` or a one-based target index.
fn target_selection(targets: &Bound<'_, PyAny>) -> PyResult<TargetSelection> {
    if let Ok(i) = targets.extract::<usize>() {
        return match i {
            1..=6 => Ok(TargetSelection::Single(i - 1)),
            _ => Err(PyValueError::new_err(format!("target index {i} outside 1..=6"))),
        };
    }
    match targets.extract::<String>() {
        Ok(s) if s.eq_ignore_ascii_case("all") => Ok(TargetSelection::All),
        _ => Err(PyValueError::new_err("targets must be \"all\" or an index in 1..=6")),
    }
}

fn manifest_of(path: PathBuf) -> PathBuf {
    if path.is_dir() {
        path.join(MANIFEST_FILE)
    } else {
        path
    }
}

fn rows(t: &dmtlr_core::Tensor) -> Vec<Vec<f64>> {
    (0..t.rows()).map(|i| t.row(i).to_vec()).collect()
}

/// Samples, descriptors and targets loaded from a manifest.
#[pyclass(module = "dmtlr", frozen)]
struct Dataset {
    raw: RawDataset,
}

#[pymethods]
impl Dataset {
    /// Loads a dataset directory or its `manifest.csv`.
    #[staticmethod]
    fn load(path: PathBuf) -> PyResult<Self> {
        pipeline::load_dataset(&manifest_of(path)).map(|raw| Self { raw }).map_err(to_py)
    }

    fn __len__(&self) -> usize {
        self.raw.len()
    }

    #[getter]
    fn sample_ids(&self) -> Vec<String> {
        self.raw.sample_ids.clone()
    }

    #[getter]
    fn image_shape(&self) -> Vec<usize> {
        self.raw.images.shape()[1..].to_vec()
    }

    #[getter]
    fn descriptors(&self) -> Vec<Vec<f64>> {
        rows(&self.raw.descriptors)
    }

    #[getter]
    fn targets(&self) -> Vec<Vec<f64>> {
        rows(&self.raw.targets)
    }

    fn __repr__(&self) -> String {
        format!("Dataset(samples={}, image_shape={:?})", self.raw.len(), self.image_shape())
    }
}

/// Convolutional featurization layers.
#[pyclass(module = "dmtlr", frozen)]
struct Backbone {
    inner: PretrainedBackbone,
}

#[pymethods]
impl Backbone {
    /// Randomly initialised, frozen backbone for square images of `input_size`.
    #[staticmethod]
    #[pyo3(signature = (seed=0, input_size=64))]
    fn random(seed: u64, input_size: usize) -> PyResult<Self> {
        let spec = BackboneSpec {
            input_size: (input_size, input_size, 3),
            ..BackboneSpec::default()
        };
        let inner = build_backbone(&spec, seed).map_err(to_py)?.freeze();
        Ok(Self { inner })
    }

    /// Pretrains on time-bin classification over a source dataset and
    /// returns the frozen result.
    #[staticmethod]
    #[pyo3(signature = (source, epochs=30, lr=5e-4, batch_size=8, seed=0))]
    fn pretrain(py: Python<'_>, source: &Dataset, epochs: usize, lr: f64, batch_size: usize, seed: u64) -> PyResult<Self> {
        let shape = source.raw.images.shape();
        let spec = BackboneSpec {
            input_size: (shape[1], shape[2], shape[3]),
            ..BackboneSpec::default()
        };
        let config = PretrainConfig {
            epochs,
            lr,
            batch_size,
            seed,
        };
        let inner = py
            .detach(|| {
                let fresh = build_backbone(&spec, seed)?;
                pretrain_backbone(fresh, &source.raw, &config)
            })
            .map_err(to_py)?
            .freeze();
        Ok(Self { inner })
    }

    #[staticmethod]
    fn load(path: PathBuf) -> PyResult<Self> {
        let inner = PretrainedBackbone::load(&path).map_err(to_py)?.freeze();
        Ok(Self { inner })
    }

    fn save(&self, path: PathBuf) -> PyResult<()> {
        self.inner.save(&path).map_err(to_py)
    }

    #[getter]
    fn weight_hash(&self) -> String {
        self.inner.weight_hash()
    }

    #[getter]
    fn feature_len(&self) -> usize {
        self.inner.spec().feature_len()
    }

    #[getter]
    fn is_frozen(&self) -> bool {
        self.inner.is_frozen()
    }

    /// Held-out pretext accuracy, or `None` for an untrained backbone.
    #[getter]
    fn heldout_accuracy(&self) -> Option<f64> {
        self.inner.report().map(|r| r.heldout_accuracy)
    }
}

/// DMTL-R or one of its single-modality baselines.
#[pyclass(module = "dmtlr", frozen)]
struct Model {
    inner: DmtlrModel,
}

#[pymethods]
impl Model {
    #[new]
    #[pyo3(signature = (kind="dmtlr", backbone=None, d_descriptor=18, n_output=6, seed=0))]
    fn new(kind: &str, backbone: Option<&Backbone>, d_descriptor: usize, n_output: usize, seed: u64) -> PyResult<Self> {
        let kind: ModelKind = parse(kind)?;
        let inner = build_model(kind, backbone.map(|b| &b.inner), d_descriptor, n_output, seed).map_err(to_py)?;
        Ok(Self { inner })
    }

    #[staticmethod]
    fn load(path: PathBuf) -> PyResult<Self> {
        DmtlrModel::load(&path).map(|inner| Self { inner }).map_err(to_py)
    }

    fn save(&self, path: PathBuf) -> PyResult<()> {
        self.inner.save(&path).map_err(to_py)
    }

    #[getter]
    fn kind(&self) -> &'static str {
        self.inner.kind().as_str()
    }

    #[getter]
    fn n_output(&self) -> usize {
        self.inner.n_output()
    }

    #[getter]
    fn dropout_rate(&self) -> f64 {
        self.inner.dropout_rate()
    }

    #[getter]
    fn num_trainable_params(&self) -> usize {
        self.inner.num_trainable_params()
    }

    #[getter]
    fn weight_hash(&self) -> String {
        self.inner.weight_hash()
    }

    /// Hash of the frozen backbone inside the model, if it has one.
    #[getter]
    fn backbone_hash(&self) -> Option<String> {
        self.inner.backbone().map(PretrainedBackbone::weight_hash)
    }

    fn __repr__(&self) -> String {
        format!("Model(kind={}, n_output={})", self.kind(), self.n_output())
    }
}

/// Simulates `count` samples into `output_dir` and returns the row count.
#[pyfunction]
#[pyo3(signature = (count, output_dir, regime="target", grid=64, seed=0))]
fn generate_dataset(py: Python<'_>, count: usize, output_dir: PathBuf, regime: &str, grid: usize, seed: u64) -> PyResult<usize> {
    let regime: Regime = parse(regime)?;
    py.detach(|| gen_dataset(count, regime, grid, seed, &output_dir))
        .map(|m| m.rows.len())
        .map_err(to_py)
}

/// Runs one simulation and returns its final field, parameters and targets.
#[pyfunction]
#[pyo3(signature = (index=0, regime="target", grid=64, seed=0))]
fn simulate<'py>(py: Python<'py>, index: usize, regime: &str, grid: usize, seed: u64) -> PyResult<Bound<'py, PyDict>> {
    let regime: Regime = parse(regime)?;
    let sample = py.detach(|| generate_sample(index, regime, grid, seed)).map_err(to_py)?;
    let out = PyDict::new(py);
    out.set_item("grid", grid)?;
    out.set_item("field", sample.field.values().to_vec())?;
    out.set_item("params", sample.params.to_array().to_vec())?;
    out.set_item("targets", sample.targets.to_array().to_vec())?;
    out.set_item("target_names", TARGET_NAMES.to_vec())?;
    out.set_item("length_undefined", sample.targets.length_undefined)?;
    Ok(out)
}

/// Splits `n` row indices into train and test lists.
#[pyfunction]
fn split(n: usize, seed: u64) -> PyResult<(Vec<usize>, Vec<usize>)> {
    pipeline::split(n, seed).map(|p| (p.train, p.test)).map_err(to_py)
}

/// `(r2, slope)` of the least-squares fit of predicted on true values.
#[pyfunction]
fn r_squared(true_values: Vec<f64>, predicted: Vec<f64>) -> PyResult<(f64, f64)> {
    harness::r_squared(&true_values, &predicted).map_err(to_py)
}

/// `(mean, halfwidth)` of the 95% t-interval over per-trial values.
#[pyfunction]
fn confidence_interval(values: Vec<f64>) -> PyResult<(f64, f64)> {
    harness::confidence_interval(&values).map_err(to_py)
}

/// Trains one model on one split and returns `(model, summary)`.
#[pyfunction]
#[pyo3(signature = (dataset, kind="dmtlr", backbone=None, targets=None, epochs=20, batch_size=32, lr=5e-4, lr_decay=0.95, seed=0))]
#[allow(clippy::too_many_arguments)]
fn train_single<'py>(
    py: Python<'py>,
    dataset: &Dataset,
    kind: &str,
    backbone: Option<&Backbone>,
    targets: Option<&Bound<'py, PyAny>>,
    epochs: usize,
    batch_size: usize,
    lr: f64,
    lr_decay: f64,
    seed: u64,
) -> PyResult<(Model, Bound<'py, PyDict>)> {
    let kind: ModelKind = parse(kind)?;
    let targets = targets.map_or(Ok(TargetSelection::All), target_selection)?;
    let config = TrainConfig {
        epochs,
        batch_size,
        lr,
        lr_decay,
        ..TrainConfig::default()
    };
    let bb = backbone.map(|b| &b.inner);
    let run = py
        .detach(|| harness::run_single(&dataset.raw, bb, kind, targets, &config, seed))
        .map_err(to_py)?;
    let summary = PyDict::new(py);
    summary.set_item("train_loss", run.report.train_loss.clone())?;
    summary.set_item("test_loss", run.report.test_loss.clone())?;
    summary.set_item("n_train", run.n_train)?;
    summary.set_item("n_test", run.n_test)?;
    let fits = PyDict::new(py);
    for (target, fit) in &run.fits {
        fits.set_item(target, fit.as_ref().ok().copied())?;
    }
    summary.set_item("fits", fits)?;
    Ok((Model { inner: run.model }, summary))
}

/// Runs the multi-trial comparison, writes reports to `output_dir` and
/// returns the metrics rows as dicts.
#[pyfunction]
#[pyo3(signature = (dataset, output_dir, backbone=None, kinds=None, targets=None, trials=5, epochs=20, batch_size=32, lr=5e-4, lr_decay=0.95, seed=0, threads=None, plots=true))]
#[allow(clippy::too_many_arguments)]
fn run_experiment<'py>(
    py: Python<'py>,
    dataset: PathBuf,
    output_dir: PathBuf,
    backbone: Option<PathBuf>,
    kinds: Option<Vec<String>>,
    targets: Option<&Bound<'py, PyAny>>,
    trials: usize,
    epochs: usize,
    batch_size: usize,
    lr: f64,
    lr_decay: f64,
    seed: u64,
    threads: Option<usize>,
    plots: bool,
) -> PyResult<Vec<Bound<'py, PyDict>>> {
    let mut config = ExperimentConfig::new(dataset, output_dir);
    config.backbone = backbone;
    if let Some(kinds) = kinds {
        config.kinds = kinds.iter().map(|k| parse(k)).collect::<PyResult<_>>()?;
    }
    config.targets = targets.map_or(Ok(TargetSelection::All), target_selection)?;
    config.trials = trials;
    config.train = TrainConfig {
        epochs,
        batch_size,
        lr,
        lr_decay,
        n_output: config.targets.width(),
        ..TrainConfig::default()
    };
    config.seed = seed;
    config.threads = threads;
    config.plots = plots;
    let result = py.detach(|| harness::run_experiment(&config)).map_err(to_py)?;
    result
        .metrics
        .iter()
        .map(|m| {
            let d = PyDict::new(py);
            d.set_item("target_index", m.target_index)?;
            d.set_item("kind", m.kind.as_str())?;
            d.set_item("r2_mean", m.r2_mean)?;
            d.set_item("r2_ci_halfwidth", m.r2_ci_halfwidth)?;
            d.set_item("slope_mean", m.slope_mean)?;
            d.set_item("trials", m.trials)?;
            Ok(d)
        })
        .collect()
}

/// Re-renders plots from an experiment directory; returns the file paths.
#[pyfunction]
fn render_plots(dir: PathBuf) -> PyResult<Vec<PathBuf>> {
    harness::render_plots(&dir).map_err(to_py)
}

#[pymodule]
fn dmtlr(m: &Bound<'_, PyModule>) -> PyResult<()> {
    m.add_class::<Dataset>()?;
    m.add_class::<Backbone>()?;
    m.add_class::<Model>()?;
    m.add_function(wrap_pyfunction!(generate_dataset, m)?)?;
    m.add_function(wrap_pyfunction!(simulate, m)?)?;
    m.add_function(wrap_pyfunction!(split, m)?)?;
    m.add_function(wrap_pyfunction!(r_squared, m)?)?;
    m.add_function(wrap_pyfunction!(confidence_interval, m)?)?;
    m.add_function(wrap_pyfunction!(train_single, m)?)?;
    m.add_function(wrap_pyfunction!(run_experiment, m)?)?;
    m.add_function(wrap_pyfunction!(render_plots, m)?)?;
    m.add("TARGET_NAMES", TARGET_NAMES.to_vec())?;
    Ok(())
}

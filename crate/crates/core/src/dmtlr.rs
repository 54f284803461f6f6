//! The fused regressor `r = F(x1, x2; w_f, w_FT, w_MLP, w_r)` and its two
//! baselines, with a joint MSE training loop.
//!
//! ```text
//! image ─ backbone (w_f, frozen) ─ head (w_FT) ─ u ─┐
//!                                                   concat ─ fusion (w_r) ─ r
//! descriptors ─────────────── branch (w_MLP) ── v ─┘
//! ```

use std::fmt;
use std::path::Path;
use std::str::FromStr;
use std::time::Instant;

use serde::{Deserialize, Serialize};

use crate::checkpoint::{hash_params, Checkpoint, W_F, W_FT, W_MLP, W_R};
use crate::error::{Error, Result};
use crate::featurizer::{BackboneSpec, FineTuneHead, PretrainedBackbone};
use crate::nn::{concat, mse_loss, split, Activation, Adam, Layer, LayerSpec, Mode, ParamHost, ParamSet, Sequential};
use crate::pipeline::{batches, PreparedDataset};
use crate::rng::{derive_seed, seeded, Rng};
use crate::tensor::Tensor;

pub const DESCRIPTOR_BRANCH_DIMS: [usize; 2] = [100, 50];
pub const FUSION_DIMS: [usize; 2] = [1000, 100];
pub const STATS_ONLY_DIMS: [usize; 3] = [100, 100, 50];
pub const DEFAULT_DROPOUT: f64 = 0.5;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum ModelKind {
    #[serde(rename = "dmtlr")]
    Dmtlr,
    #[serde(rename = "image_only")]
    ImageOnly,
    #[serde(rename = "stats_only")]
    StatsOnly,
}

impl ModelKind {
    pub const ALL: [ModelKind; 3] = [ModelKind::Dmtlr, ModelKind::ImageOnly, ModelKind::StatsOnly];

    pub fn as_str(self) -> &'static str {
        match self {
            ModelKind::Dmtlr => "dmtlr",
            ModelKind::ImageOnly => "image_only",
            ModelKind::StatsOnly => "stats_only",
        }
    }

    pub fn uses_images(self) -> bool {
        self != ModelKind::StatsOnly
    }

    pub fn uses_descriptors(self) -> bool {
        self != ModelKind::ImageOnly
    }
}

impl fmt::Display for ModelKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for ModelKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.trim().to_ascii_lowercase().as_str() {
            "dmtlr" | "dmtl-r" => Ok(ModelKind::Dmtlr),
            "image" | "image_only" | "image-only" => Ok(ModelKind::ImageOnly),
            "stats" | "stats_only" | "stats-only" => Ok(ModelKind::StatsOnly),
            other => Err(Error::InvalidConfig(format!(
                "unknown model kind `{other}` (expected dmtlr, image or stats)"
            ))),
        }
    }
}

/// Image-branch state: frozen backbone plus its trainable head.
#[derive(Clone, Debug, PartialEq)]
struct ImageBranch {
    backbone: PretrainedBackbone,
    head: FineTuneHead,
}

#[derive(Clone, Debug, PartialEq)]
pub struct DmtlrModel {
    kind: ModelKind,
    image: Option<ImageBranch>,
    descriptor_branch: Option<Sequential>,
    fusion: Sequential,
    d_descriptor: usize,
    n_output: usize,
    dropout_rate: f64,
}

fn dense_stack(input: usize, hidden: &[usize], dropout: Option<f64>, output: Option<usize>) -> Vec<LayerSpec> {
    let mut specs = Vec::new();
    let mut width = input;
    for &h in hidden {
        specs.push(LayerSpec::dense(width, h, Activation::Relu));
        if let Some(rate) = dropout {
            specs.push(LayerSpec::Dropout { rate });
        }
        width = h;
    }
    if let Some(out) = output {
        specs.push(LayerSpec::dense(width, out, Activation::Linear));
    }
    specs
}

fn check_dims(d_descriptor: Option<usize>, n_output: usize) -> Result<()> {
    if d_descriptor == Some(0) {
        return Err(Error::InvalidModel("descriptor width must be at least 1".into()));
    }
    if n_output == 0 {
        return Err(Error::InvalidModel("output width must be at least 1".into()));
    }
    Ok(())
}

fn image_branch(backbone: &PretrainedBackbone, rng: &mut Rng) -> Result<ImageBranch> {
    if !backbone.is_frozen() {
        return Err(Error::BackboneNotFrozen("model assembly"));
    }
    Ok(ImageBranch {
        backbone: backbone.clone(),
        head: FineTuneHead::new(backbone.spec(), rng)?,
    })
}

/// Full multimodal regressor: `u` (fine-tune head dims) and `v`
/// (`d → 100 → 50`) concatenated into `1000 → 100 → n_output` with dropout
/// after each hidden fusion layer.
pub fn build_dmtlr(backbone: &PretrainedBackbone, d_descriptor: usize, n_output: usize, seed: u64) -> Result<DmtlrModel> {
    check_dims(Some(d_descriptor), n_output)?;
    let mut rng = seeded(seed);
    let image = image_branch(backbone, &mut rng)?;
    let branch = Sequential::from_specs(&dense_stack(d_descriptor, &DESCRIPTOR_BRANCH_DIMS, None, None), &mut rng)?;
    let fusion_in = backbone.spec().u_dim() + DESCRIPTOR_BRANCH_DIMS[1];
    let fusion = Sequential::from_specs(
        &dense_stack(fusion_in, &FUSION_DIMS, Some(DEFAULT_DROPOUT), Some(n_output)),
        &mut rng,
    )?;
    Ok(DmtlrModel {
        kind: ModelKind::Dmtlr,
        image: Some(image),
        descriptor_branch: Some(branch),
        fusion,
        d_descriptor,
        n_output,
        dropout_rate: DEFAULT_DROPOUT,
    })
}

/// Image-only baseline: `u → 1000 → 100 → n_output`.
pub fn build_image_only(backbone: &PretrainedBackbone, n_output: usize, seed: u64) -> Result<DmtlrModel> {
    check_dims(None, n_output)?;
    let mut rng = seeded(seed);
    let image = image_branch(backbone, &mut rng)?;
    let fusion = Sequential::from_specs(
        &dense_stack(backbone.spec().u_dim(), &FUSION_DIMS, Some(DEFAULT_DROPOUT), Some(n_output)),
        &mut rng,
    )?;
    Ok(DmtlrModel {
        kind: ModelKind::ImageOnly,
        image: Some(image),
        descriptor_branch: None,
        fusion,
        d_descriptor: 0,
        n_output,
        dropout_rate: DEFAULT_DROPOUT,
    })
}

/// Descriptor-only baseline: `d → 100 → 100 → 50 → n_output`, no dropout.
pub fn build_stats_only(d_descriptor: usize, n_output: usize, seed: u64) -> Result<DmtlrModel> {
    check_dims(Some(d_descriptor), n_output)?;
    let fusion = Sequential::from_specs(
        &dense_stack(d_descriptor, &STATS_ONLY_DIMS, None, Some(n_output)),
        &mut seeded(seed),
    )?;
    Ok(DmtlrModel {
        kind: ModelKind::StatsOnly,
        image: None,
        descriptor_branch: None,
        fusion,
        d_descriptor,
        n_output,
        dropout_rate: 0.0,
    })
}

/// Builds any of the three kinds; `backbone` is ignored for stats-only.
pub fn build_model(
    kind: ModelKind,
    backbone: Option<&PretrainedBackbone>,
    d_descriptor: usize,
    n_output: usize,
    seed: u64,
) -> Result<DmtlrModel> {
    let need = || backbone.ok_or_else(|| Error::InvalidModel(format!("{kind} needs a backbone")));
    match kind {
        ModelKind::Dmtlr => build_dmtlr(need()?, d_descriptor, n_output, seed),
        ModelKind::ImageOnly => build_image_only(need()?, n_output, seed),
        ModelKind::StatsOnly => build_stats_only(d_descriptor, n_output, seed),
    }
}

/// Inputs to the trainable part of a model. Backbone activations are
/// computed once, since `w_f` is frozen and the backbone is deterministic.
#[derive(Clone, Debug, PartialEq)]
pub struct ModelInputs {
    activations: Option<Tensor>,
    backbone_hash: Option<String>,
    descriptors: Tensor,
    targets: Option<Tensor>,
}

impl ModelInputs {
    /// Runs `backbone` (if given) over the dataset images.
    pub fn from_prepared(backbone: Option<&PretrainedBackbone>, data: &PreparedDataset) -> Result<Self> {
        let mut inputs = Self::new(backbone, &data.images, &data.descriptors)?;
        inputs.targets = Some(data.targets.clone());
        Ok(inputs)
    }

    pub fn new(backbone: Option<&PretrainedBackbone>, images: &Tensor, descriptors: &Tensor) -> Result<Self> {
        let (activations, backbone_hash) = match backbone {
            Some(b) => {
                if !b.is_frozen() {
                    return Err(Error::BackboneNotFrozen("featurization"));
                }
                let a = b.activations(images)?;
                if a.rows() != descriptors.rows() {
                    return Err(Error::ShapeMismatch {
                        layer: "model inputs".into(),
                        expected: vec![a.rows()],
                        actual: vec![descriptors.rows()],
                    });
                }
                (Some(a), Some(b.weight_hash()))
            }
            None => (None, None),
        };
        Ok(Self {
            activations,
            backbone_hash,
            descriptors: descriptors.clone(),
            targets: None,
        })
    }

    pub fn with_targets(mut self, targets: Tensor) -> Result<Self> {
        if targets.rows() != self.len() {
            return Err(Error::ShapeMismatch {
                layer: "model targets".into(),
                expected: vec![self.len()],
                actual: vec![targets.rows()],
            });
        }
        self.targets = Some(targets);
        Ok(self)
    }

    pub fn len(&self) -> usize {
        self.descriptors.rows()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    fn rows(&self, idx: &[usize]) -> Result<ModelInputs> {
        Ok(ModelInputs {
            activations: self.activations.as_ref().map(|a| a.select_rows(idx)).transpose()?,
            backbone_hash: self.backbone_hash.clone(),
            descriptors: self.descriptors.select_rows(idx)?,
            targets: self.targets.as_ref().map(|t| t.select_rows(idx)).transpose()?,
        })
    }

    fn targets(&self) -> Result<&Tensor> {
        self.targets
            .as_ref()
            .ok_or_else(|| Error::InvalidConfig("inputs carry no targets".into()))
    }
}

/// Activation records of one forward pass.
struct Trace {
    head: Vec<crate::nn::Cache>,
    branch: Vec<crate::nn::Cache>,
    fusion: Vec<crate::nn::Cache>,
    u_width: usize,
}

impl DmtlrModel {
    pub fn kind(&self) -> ModelKind {
        self.kind
    }

    pub fn n_output(&self) -> usize {
        self.n_output
    }

    pub fn d_descriptor(&self) -> usize {
        self.d_descriptor
    }

    pub fn dropout_rate(&self) -> f64 {
        self.dropout_rate
    }

    /// Replaces the rate of every fusion dropout layer. The statistics-only
    /// model has none, so the call only records the rate there.
    pub fn set_dropout_rate(&mut self, rate: f64) -> Result<()> {
        let mut layers = Vec::with_capacity(self.fusion.layers().len());
        for layer in self.fusion.layers() {
            layers.push(match layer.spec() {
                LayerSpec::Dropout { .. } => Layer::stateless(LayerSpec::Dropout { rate })?,
                _ => layer.clone(),
            });
        }
        self.fusion = Sequential::new(layers);
        self.dropout_rate = rate;
        Ok(())
    }

    pub fn backbone(&self) -> Option<&PretrainedBackbone> {
        self.image.as_ref().map(|i| &i.backbone)
    }

    /// Width of the concatenated fusion input.
    pub fn fusion_input_width(&self) -> usize {
        self.fusion.layers()[0].params().map_or(0, |p| p.weights.shape()[0])
    }

    /// Parameter sets grouped as `w_f`, `w_FT`, `w_MLP`, `w_r` (empty groups
    /// omitted).
    pub fn groups(&self) -> Vec<(&'static str, Vec<&ParamSet>)> {
        let mut g = Vec::new();
        if let Some(img) = &self.image {
            g.push((W_F, img.backbone.conv_params()));
            g.push((W_FT, img.head.param_sets().collect()));
        }
        if let Some(b) = &self.descriptor_branch {
            g.push((W_MLP, b.param_sets().collect()));
        }
        g.push((W_R, self.fusion.param_sets().collect()));
        g
    }

    pub fn num_trainable_params(&self) -> usize {
        self.trainable_sets().map(ParamSet::len).sum()
    }

    fn trainable_sets(&self) -> impl Iterator<Item = &ParamSet> {
        let head = self.image.iter().flat_map(|i| i.head.param_sets());
        let branch = self.descriptor_branch.iter().flat_map(Sequential::param_sets);
        head.chain(branch).chain(self.fusion.param_sets())
    }

    fn trainable_sets_mut(&mut self) -> impl Iterator<Item = &mut ParamSet> {
        let head = self.image.iter_mut().flat_map(|i| i.head.param_sets_mut());
        let branch = self.descriptor_branch.iter_mut().flat_map(Sequential::param_sets_mut);
        head.chain(branch).chain(self.fusion.param_sets_mut())
    }

    /// Output layer parameters (`w_r`'s last dense layer).
    pub fn output_layer_mut(&mut self) -> &mut ParamSet {
        self.fusion.param_sets_mut().last().expect("fusion ends in a dense layer")
    }

    pub fn output_layer(&self) -> &ParamSet {
        self.fusion.param_sets().last().expect("fusion ends in a dense layer")
    }

    fn check_inputs(&self, inputs: &ModelInputs) -> Result<()> {
        if self.kind.uses_descriptors() && inputs.descriptors.row_len() != self.d_descriptor {
            return Err(Error::ShapeMismatch {
                layer: "descriptor input".into(),
                expected: vec![inputs.len(), self.d_descriptor],
                actual: inputs.descriptors.shape().to_vec(),
            });
        }
        if let Some(img) = &self.image {
            if inputs.backbone_hash.as_deref() != Some(&img.backbone.weight_hash()) {
                return Err(Error::InvalidConfig(
                    "inputs were featurized with a different backbone".into(),
                ));
            }
        }
        Ok(())
    }

    fn forward(&self, inputs: &ModelInputs, mode: Mode, rng: &mut Rng) -> Result<(Tensor, Trace)> {
        let mut trace = Trace {
            head: Vec::new(),
            branch: Vec::new(),
            fusion: Vec::new(),
            u_width: 0,
        };
        let u = match &self.image {
            Some(img) => {
                let a = inputs.activations.as_ref().expect("checked by check_inputs");
                let (u, caches) = img.head.net.forward(a, mode, rng)?;
                trace.head = caches;
                trace.u_width = u.row_len();
                Some(u)
            }
            None => None,
        };
        let fusion_in = match (&self.descriptor_branch, u) {
            (Some(branch), Some(u)) => {
                let (v, caches) = branch.forward(&inputs.descriptors, mode, rng)?;
                trace.branch = caches;
                concat(&[&u, &v])?
            }
            (None, Some(u)) => u,
            (_, None) => inputs.descriptors.clone(),
        };
        let (out, caches) = self.fusion.forward(&fusion_in, mode, rng)?;
        trace.fusion = caches;
        Ok((out, trace))
    }

    fn backward(&mut self, trace: &Trace, grad: &Tensor) -> Result<()> {
        match (&mut self.image, &mut self.descriptor_branch) {
            (Some(img), Some(branch)) => {
                let g = self.fusion.backward(&trace.fusion, grad)?;
                let v_width = g.row_len() - trace.u_width;
                let parts = split(&g, &[trace.u_width, v_width])?;
                img.head.net.backward_params_only(&trace.head, &parts[0])?;
                branch.backward_params_only(&trace.branch, &parts[1])
            }
            (Some(img), None) => {
                let g = self.fusion.backward(&trace.fusion, grad)?;
                img.head.net.backward_params_only(&trace.head, &g)
            }
            (None, _) => self.fusion.backward_params_only(&trace.fusion, grad),
        }
    }

    /// Eval-mode image embedding `u`, or `None` for the statistics-only model.
    pub fn image_embedding(&self, inputs: &ModelInputs) -> Result<Option<Tensor>> {
        self.check_inputs(inputs)?;
        match &self.image {
            Some(img) => {
                let a = inputs.activations.as_ref().expect("checked by check_inputs");
                Ok(Some(img.head.net.infer(a)?))
            }
            None => Ok(None),
        }
    }

    /// Predictions from precomputed inputs.
    pub fn predict_inputs(&self, inputs: &ModelInputs, mode: Mode, rng: &mut Rng) -> Result<Tensor> {
        self.check_inputs(inputs)?;
        Ok(self.forward(inputs, mode, rng)?.0)
    }

    /// Eval-mode MSE over all of `inputs`.
    pub fn evaluate(&self, inputs: &ModelInputs) -> Result<f64> {
        let pred = self.predict_inputs(inputs, Mode::Eval, &mut seeded(0))?;
        Ok(mse_loss(&pred, inputs.targets()?)?.0)
    }

    /// Forward plus backward on one batch; gradients accumulate into the
    /// trainable parameter sets. Returns the loss.
    pub fn accumulate_gradients(&mut self, inputs: &ModelInputs, mode: Mode, rng: &mut Rng) -> Result<f64> {
        self.check_inputs(inputs)?;
        let (pred, trace) = self.forward(inputs, mode, rng)?;
        let (loss, grad) = mse_loss(&pred, inputs.targets()?)?;
        self.backward(&trace, &grad)?;
        Ok(loss)
    }

    pub fn zero_grad(&mut self) {
        self.trainable_sets_mut().for_each(ParamSet::zero_grad);
    }

    pub fn to_checkpoint(&self) -> Checkpoint {
        let header = serde_json::json!({
            "type": "model",
            "kind": self.kind,
            "backbone_spec": self.backbone().map(PretrainedBackbone::spec),
            "d_descriptor": self.d_descriptor,
            "n_output": self.n_output,
            "dropout_rate": self.dropout_rate,
        });
        Checkpoint {
            header,
            frozen: self.image.is_some(),
            sections: self
                .groups()
                .into_iter()
                .map(|(tag, sets)| (tag.to_string(), sets.into_iter().cloned().collect()))
                .collect(),
        }
    }

    pub fn from_checkpoint(ckpt: &Checkpoint) -> Result<Self> {
        let h = &ckpt.header;
        let bad = |what: &str| Error::Checkpoint(format!("model header field `{what}` missing or invalid"));
        let kind: ModelKind = serde_json::from_value(h["kind"].clone()).map_err(|_| bad("kind"))?;
        let d = h["d_descriptor"].as_u64().ok_or_else(|| bad("d_descriptor"))? as usize;
        let n_out = h["n_output"].as_u64().ok_or_else(|| bad("n_output"))? as usize;
        let section = |tag: &str| {
            ckpt.section(tag)
                .ok_or_else(|| Error::Checkpoint(format!("missing {tag} section")))
        };
        let backbone = if kind.uses_images() {
            let spec: BackboneSpec =
                serde_json::from_value(h["backbone_spec"].clone()).map_err(|_| bad("backbone_spec"))?;
            let bb_ckpt = Checkpoint {
                header: serde_json::json!({ "spec": spec }),
                frozen: true,
                sections: vec![(W_F.into(), section(W_F)?.to_vec())],
            };
            Some(PretrainedBackbone::from_checkpoint(&bb_ckpt)?)
        } else {
            None
        };
        let mut model = build_model(kind, backbone.as_ref(), d, n_out, 0)?;
        if let Some(img) = &mut model.image {
            img.head.net.load_param_sets(section(W_FT)?)?;
        }
        if let Some(b) = &mut model.descriptor_branch {
            b.load_param_sets(section(W_MLP)?)?;
        }
        model.fusion.load_param_sets(section(W_R)?)?;
        if let Some(rate) = h["dropout_rate"].as_f64() {
            if model.kind != ModelKind::StatsOnly {
                model.set_dropout_rate(rate)?;
            }
        }
        Ok(model)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        self.to_checkpoint().save(path)
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_checkpoint(&Checkpoint::load(path)?)
    }

    /// SHA-256 over every parameter group in checkpoint order.
    pub fn weight_hash(&self) -> String {
        hash_params(self.groups().into_iter().flat_map(|(_, sets)| sets))
    }
}

impl ParamHost for DmtlrModel {
    fn param_sets_mut(&mut self) -> Vec<&mut ParamSet> {
        self.trainable_sets_mut().collect()
    }
}

/// Predictions from raw image and descriptor batches.
pub fn predict(model: &DmtlrModel, images: &Tensor, descriptors: &Tensor, mode: Mode, rng: &mut Rng) -> Result<Tensor> {
    if model.kind.uses_images() && images.shape().first() != descriptors.shape().first() {
        return Err(Error::ShapeMismatch {
            layer: "predict".into(),
            expected: vec![images.shape().first().copied().unwrap_or(0)],
            actual: vec![descriptors.shape().first().copied().unwrap_or(0)],
        });
    }
    let inputs = ModelInputs::new(model.backbone(), images, descriptors)?;
    model.predict_inputs(&inputs, mode, rng)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub lr: f64,
    pub lr_decay: f64,
    pub seed: u64,
    pub n_output: usize,
    /// Permits a learning rate outside `[1e-4, 1e-3]`.
    pub allow_lr_override: bool,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            epochs: 20,
            batch_size: 32,
            lr: 5e-4,
            lr_decay: 0.95,
            seed: 0,
            n_output: 6,
            allow_lr_override: false,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.batch_size == 0 {
            return Err(Error::InvalidConfig("batch size must be at least 1".into()));
        }
        if !(self.lr > 0.0 && self.lr.is_finite()) {
            return Err(Error::InvalidConfig(format!("learning rate {} must be positive", self.lr)));
        }
        if !self.allow_lr_override && !(1e-4..=1e-3).contains(&self.lr) {
            return Err(Error::InvalidConfig(format!(
                "learning rate {} outside [1e-4, 1e-3]; set allow_lr_override to use it",
                self.lr
            )));
        }
        if !(self.lr_decay > 0.0 && self.lr_decay.is_finite()) {
            return Err(Error::InvalidConfig(format!("lr decay {} must be positive", self.lr_decay)));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainReport {
    /// Mean train-mode mini-batch loss per epoch.
    pub train_loss: Vec<f64>,
    /// Eval-mode loss over the full test set per epoch.
    pub test_loss: Vec<f64>,
    pub wall_time_secs: f64,
    /// Hash of all model weights after the final epoch.
    pub final_weights_hash: String,
}

impl TrainReport {
    /// Equality ignoring wall time.
    pub fn same_outcome(&self, other: &TrainReport) -> bool {
        self.train_loss == other.train_loss
            && self.test_loss == other.test_loss
            && self.final_weights_hash == other.final_weights_hash
    }
}

/// Trains on prepared datasets, featurizing images with the model's own
/// backbone first.
pub fn train(model: &mut DmtlrModel, train_set: &PreparedDataset, test_set: &PreparedDataset, config: &TrainConfig) -> Result<TrainReport> {
    config.validate()?;
    if train_set.len() < config.batch_size {
        return Err(Error::InvalidConfig(format!(
            "train set of {} rows is smaller than one batch of {}",
            train_set.len(),
            config.batch_size
        )));
    }
    let train_inputs = ModelInputs::from_prepared(model.backbone(), train_set)?;
    let test_inputs = ModelInputs::from_prepared(model.backbone(), test_set)?;
    train_on_inputs(model, &train_inputs, &test_inputs, config)
}

/// Training loop over precomputed inputs: per-epoch shuffled batches, one
/// Adam optimizer over every trainable group, lr multiplied by `lr_decay`
/// after each epoch.
pub fn train_on_inputs(
    model: &mut DmtlrModel,
    train_inputs: &ModelInputs,
    test_inputs: &ModelInputs,
    config: &TrainConfig,
) -> Result<TrainReport> {
    config.validate()?;
    if train_inputs.len() < config.batch_size {
        return Err(Error::InvalidConfig(format!(
            "train set of {} rows is smaller than one batch of {}",
            train_inputs.len(),
            config.batch_size
        )));
    }
    if train_inputs.targets()?.row_len() != model.n_output {
        return Err(Error::ShapeMismatch {
            layer: "training targets".into(),
            expected: vec![train_inputs.len(), model.n_output],
            actual: train_inputs.targets()?.shape().to_vec(),
        });
    }
    model.check_inputs(train_inputs)?;
    model.check_inputs(test_inputs)?;
    let start = Instant::now();
    let mut adam = Adam::new(model.trainable_sets(), config.lr);
    let mut rng = seeded(derive_seed(config.seed, 1));
    let shuffle_seed = derive_seed(config.seed, 2);
    let mut report = TrainReport {
        train_loss: Vec::with_capacity(config.epochs),
        test_loss: Vec::with_capacity(config.epochs),
        wall_time_secs: 0.0,
        final_weights_hash: String::new(),
    };
    let mut lr = config.lr;
    for epoch in 0..config.epochs {
        adam.set_lr(lr);
        let mut total = 0.0;
        for batch in batches(train_inputs.len(), config.batch_size, shuffle_seed, epoch)? {
            let b = train_inputs.rows(&batch)?;
            total += model.accumulate_gradients(&b, Mode::Train, &mut rng)? * batch.len() as f64;
            adam.step(model.trainable_sets_mut())?;
        }
        report.train_loss.push(total / train_inputs.len() as f64);
        report.test_loss.push(model.evaluate(test_inputs)?);
        lr *= config.lr_decay;
    }
    report.wall_time_secs = start.elapsed().as_secs_f64();
    report.final_weights_hash = model.weight_hash();
    Ok(report)
}

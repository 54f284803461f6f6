//! Convolutional backbone: construction, source-domain pretraining, freezing
//! and the fine-tunable featurization `u(x)`.

use rand::Rng as _;
use serde::{Deserialize, Serialize};

use crate::checkpoint::{hash_params, Checkpoint, W_F};
use crate::datagen::{time_bin, N_TIME_BINS};
use crate::error::{Error, Result};
use crate::nn::{softmax_cross_entropy, Activation, Adam, LayerSpec, Mode, ParamSet, Sequential};
use crate::pipeline::{batches, fit_channel_means, remove_channel_means, resize_images, split, RawDataset};
use crate::rng::{derive_seed, seeded, Rng};
use crate::tensor::Tensor;

/// Column of the descriptor table holding the total simulated time.
const TOTAL_TIME_COLUMN: usize = 5;

/// Fixed rescaling applied to centered pixel values on entry to the
/// backbone, mapping the 0-255 rendering range to unit scale.
pub const PIXEL_SCALE: f64 = 1.0 / 255.0;

/// Images pushed through the backbone at once when only activations are
/// needed.
const INFERENCE_CHUNK: usize = 32;

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct BackboneSpec {
    /// `(H, W, C)`
    pub input_size: (usize, usize, usize),
    /// `(channels, conv_count)` per block; each block ends in a 2×2 max-pool.
    pub blocks: Vec<(usize, usize)>,
    pub ft_head_dims: Vec<usize>,
}

impl Default for BackboneSpec {
    fn default() -> Self {
        Self {
            input_size: (64, 64, 3),
            blocks: vec![(16, 2), (32, 2), (64, 2)],
            ft_head_dims: vec![256, 128],
        }
    }
}

impl BackboneSpec {
    pub fn validate(&self) -> Result<()> {
        let bad = |field, reason: String| Err(Error::InvalidBackboneSpec { field, reason });
        let (h, w, c) = self.input_size;
        if h == 0 || w == 0 || c == 0 {
            return bad("input_size", format!("{:?} has a zero dimension", self.input_size));
        }
        if self.blocks.is_empty() {
            return bad("blocks", "at least one convolutional block is required".into());
        }
        if let Some(b) = self.blocks.iter().find(|(ch, n)| *ch == 0 || *n == 0) {
            return bad("blocks", format!("block {b:?} has a zero entry"));
        }
        let factor = 1usize
            .checked_shl(self.blocks.len() as u32)
            .filter(|f| *f <= h.min(w))
            .unwrap_or(0);
        if factor == 0 || h % factor != 0 || w % factor != 0 {
            return bad(
                "input_size",
                format!("{h}x{w} is not divisible by 2^{}", self.blocks.len()),
            );
        }
        if self.ft_head_dims.is_empty() || self.ft_head_dims.contains(&0) {
            return bad("ft_head_dims", format!("{:?} must be non-empty and positive", self.ft_head_dims));
        }
        Ok(())
    }

    /// Length of the flattened backbone activations.
    pub fn feature_len(&self) -> usize {
        let factor = 1 << self.blocks.len();
        let (h, w, _) = self.input_size;
        (h / factor) * (w / factor) * self.blocks.last().map_or(0, |b| b.0)
    }

    /// Width of the featurization `u`.
    pub fn u_dim(&self) -> usize {
        *self.ft_head_dims.last().unwrap_or(&0)
    }

    fn layer_specs(&self) -> Vec<LayerSpec> {
        let mut specs = Vec::new();
        let mut ch = self.input_size.2;
        for &(out, count) in &self.blocks {
            for _ in 0..count {
                specs.push(LayerSpec::conv(ch, out, 3, Activation::Relu));
                ch = out;
            }
            specs.push(LayerSpec::MaxPool2D { kernel: 2, stride: 2 });
        }
        specs.push(LayerSpec::Flatten);
        specs
    }
}

fn rescale(mut images: Tensor) -> Tensor {
    images.scale(PIXEL_SCALE);
    images
}

/// Outcome of the source-domain pretext task.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SourceTaskReport {
    pub epochs: usize,
    pub n_train: usize,
    pub n_heldout: usize,
    pub train_loss: Vec<f64>,
    pub initial_heldout_loss: f64,
    pub initial_heldout_accuracy: f64,
    pub heldout_loss: f64,
    pub heldout_accuracy: f64,
}

/// Convolutional featurization layers `w_f` plus their provenance.
#[derive(Clone, Debug, PartialEq)]
pub struct PretrainedBackbone {
    spec: BackboneSpec,
    net: Sequential,
    report: Option<SourceTaskReport>,
    frozen: bool,
}

pub fn build_backbone(spec: &BackboneSpec, seed: u64) -> Result<PretrainedBackbone> {
    spec.validate()?;
    let net = Sequential::from_specs(&spec.layer_specs(), &mut seeded(seed))?;
    Ok(PretrainedBackbone {
        spec: spec.clone(),
        net,
        report: None,
        frozen: false,
    })
}

impl PretrainedBackbone {
    pub fn spec(&self) -> &BackboneSpec {
        &self.spec
    }

    pub fn report(&self) -> Option<&SourceTaskReport> {
        self.report.as_ref()
    }

    pub fn is_frozen(&self) -> bool {
        self.frozen
    }

    pub fn conv_params(&self) -> Vec<&ParamSet> {
        self.net.param_sets().collect()
    }

    /// Marks every convolutional parameter set non-trainable. Idempotent.
    pub fn freeze(mut self) -> Self {
        self.net.set_trainable(false);
        self.frozen = true;
        self
    }

    /// SHA-256 of the exact `w_f` bits.
    pub fn weight_hash(&self) -> String {
        hash_params(self.net.param_sets())
    }

    fn check_images(&self, images: &Tensor) -> Result<()> {
        let (h, w, c) = self.spec.input_size;
        let s = images.shape();
        if s.len() != 4 || s[1..] != [h, w, c] {
            return Err(Error::ShapeMismatch {
                layer: "backbone input".into(),
                expected: vec![s.first().copied().unwrap_or(0), h, w, c],
                actual: s.to_vec(),
            });
        }
        Ok(())
    }

    /// Flattened eval-mode activations, `(n, feature_len)`.
    pub fn activations(&self, images: &Tensor) -> Result<Tensor> {
        self.check_images(images)?;
        let n = images.shape()[0];
        let mut data = Vec::with_capacity(n * self.spec.feature_len());
        for start in (0..n).step_by(INFERENCE_CHUNK) {
            let rows: Vec<usize> = (start..(start + INFERENCE_CHUNK).min(n)).collect();
            data.extend(self.net.infer(&rescale(images.select_rows(&rows)?))?.into_data());
        }
        Tensor::new(vec![n, self.spec.feature_len()], data)
    }

    pub fn to_checkpoint(&self) -> Checkpoint {
        Checkpoint {
            header: serde_json::json!({
                "type": "backbone",
                "spec": self.spec,
                "source_task": self.report,
            }),
            frozen: self.frozen,
            sections: vec![(W_F.into(), self.net.param_sets().cloned().collect())],
        }
    }

    pub fn from_checkpoint(ckpt: &Checkpoint) -> Result<Self> {
        let spec: BackboneSpec = serde_json::from_value(ckpt.header["spec"].clone())
            .map_err(|e| Error::Checkpoint(format!("backbone spec: {e}")))?;
        let report = match ckpt.header.get("source_task") {
            None | Some(serde_json::Value::Null) => None,
            Some(v) => Some(
                serde_json::from_value(v.clone())
                    .map_err(|e| Error::Checkpoint(format!("source task report: {e}")))?,
            ),
        };
        let mut backbone = build_backbone(&spec, 0)?;
        let sets = ckpt
            .section(W_F)
            .ok_or_else(|| Error::Checkpoint("missing w_f section".into()))?;
        backbone.net.load_param_sets(sets)?;
        backbone.report = report;
        Ok(if ckpt.frozen { backbone.freeze() } else { backbone })
    }

    pub fn save(&self, path: &std::path::Path) -> Result<()> {
        self.to_checkpoint().save(path)
    }

    pub fn load(path: &std::path::Path) -> Result<Self> {
        Self::from_checkpoint(&Checkpoint::load(path)?)
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct PretrainConfig {
    pub epochs: usize,
    pub lr: f64,
    pub batch_size: usize,
    pub seed: u64,
}

impl Default for PretrainConfig {
    fn default() -> Self {
        Self {
            epochs: 30,
            lr: 5e-4,
            batch_size: 8,
            seed: 0,
        }
    }
}

/// Trains the backbone on quench-time classification over a source-regime
/// dataset with a throwaway `Flatten → Dense(128, ReLU) → Dense(4)` head.
/// One third of the source rows is held out for the report.
pub fn pretrain_backbone(
    mut backbone: PretrainedBackbone,
    source: &RawDataset,
    config: &PretrainConfig,
) -> Result<PretrainedBackbone> {
    if backbone.frozen {
        return Err(Error::BackboneFrozen("pretraining"));
    }
    if source.is_empty() {
        return Err(Error::EmptyDataset("source dataset has no rows".into()));
    }
    if config.batch_size == 0 {
        return Err(Error::InvalidConfig("batch size must be at least 1".into()));
    }
    let plan = split(source.len(), derive_seed(config.seed, 0))?;
    let (h, w, _) = backbone.spec.input_size;
    let resized = resize_images(&source.images, (h, w))?;
    let means = fit_channel_means(&resized.select_rows(&plan.train)?)?;
    let images = remove_channel_means(&resized, &means)?;
    let labels: Vec<usize> = (0..source.len())
        .map(|i| time_bin(source.descriptors.row(i)[TOTAL_TIME_COLUMN]))
        .collect();
    let train_x = images.select_rows(&plan.train)?;
    let train_y: Vec<usize> = plan.train.iter().map(|&i| labels[i]).collect();
    let held_x = images.select_rows(&plan.test)?;
    let held_y: Vec<usize> = plan.test.iter().map(|&i| labels[i]).collect();

    let mut rng = seeded(derive_seed(config.seed, 1));
    let mut head = Sequential::from_specs(
        &[
            LayerSpec::dense(backbone.spec.feature_len(), 128, Activation::Relu),
            LayerSpec::dense(128, N_TIME_BINS, Activation::Linear),
        ],
        &mut rng,
    )?;
    let (initial_loss, initial_acc) = classify(&backbone, &head, &held_x, &held_y)?;
    let mut report = SourceTaskReport {
        epochs: config.epochs,
        n_train: plan.train.len(),
        n_heldout: plan.test.len(),
        train_loss: Vec::with_capacity(config.epochs),
        initial_heldout_loss: initial_loss,
        initial_heldout_accuracy: initial_acc,
        heldout_loss: initial_loss,
        heldout_accuracy: initial_acc,
    };
    if config.epochs == 0 {
        backbone.report = Some(report);
        return Ok(backbone);
    }

    let mut adam = Adam::new(backbone.net.param_sets().chain(head.param_sets()), config.lr);
    let shuffle_seed = derive_seed(config.seed, 2);
    let mut aug_rng = seeded(derive_seed(config.seed, 3));
    for epoch in 0..config.epochs {
        let mut total = 0.0;
        for batch in batches(train_x.rows(), config.batch_size, shuffle_seed, epoch)? {
            let x = rescale(augment(&train_x.select_rows(&batch)?, &mut aug_rng));
            let y: Vec<usize> = batch.iter().map(|&i| train_y[i]).collect();
            let (features, conv_caches) = backbone.net.forward(&x, Mode::Train, &mut rng)?;
            let (logits, head_caches) = head.forward(&features, Mode::Train, &mut rng)?;
            let (loss, grad) = softmax_cross_entropy(&logits, &y)?;
            total += loss * batch.len() as f64;
            let g = head.backward(&head_caches, &grad)?;
            backbone.net.backward_params_only(&conv_caches, &g)?;
            adam.step(backbone.net.param_sets_mut().chain(head.param_sets_mut()))?;
        }
        report.train_loss.push(total / train_x.rows() as f64);
    }
    let (loss, acc) = classify(&backbone, &head, &held_x, &held_y)?;
    report.heldout_loss = loss;
    report.heldout_accuracy = acc;
    backbone.report = Some(report);
    Ok(backbone)
}

/// Random periodic shift, axis flips and (for square images) transpose per
/// image. Source fields are periodic, so each variant is an equally valid
/// microstructure with the same quench time.
fn augment(images: &Tensor, rng: &mut Rng) -> Tensor {
    let s = images.shape();
    let (n, h, w, c) = (s[0], s[1], s[2], s[3]);
    let mut out = Tensor::zeros(s);
    let plane = h * w * c;
    for b in 0..n {
        let (dy, dx) = (rng.random_range(0..h), rng.random_range(0..w));
        let (fy, fx) = (rng.random::<bool>(), rng.random::<bool>());
        let transpose = h == w && rng.random::<bool>();
        let src = &images.data()[b * plane..(b + 1) * plane];
        let dst = &mut out.data_mut()[b * plane..(b + 1) * plane];
        for y in 0..h {
            for x in 0..w {
                let (mut sy, mut sx) = if transpose { (x, y) } else { (y, x) };
                if fy {
                    sy = h - 1 - sy;
                }
                if fx {
                    sx = w - 1 - sx;
                }
                sy = (sy + dy) % h;
                sx = (sx + dx) % w;
                let from = (sy * w + sx) * c;
                let to = (y * w + x) * c;
                dst[to..to + c].copy_from_slice(&src[from..from + c]);
            }
        }
    }
    out
}

fn classify(backbone: &PretrainedBackbone, head: &Sequential, x: &Tensor, y: &[usize]) -> Result<(f64, f64)> {
    if y.is_empty() {
        return Ok((f64::NAN, f64::NAN));
    }
    let logits = head.infer(&backbone.activations(x)?)?;
    let (loss, _) = softmax_cross_entropy(&logits, y)?;
    let correct = (0..logits.rows())
        .filter(|&i| {
            let row = logits.row(i);
            let best = (0..row.len()).fold(0, |b, j| if row[j] > row[b] { j } else { b });
            best == y[i]
        })
        .count();
    Ok((loss, correct as f64 / y.len() as f64))
}

/// Trainable dense layers `w_FT` mapping backbone activations to `u`.
#[derive(Clone, Debug, PartialEq)]
pub struct FineTuneHead {
    pub(crate) net: Sequential,
}

impl FineTuneHead {
    pub fn new(spec: &BackboneSpec, rng: &mut Rng) -> Result<Self> {
        spec.validate()?;
        let mut specs = Vec::new();
        let mut width = spec.feature_len();
        for &d in &spec.ft_head_dims {
            specs.push(LayerSpec::dense(width, d, Activation::Relu));
            width = d;
        }
        Ok(Self {
            net: Sequential::from_specs(&specs, rng)?,
        })
    }

    pub fn param_sets(&self) -> impl Iterator<Item = &ParamSet> {
        self.net.param_sets()
    }

    pub fn param_sets_mut(&mut self) -> impl Iterator<Item = &mut ParamSet> {
        self.net.param_sets_mut()
    }
}

/// `u(x)`: frozen backbone activations through the fine-tune head.
pub fn featurize(
    backbone: &PretrainedBackbone,
    head: &FineTuneHead,
    images: &Tensor,
    mode: Mode,
    rng: &mut Rng,
) -> Result<Tensor> {
    if !backbone.frozen {
        return Err(Error::BackboneNotFrozen("featurize"));
    }
    let activations = backbone.activations(images)?;
    Ok(head.net.forward(&activations, mode, rng)?.0)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn tiny() -> BackboneSpec {
        BackboneSpec {
            input_size: (8, 8, 3),
            blocks: vec![(4, 1), (6, 1)],
            ft_head_dims: vec![5, 3],
        }
    }

    #[test]
    fn default_feature_length() {
        let spec = BackboneSpec::default();
        assert_eq!(spec.feature_len(), 4096);
        assert_eq!(spec.u_dim(), 128);
        let b = build_backbone(&spec, 7).unwrap();
        assert_eq!(b.net.output_shape(&[1, 64, 64, 3]).unwrap(), vec![1, 4096]);
    }

    #[test]
    fn invalid_specs_name_the_field() {
        let mut s = tiny();
        s.blocks.clear();
        assert!(matches!(s.validate(), Err(Error::InvalidBackboneSpec { field: "blocks", .. })));
        let mut s = tiny();
        s.input_size = (10, 8, 3);
        assert!(matches!(s.validate(), Err(Error::InvalidBackboneSpec { field: "input_size", .. })));
        let mut s = tiny();
        s.ft_head_dims = vec![4, 0];
        assert!(matches!(s.validate(), Err(Error::InvalidBackboneSpec { field: "ft_head_dims", .. })));
    }

    #[test]
    fn seeded_build_is_deterministic() {
        assert_eq!(build_backbone(&tiny(), 7).unwrap(), build_backbone(&tiny(), 7).unwrap());
        assert_ne!(build_backbone(&tiny(), 7).unwrap(), build_backbone(&tiny(), 8).unwrap());
    }

    #[test]
    fn freeze_is_idempotent_and_required() {
        let b = build_backbone(&tiny(), 1).unwrap();
        let head = FineTuneHead::new(&tiny(), &mut seeded(2)).unwrap();
        let x = Tensor::zeros(&[2, 8, 8, 3]);
        assert!(matches!(
            featurize(&b, &head, &x, Mode::Eval, &mut seeded(0)),
            Err(Error::BackboneNotFrozen(_))
        ));
        let once = b.freeze();
        let twice = once.clone().freeze();
        assert_eq!(once, twice);
        assert!(once.conv_params().iter().all(|p| !p.trainable));
        let u = featurize(&once, &head, &x, Mode::Eval, &mut seeded(0)).unwrap();
        assert_eq!(u.shape(), &[2, 3]);
        assert!(u.data().iter().all(|&v| v == 0.0));
        let bad = Tensor::zeros(&[2, 8, 8, 1]);
        assert!(matches!(
            featurize(&once, &head, &bad, Mode::Eval, &mut seeded(0)),
            Err(Error::ShapeMismatch { .. })
        ));
    }

    #[test]
    fn checkpoint_round_trip() {
        let b = build_backbone(&tiny(), 3).unwrap().freeze();
        let back = PretrainedBackbone::from_checkpoint(&Checkpoint::from_bytes(&b.to_checkpoint().to_bytes()).unwrap())
            .unwrap();
        assert_eq!(back, b);
        assert_eq!(back.weight_hash(), b.weight_hash());
    }
}

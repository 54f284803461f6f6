//! Dataset loading, preprocessing, scaling, splitting and batching.
//!
//! Every fitted statistic (channel means, scalers) is computed from the
//! training split only and then applied unchanged to the test split.

use std::path::Path;

use rand::seq::SliceRandom;

use crate::datagen::{read_image, read_manifest, DatasetManifest, N_PARAMS, N_TARGETS};
use crate::error::{Error, Result};
use crate::rng::{derive_seed, seeded};
use crate::tensor::Tensor;

/// An in-memory dataset in manifest order.
#[derive(Clone, Debug, PartialEq)]
pub struct RawDataset {
    pub sample_ids: Vec<String>,
    /// `(n, H, W, C)`
    pub images: Tensor,
    /// `(n, 18)`
    pub descriptors: Tensor,
    /// `(n, 6)`
    pub targets: Tensor,
}

impl RawDataset {
    pub fn len(&self) -> usize {
        self.sample_ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.sample_ids.is_empty()
    }
}

/// Reads a manifest and every image it references.
pub fn load_dataset(manifest_path: &Path) -> Result<RawDataset> {
    let manifest = read_manifest(manifest_path)?;
    let base = manifest_path.parent().unwrap_or_else(|| Path::new("."));
    load_from_manifest(&manifest, base, manifest_path)
}

fn load_from_manifest(manifest: &DatasetManifest, base: &Path, manifest_path: &Path) -> Result<RawDataset> {
    if manifest.rows.is_empty() {
        return Err(Error::EmptyDataset(format!("{} has no rows", manifest_path.display())));
    }
    let mut images = Vec::with_capacity(manifest.rows.len());
    let mut image_shape: Option<Vec<usize>> = None;
    for (i, row) in manifest.rows.iter().enumerate() {
        let path = base.join(&row.image_file);
        if !path.is_file() {
            return Err(Error::Manifest {
                path: manifest_path.to_path_buf(),
                row: i + 2,
                reason: format!("image file {} does not exist", path.display()),
            });
        }
        let image = read_image(&path)?;
        match &image_shape {
            None => image_shape = Some(image.shape().to_vec()),
            Some(s) if s.as_slice() != image.shape() => {
                return Err(Error::Manifest {
                    path: manifest_path.to_path_buf(),
                    row: i + 2,
                    reason: format!("image {} has shape {:?}, expected {s:?}", path.display(), image.shape()),
                })
            }
            Some(_) => {}
        }
        images.push(image);
    }
    let refs: Vec<&Tensor> = images.iter().collect();
    let descriptors = manifest.rows.iter().map(|r| r.descriptors.clone()).collect::<Vec<_>>();
    let targets = manifest.rows.iter().map(|r| r.targets.clone()).collect::<Vec<_>>();
    debug_assert!(descriptors.iter().all(|d| d.len() == N_PARAMS));
    debug_assert!(targets.iter().all(|t| t.len() == N_TARGETS));
    Ok(RawDataset {
        sample_ids: manifest.rows.iter().map(|r| r.sample_id.clone()).collect(),
        images: Tensor::stack(&refs)?,
        descriptors: Tensor::from_rows(&descriptors)?,
        targets: Tensor::from_rows(&targets)?,
    })
}

/// Area-average downsampling of an `(n, H, W, C)` batch by integer factors.
/// Identity when the sizes already match.
pub fn resize_images(images: &Tensor, target_hw: (usize, usize)) -> Result<Tensor> {
    let &[n, h, w, c] = images.shape() else {
        return Err(Error::InvalidTensor(format!(
            "resize expects (n, H, W, C), got {:?}",
            images.shape()
        )));
    };
    let (th, tw) = target_hw;
    if th == 0 || tw == 0 || h % th != 0 || w % tw != 0 {
        return Err(Error::NonIntegerResize {
            from: (h, w),
            to: (th, tw),
        });
    }
    if (th, tw) == (h, w) {
        return Ok(images.clone());
    }
    let (fy, fx) = (h / th, w / tw);
    let inv = 1.0 / (fy * fx) as f64;
    let src = images.data();
    let mut out = vec![0.0; n * th * tw * c];
    for b in 0..n {
        for y in 0..th {
            for x in 0..tw {
                let dst = ((b * th + y) * tw + x) * c;
                for dy in 0..fy {
                    for dx in 0..fx {
                        let s = ((b * h + y * fy + dy) * w + x * fx + dx) * c;
                        for ch in 0..c {
                            out[dst + ch] += src[s + ch];
                        }
                    }
                }
                for v in &mut out[dst..dst + c] {
                    *v *= inv;
                }
            }
        }
    }
    Tensor::new(vec![n, th, tw, c], out)
}

/// Per-channel mean of an `(n, H, W, C)` batch.
pub fn fit_channel_means(images: &Tensor) -> Result<Vec<f64>> {
    if images.ndim() != 4 || images.shape()[0] == 0 {
        return Err(Error::InvalidTensor(format!(
            "channel means need a non-empty (n, H, W, C) batch, got {:?}",
            images.shape()
        )));
    }
    let c = images.shape()[3];
    let mut sums = vec![0.0; c];
    for px in images.data().chunks_exact(c) {
        for (s, v) in sums.iter_mut().zip(px) {
            *s += v;
        }
    }
    let count = (images.len() / c) as f64;
    Ok(sums.into_iter().map(|s| s / count).collect())
}

/// Subtracts `means` from each channel. Not idempotent: a second call shifts
/// again.
pub fn remove_channel_means(images: &Tensor, means: &[f64]) -> Result<Tensor> {
    let c = *images.shape().last().unwrap_or(&0);
    if images.ndim() != 4 || c != means.len() {
        return Err(Error::ShapeMismatch {
            layer: "remove_channel_means".into(),
            expected: vec![means.len()],
            actual: images.shape().to_vec(),
        });
    }
    let mut out = images.clone();
    for px in out.data_mut().chunks_exact_mut(c) {
        for (v, m) in px.iter_mut().zip(means) {
            *v -= m;
        }
    }
    Ok(out)
}

/// Column-wise standardization with population standard deviation.
#[derive(Clone, Debug, PartialEq, Default)]
pub struct StandardScaler {
    mean: Vec<f64>,
    std: Vec<f64>,
    /// Columns with zero variance; their divisor is 1.
    constant: Vec<bool>,
    fitted: bool,
}

impl StandardScaler {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn fit(data: &Tensor) -> Result<Self> {
        if data.ndim() != 2 || data.rows() == 0 {
            return Err(Error::EmptyDataset(format!(
                "scaler needs a non-empty 2-D table, got {:?}",
                data.shape()
            )));
        }
        let (n, d) = (data.rows(), data.row_len());
        let mut mean = vec![0.0; d];
        for i in 0..n {
            for (m, v) in mean.iter_mut().zip(data.row(i)) {
                *m += v;
            }
        }
        mean.iter_mut().for_each(|m| *m /= n as f64);
        let mut var = vec![0.0; d];
        for i in 0..n {
            for ((s, v), m) in var.iter_mut().zip(data.row(i)).zip(&mean) {
                *s += (v - m) * (v - m);
            }
        }
        let mut std = Vec::with_capacity(d);
        let mut constant = Vec::with_capacity(d);
        for s in var {
            let sd = (s / n as f64).sqrt();
            let flat = sd == 0.0;
            constant.push(flat);
            std.push(if flat { 1.0 } else { sd });
        }
        Ok(Self {
            mean,
            std,
            constant,
            fitted: true,
        })
    }

    pub fn is_fitted(&self) -> bool {
        self.fitted
    }

    pub fn mean(&self) -> &[f64] {
        &self.mean
    }

    pub fn std(&self) -> &[f64] {
        &self.std
    }

    pub fn constant_columns(&self) -> Vec<usize> {
        self.constant
            .iter()
            .enumerate()
            .filter_map(|(i, &c)| c.then_some(i))
            .collect()
    }

    pub fn transform(&self, data: &Tensor) -> Result<Tensor> {
        self.apply(data, |v, m, s| (v - m) / s)
    }

    pub fn inverse_transform(&self, data: &Tensor) -> Result<Tensor> {
        self.apply(data, |v, m, s| v * s + m)
    }

    fn apply(&self, data: &Tensor, f: impl Fn(f64, f64, f64) -> f64) -> Result<Tensor> {
        if !self.fitted {
            return Err(Error::NotFitted);
        }
        if data.ndim() != 2 || data.row_len() != self.mean.len() {
            return Err(Error::ShapeMismatch {
                layer: "StandardScaler".into(),
                expected: vec![data.shape().first().copied().unwrap_or(0), self.mean.len()],
                actual: data.shape().to_vec(),
            });
        }
        let d = self.mean.len();
        let mut out = data.clone();
        for row in out.data_mut().chunks_exact_mut(d) {
            for ((v, m), s) in row.iter_mut().zip(&self.mean).zip(&self.std) {
                *v = f(*v, *m, *s);
            }
        }
        Ok(out)
    }
}

/// Train/test partition of `0..n`.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct SplitPlan {
    pub train: Vec<usize>,
    pub test: Vec<usize>,
    pub seed: u64,
}

/// Number of training rows for `n` samples: `round(2n / 3)`.
pub fn train_size(n: usize) -> usize {
    (2 * n + 1) / 3
}

/// Random 2/3 : 1/3 split. Both index lists are returned sorted.
pub fn split(n: usize, seed: u64) -> Result<SplitPlan> {
    if n < 3 {
        return Err(Error::TooFewValues { needed: 3, got: n });
    }
    let mut order: Vec<usize> = (0..n).collect();
    order.shuffle(&mut seeded(seed));
    let cut = train_size(n);
    let mut train = order[..cut].to_vec();
    let mut test = order[cut..].to_vec();
    train.sort_unstable();
    test.sort_unstable();
    Ok(SplitPlan { train, test, seed })
}

/// Shuffled mini-batches of row positions `0..n` for one epoch. The order
/// depends only on `(seed, epoch)`; the final partial batch is kept.
pub fn batches(n: usize, batch_size: usize, seed: u64, epoch: usize) -> Result<Vec<Vec<usize>>> {
    if batch_size < 1 {
        return Err(Error::InvalidConfig("batch size must be at least 1".into()));
    }
    let mut order: Vec<usize> = (0..n).collect();
    order.shuffle(&mut seeded(derive_seed(seed, epoch as u64)));
    Ok(order.chunks(batch_size).map(<[usize]>::to_vec).collect())
}

/// Which target columns a model regresses.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum TargetSelection {
    All,
    /// Zero-based column index.
    Single(usize),
}

impl TargetSelection {
    pub fn columns(self) -> Vec<usize> {
        match self {
            TargetSelection::All => (0..N_TARGETS).collect(),
            TargetSelection::Single(i) => vec![i],
        }
    }

    pub fn width(self) -> usize {
        self.columns().len()
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum SplitTag {
    Train,
    Test,
}

/// Model-ready rows: centered images, scaled descriptors and targets.
#[derive(Clone, Debug, PartialEq)]
pub struct PreparedDataset {
    pub sample_ids: Vec<String>,
    pub images: Tensor,
    pub descriptors: Tensor,
    pub targets: Tensor,
    pub split: SplitTag,
}

impl PreparedDataset {
    pub fn len(&self) -> usize {
        self.sample_ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.sample_ids.is_empty()
    }
}

/// Statistics fitted on a training split.
#[derive(Clone, Debug, PartialEq)]
pub struct Preprocessor {
    pub input_hw: (usize, usize),
    pub channel_means: Vec<f64>,
    pub descriptor_scaler: StandardScaler,
    pub target_scaler: StandardScaler,
    pub target_columns: Vec<usize>,
}

impl Preprocessor {
    /// Fits every statistic on the `plan.train` rows of `raw`.
    pub fn fit(raw: &RawDataset, plan: &SplitPlan, targets: TargetSelection, input_hw: (usize, usize)) -> Result<Self> {
        if let TargetSelection::Single(i) = targets {
            if i >= raw.targets.row_len() {
                return Err(Error::InvalidConfig(format!(
                    "target index {i} out of range for {} targets",
                    raw.targets.row_len()
                )));
            }
        }
        let target_columns = targets.columns();
        let images = resize_images(&raw.images.select_rows(&plan.train)?, input_hw)?;
        let train_targets = select_columns(&raw.targets.select_rows(&plan.train)?, &target_columns)?;
        Ok(Self {
            input_hw,
            channel_means: fit_channel_means(&images)?,
            descriptor_scaler: StandardScaler::fit(&raw.descriptors.select_rows(&plan.train)?)?,
            target_scaler: StandardScaler::fit(&train_targets)?,
            target_columns,
        })
    }

    pub fn apply(&self, raw: &RawDataset, rows: &[usize], tag: SplitTag) -> Result<PreparedDataset> {
        let images = resize_images(&raw.images.select_rows(rows)?, self.input_hw)?;
        let targets = select_columns(&raw.targets.select_rows(rows)?, &self.target_columns)?;
        Ok(PreparedDataset {
            sample_ids: rows.iter().map(|&r| raw.sample_ids[r].clone()).collect(),
            images: remove_channel_means(&images, &self.channel_means)?,
            descriptors: self.descriptor_scaler.transform(&raw.descriptors.select_rows(rows)?)?,
            targets: self.target_scaler.transform(&targets)?,
            split: tag,
        })
    }

    /// Maps scaled predictions back to physical target units.
    pub fn unscale_targets(&self, scaled: &Tensor) -> Result<Tensor> {
        self.target_scaler.inverse_transform(scaled)
    }
}

/// Splits, fits on the train rows and prepares both halves.
pub fn prepare(
    raw: &RawDataset,
    plan: &SplitPlan,
    targets: TargetSelection,
    input_hw: (usize, usize),
) -> Result<(Preprocessor, PreparedDataset, PreparedDataset)> {
    let pre = Preprocessor::fit(raw, plan, targets, input_hw)?;
    let train = pre.apply(raw, &plan.train, SplitTag::Train)?;
    let test = pre.apply(raw, &plan.test, SplitTag::Test)?;
    Ok((pre, train, test))
}

pub fn select_columns(table: &Tensor, columns: &[usize]) -> Result<Tensor> {
    let d = table.row_len();
    if let Some(&bad) = columns.iter().find(|&&c| c >= d) {
        return Err(Error::InvalidTensor(format!("column {bad} out of range for width {d}")));
    }
    let mut data = Vec::with_capacity(table.rows() * columns.len());
    for i in 0..table.rows() {
        let row = table.row(i);
        data.extend(columns.iter().map(|&c| row[c]));
    }
    Tensor::new(vec![table.rows(), columns.len()], data)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn resize_examples() {
        let block = Tensor::new(vec![1, 2, 2, 1], vec![0.0, 0.0, 2.0, 2.0]).unwrap();
        assert_eq!(resize_images(&block, (1, 1)).unwrap().data(), &[1.0]);
        let flat = Tensor::filled(&[2, 128, 128, 3], 42.5);
        let small = resize_images(&flat, (64, 64)).unwrap();
        assert_eq!(small.shape(), &[2, 64, 64, 3]);
        assert!(small.data().iter().all(|&v| v == 42.5));
        let same = Tensor::filled(&[1, 64, 64, 3], 3.0);
        assert_eq!(resize_images(&same, (64, 64)).unwrap(), same);
        assert!(matches!(
            resize_images(&same, (48, 48)),
            Err(Error::NonIntegerResize { .. })
        ));
    }

    #[test]
    fn channel_mean_removal() {
        let img = Tensor::filled(&[2, 4, 4, 3], 100.0);
        let means = fit_channel_means(&img).unwrap();
        assert_eq!(means, vec![100.0; 3]);
        let centered = remove_channel_means(&img, &means).unwrap();
        assert!(centered.data().iter().all(|&v| v == 0.0));
        let twice = remove_channel_means(&centered, &means).unwrap();
        assert!(twice.data().iter().all(|&v| v == -100.0));
    }

    #[test]
    fn scaler_examples() {
        let col = Tensor::new(vec![2, 1], vec![0.0, 2.0]).unwrap();
        let s = StandardScaler::fit(&col).unwrap();
        assert_eq!(s.transform(&col).unwrap().data(), &[-1.0, 1.0]);
        let flat = Tensor::new(vec![3, 1], vec![5.0; 3]).unwrap();
        let s = StandardScaler::fit(&flat).unwrap();
        assert_eq!(s.transform(&flat).unwrap().data(), &[0.0; 3]);
        assert_eq!(s.constant_columns(), vec![0]);
        assert!(matches!(StandardScaler::new().transform(&col), Err(Error::NotFitted)));
    }

    #[test]
    fn split_sizes() {
        for (n, tr, te) in [(2500, 1667, 833), (900, 600, 300), (3, 2, 1), (4, 3, 1)] {
            let p = split(n, 1).unwrap();
            assert_eq!((p.train.len(), p.test.len()), (tr, te), "n = {n}");
        }
        assert!(split(2, 0).is_err());
    }

    #[test]
    fn batches_keep_partial_and_cover() {
        let b = batches(70, 32, 5, 0).unwrap();
        assert_eq!(b.iter().map(Vec::len).collect::<Vec<_>>(), vec![32, 32, 6]);
        let mut all: Vec<usize> = b.concat();
        all.sort_unstable();
        assert_eq!(all, (0..70).collect::<Vec<_>>());
        assert_ne!(b, batches(70, 32, 5, 1).unwrap());
        assert!(batches(10, 0, 0, 0).is_err());
    }
}

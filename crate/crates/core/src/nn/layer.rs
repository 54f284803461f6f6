//! Layer kinds with forward/backward passes.
//!
//! Image tensors are NHWC: `(batch, height, width, channels)`. Dense inputs are
//! `(batch, features)`. Dense weights are stored `(in_dim, out_dim)` and conv
//! weights `(kernel, kernel, in_ch, out_ch)`, so both reduce to a single GEMM
//! against the row-major input (im2col for conv).

use rand::Rng as _;
use serde::{Deserialize, Serialize};

use super::gemm::gemm;
use super::init;
use crate::error::{Error, Result};
use crate::rng::Rng;
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum Activation {
    Relu,
    Linear,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum Padding {
    Valid,
    Same,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Mode {
    Train,
    Eval,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub enum LayerSpec {
    Dense {
        in_dim: usize,
        out_dim: usize,
        activation: Activation,
    },
    Conv2D {
        in_ch: usize,
        out_ch: usize,
        kernel: usize,
        stride: usize,
        padding: Padding,
        activation: Activation,
    },
    MaxPool2D {
        kernel: usize,
        stride: usize,
    },
    Flatten,
    Dropout {
        rate: f64,
    },
    /// Joins `(batch, w_i)` inputs along the feature axis.
    Concat {
        widths: Vec<usize>,
    },
}

impl LayerSpec {
    pub fn dense(in_dim: usize, out_dim: usize, activation: Activation) -> Self {
        LayerSpec::Dense {
            in_dim,
            out_dim,
            activation,
        }
    }

    pub fn conv(in_ch: usize, out_ch: usize, kernel: usize, activation: Activation) -> Self {
        LayerSpec::Conv2D {
            in_ch,
            out_ch,
            kernel,
            stride: 1,
            padding: Padding::Same,
            activation,
        }
    }

    pub fn name(&self) -> String {
        match self {
            LayerSpec::Dense { in_dim, out_dim, .. } => format!("Dense({in_dim},{out_dim})"),
            LayerSpec::Conv2D {
                in_ch,
                out_ch,
                kernel,
                ..
            } => format!("Conv2D({in_ch},{out_ch},{kernel}x{kernel})"),
            LayerSpec::MaxPool2D { kernel, stride } => format!("MaxPool2D({kernel},{stride})"),
            LayerSpec::Flatten => "Flatten".into(),
            LayerSpec::Dropout { rate } => format!("Dropout({rate})"),
            LayerSpec::Concat { widths } => format!("Concat({widths:?})"),
        }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |msg: String| Err(Error::InvalidLayer(format!("{}: {msg}", self.name())));
        match *self {
            LayerSpec::Dense { in_dim, out_dim, .. } if in_dim == 0 || out_dim == 0 => {
                bad("dimensions must be positive".into())
            }
            LayerSpec::Conv2D {
                in_ch,
                out_ch,
                kernel,
                stride,
                ..
            } if in_ch == 0 || out_ch == 0 || kernel == 0 || stride == 0 => {
                bad("channels, kernel and stride must be >= 1".into())
            }
            LayerSpec::MaxPool2D { kernel, stride } if kernel == 0 || stride == 0 => {
                bad("kernel and stride must be >= 1".into())
            }
            LayerSpec::Dropout { rate } if !(0.0..1.0).contains(&rate) => {
                bad(format!("rate {rate} outside [0, 1)"))
            }
            LayerSpec::Concat { ref widths } if widths.is_empty() || widths.contains(&0) => {
                bad("needs at least one positive width".into())
            }
            _ => Ok(()),
        }
    }

    pub fn has_params(&self) -> bool {
        matches!(self, LayerSpec::Dense { .. } | LayerSpec::Conv2D { .. })
    }

    /// Output shape for a given input shape, or a diagnostic naming both.
    pub fn output_shape(&self, input: &[usize]) -> Result<Vec<usize>> {
        let mismatch = |expected: Vec<usize>| Error::ShapeMismatch {
            layer: self.name(),
            expected,
            actual: input.to_vec(),
        };
        match *self {
            LayerSpec::Dense { in_dim, out_dim, .. } => {
                if input.len() != 2 || input[1] != in_dim {
                    return Err(mismatch(vec![input.first().copied().unwrap_or(1), in_dim]));
                }
                Ok(vec![input[0], out_dim])
            }
            LayerSpec::Conv2D {
                in_ch,
                out_ch,
                kernel,
                stride,
                padding,
                ..
            } => {
                if input.len() != 4 || input[3] != in_ch {
                    return Err(mismatch(vec![
                        input.first().copied().unwrap_or(1),
                        input.get(1).copied().unwrap_or(kernel),
                        input.get(2).copied().unwrap_or(kernel),
                        in_ch,
                    ]));
                }
                let geom = ConvGeometry::new(input[1], input[2], kernel, stride, padding)
                    .ok_or_else(|| mismatch(vec![input[0], kernel, kernel, in_ch]))?;
                Ok(vec![input[0], geom.out_h, geom.out_w, out_ch])
            }
            LayerSpec::MaxPool2D { kernel, stride } => {
                if input.len() != 4 || input[1] < kernel || input[2] < kernel {
                    return Err(mismatch(vec![
                        input.first().copied().unwrap_or(1),
                        kernel,
                        kernel,
                        input.get(3).copied().unwrap_or(1),
                    ]));
                }
                Ok(vec![
                    input[0],
                    (input[1] - kernel) / stride + 1,
                    (input[2] - kernel) / stride + 1,
                    input[3],
                ])
            }
            LayerSpec::Flatten => {
                if input.len() < 2 {
                    return Err(mismatch(vec![input.first().copied().unwrap_or(1), 1]));
                }
                Ok(vec![input[0], input[1..].iter().product()])
            }
            LayerSpec::Dropout { .. } => Ok(input.to_vec()),
            LayerSpec::Concat { ref widths } => {
                Ok(vec![input.first().copied().unwrap_or(1), widths.iter().sum()])
            }
        }
    }
}

#[derive(Clone, Copy, Debug)]
struct ConvGeometry {
    in_h: usize,
    in_w: usize,
    out_h: usize,
    out_w: usize,
    pad_top: usize,
    pad_left: usize,
}

impl ConvGeometry {
    fn new(in_h: usize, in_w: usize, kernel: usize, stride: usize, padding: Padding) -> Option<Self> {
        match padding {
            Padding::Valid => {
                if in_h < kernel || in_w < kernel {
                    return None;
                }
                Some(Self {
                    in_h,
                    in_w,
                    out_h: (in_h - kernel) / stride + 1,
                    out_w: (in_w - kernel) / stride + 1,
                    pad_top: 0,
                    pad_left: 0,
                })
            }
            Padding::Same => {
                let out_h = in_h.div_ceil(stride);
                let out_w = in_w.div_ceil(stride);
                let pad_h = ((out_h - 1) * stride + kernel).saturating_sub(in_h);
                let pad_w = ((out_w - 1) * stride + kernel).saturating_sub(in_w);
                Some(Self {
                    in_h,
                    in_w,
                    out_h,
                    out_w,
                    pad_top: pad_h / 2,
                    pad_left: pad_w / 2,
                })
            }
        }
    }
}

/// Trainable tensors of one layer together with their accumulated gradients.
#[derive(Clone, Debug, PartialEq)]
pub struct ParamSet {
    pub weights: Tensor,
    pub biases: Tensor,
    pub weight_grad: Tensor,
    pub bias_grad: Tensor,
    pub trainable: bool,
}

impl ParamSet {
    pub fn new(weights: Tensor, biases: Tensor) -> Self {
        let weight_grad = Tensor::zeros(weights.shape());
        let bias_grad = Tensor::zeros(biases.shape());
        Self {
            weights,
            biases,
            weight_grad,
            bias_grad,
            trainable: true,
        }
    }

    pub fn zero_grad(&mut self) {
        self.weight_grad.fill(0.0);
        self.bias_grad.fill(0.0);
    }

    pub fn len(&self) -> usize {
        self.weights.len() + self.biases.len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

/// Activation record produced by [`Layer::forward`] and consumed by
/// [`Layer::backward`].
#[derive(Clone, Debug)]
pub struct Cache {
    kind: CacheKind,
}

#[derive(Clone, Debug)]
enum CacheKind {
    Dense { input: Tensor, output: Tensor },
    Conv { input: Tensor, output: Tensor },
    MaxPool { input_shape: Vec<usize>, argmax: Vec<usize> },
    Flatten { input_shape: Vec<usize> },
    Dropout { shape: Vec<usize>, mask: Option<Vec<f64>> },
    Concat { widths: Vec<usize> },
}

impl Cache {
    fn label(&self) -> &'static str {
        match self.kind {
            CacheKind::Dense { .. } => "Dense",
            CacheKind::Conv { .. } => "Conv2D",
            CacheKind::MaxPool { .. } => "MaxPool2D",
            CacheKind::Flatten { .. } => "Flatten",
            CacheKind::Dropout { .. } => "Dropout",
            CacheKind::Concat { .. } => "Concat",
        }
    }

    /// Dropout keep-mask (already scaled by `1 / (1 - rate)`), if one was drawn.
    pub fn dropout_mask(&self) -> Option<&[f64]> {
        match &self.kind {
            CacheKind::Dropout { mask, .. } => mask.as_deref(),
            _ => None,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Layer {
    spec: LayerSpec,
    params: Option<ParamSet>,
}

impl Layer {
    /// Builds a layer with freshly initialized parameters (He-normal for ReLU,
    /// Glorot-uniform for linear outputs, zero biases).
    pub fn new(spec: LayerSpec, rng: &mut Rng) -> Result<Self> {
        spec.validate()?;
        let params = match spec {
            LayerSpec::Dense {
                in_dim,
                out_dim,
                activation,
            } => Some(ParamSet::new(
                init::weights(&[in_dim, out_dim], in_dim, out_dim, activation, rng),
                Tensor::zeros(&[out_dim]),
            )),
            LayerSpec::Conv2D {
                in_ch,
                out_ch,
                kernel,
                activation,
                ..
            } => {
                let fan_in = kernel * kernel * in_ch;
                let fan_out = kernel * kernel * out_ch;
                Some(ParamSet::new(
                    init::weights(&[kernel, kernel, in_ch, out_ch], fan_in, fan_out, activation, rng),
                    Tensor::zeros(&[out_ch]),
                ))
            }
            _ => None,
        };
        Ok(Self { spec, params })
    }

    /// Builds a layer around existing parameters, checking their shapes.
    pub fn with_params(spec: LayerSpec, params: Option<ParamSet>) -> Result<Self> {
        spec.validate()?;
        let expected = match spec {
            LayerSpec::Dense { in_dim, out_dim, .. } => Some((vec![in_dim, out_dim], out_dim)),
            LayerSpec::Conv2D {
                in_ch,
                out_ch,
                kernel,
                ..
            } => Some((vec![kernel, kernel, in_ch, out_ch], out_ch)),
            _ => None,
        };
        match (expected, &params) {
            (None, None) => {}
            (Some((w, b)), Some(p)) if p.weights.shape() == w && p.biases.shape() == [b] => {}
            _ => {
                return Err(Error::InvalidLayer(format!(
                    "{}: parameter shapes do not match the layer",
                    spec.name()
                )))
            }
        }
        Ok(Self { spec, params })
    }

    /// A parameter-free layer (pooling, flatten, dropout, concat).
    pub fn stateless(spec: LayerSpec) -> Result<Self> {
        Self::with_params(spec, None)
    }

    pub fn spec(&self) -> &LayerSpec {
        &self.spec
    }

    pub fn params(&self) -> Option<&ParamSet> {
        self.params.as_ref()
    }

    pub fn params_mut(&mut self) -> Option<&mut ParamSet> {
        self.params.as_mut()
    }

    pub fn forward(&self, input: &Tensor, mode: Mode, rng: &mut Rng) -> Result<(Tensor, Cache)> {
        let out_shape = self.spec.output_shape(input.shape())?;
        let (output, kind) = match self.spec {
            LayerSpec::Dense { activation, .. } => {
                let p = self.expect_params()?;
                let output = dense_forward(p, input, &out_shape, activation);
                let kind = CacheKind::Dense {
                    input: input.clone(),
                    output: output.clone(),
                };
                (output, kind)
            }
            LayerSpec::Conv2D {
                kernel,
                stride,
                padding,
                activation,
                ..
            } => {
                let p = self.expect_params()?;
                let geom = conv_geometry(input.shape(), kernel, stride, padding);
                let output = conv_forward(p, input, &out_shape, kernel, stride, geom, activation);
                let kind = CacheKind::Conv {
                    input: input.clone(),
                    output: output.clone(),
                };
                (output, kind)
            }
            LayerSpec::MaxPool2D { kernel, stride } => {
                let (output, argmax) = maxpool_forward(input, &out_shape, kernel, stride);
                let kind = CacheKind::MaxPool {
                    input_shape: input.shape().to_vec(),
                    argmax,
                };
                (output, kind)
            }
            LayerSpec::Flatten => (
                input.clone().reshape(&out_shape)?,
                CacheKind::Flatten {
                    input_shape: input.shape().to_vec(),
                },
            ),
            LayerSpec::Dropout { rate } => {
                if mode == Mode::Eval || rate == 0.0 {
                    (
                        input.clone(),
                        CacheKind::Dropout {
                            shape: input.shape().to_vec(),
                            mask: None,
                        },
                    )
                } else {
                    let scale = 1.0 / (1.0 - rate);
                    let mask: Vec<f64> = (0..input.len())
                        .map(|_| if rng.random::<f64>() < rate { 0.0 } else { scale })
                        .collect();
                    let data = input.data().iter().zip(&mask).map(|(x, m)| x * m).collect();
                    (
                        Tensor::new(input.shape().to_vec(), data)?,
                        CacheKind::Dropout {
                            shape: input.shape().to_vec(),
                            mask: Some(mask),
                        },
                    )
                }
            }
            LayerSpec::Concat { .. } => {
                return Err(Error::InvalidLayer(
                    "Concat takes several inputs; use forward_many".into(),
                ))
            }
        };
        Ok((output, Cache { kind }))
    }

    /// Forward pass for multi-input layers (Concat).
    pub fn forward_many(&self, inputs: &[&Tensor]) -> Result<(Tensor, Cache)> {
        let LayerSpec::Concat { ref widths } = self.spec else {
            return Err(Error::InvalidLayer(format!(
                "{} takes a single input; use forward",
                self.spec.name()
            )));
        };
        let out = concat(inputs)?;
        let actual: Vec<usize> = inputs.iter().map(|t| t.shape()[1]).collect();
        if &actual != widths {
            return Err(Error::ShapeMismatch {
                layer: self.spec.name(),
                expected: widths.clone(),
                actual,
            });
        }
        Ok((
            out,
            Cache {
                kind: CacheKind::Concat {
                    widths: widths.clone(),
                },
            },
        ))
    }

    /// Backpropagates `grad_out`, accumulating parameter gradients and
    /// returning the gradient with respect to the layer input.
    pub fn backward(&mut self, cache: &Cache, grad_out: &Tensor) -> Result<Tensor> {
        self.backward_inner(cache, grad_out, true)
            .map(|g| g.expect("input gradient requested"))
    }

    /// Like [`Layer::backward`] but skips the input gradient; used for the
    /// first layer of a stack where nothing upstream needs it.
    pub fn backward_params_only(&mut self, cache: &Cache, grad_out: &Tensor) -> Result<()> {
        self.backward_inner(cache, grad_out, false).map(|_| ())
    }

    /// Backward pass for Concat: splits `grad_out` into per-input slices.
    pub fn backward_many(&self, cache: &Cache, grad_out: &Tensor) -> Result<Vec<Tensor>> {
        match (&self.spec, &cache.kind) {
            (LayerSpec::Concat { .. }, CacheKind::Concat { widths }) => split(grad_out, widths),
            _ => Err(self.cache_mismatch(cache)),
        }
    }

    fn backward_inner(
        &mut self,
        cache: &Cache,
        grad_out: &Tensor,
        want_input_grad: bool,
    ) -> Result<Option<Tensor>> {
        let name = self.spec.name();
        let check_grad = |expected: &[usize]| -> Result<()> {
            if grad_out.shape() != expected {
                return Err(Error::ShapeMismatch {
                    layer: name.clone(),
                    expected: expected.to_vec(),
                    actual: grad_out.shape().to_vec(),
                });
            }
            Ok(())
        };
        match (&self.spec, &cache.kind) {
            (LayerSpec::Dense { activation, .. }, CacheKind::Dense { input, output }) => {
                check_grad(output.shape())?;
                let activation = *activation;
                let p = self.params.as_mut().expect("dense layer has params");
                Ok(dense_backward(p, input, output, grad_out, activation, want_input_grad))
            }
            (
                LayerSpec::Conv2D {
                    kernel,
                    stride,
                    padding,
                    activation,
                    ..
                },
                CacheKind::Conv { input, output },
            ) => {
                check_grad(output.shape())?;
                let (kernel, stride, activation) = (*kernel, *stride, *activation);
                let geom = conv_geometry(input.shape(), kernel, stride, *padding);
                let p = self.params.as_mut().expect("conv layer has params");
                Ok(conv_backward(
                    p,
                    input,
                    output,
                    grad_out,
                    kernel,
                    stride,
                    geom,
                    activation,
                    want_input_grad,
                ))
            }
            (LayerSpec::MaxPool2D { .. }, CacheKind::MaxPool { input_shape, argmax }) => {
                if grad_out.len() != argmax.len() {
                    return Err(Error::ShapeMismatch {
                        layer: name,
                        expected: vec![argmax.len()],
                        actual: grad_out.shape().to_vec(),
                    });
                }
                if !want_input_grad {
                    return Ok(None);
                }
                let mut grad_in = Tensor::zeros(input_shape);
                let gi = grad_in.data_mut();
                for (&src, &g) in argmax.iter().zip(grad_out.data()) {
                    gi[src] += g;
                }
                Ok(Some(grad_in))
            }
            (LayerSpec::Flatten, CacheKind::Flatten { input_shape }) => {
                check_grad(&[input_shape[0], input_shape[1..].iter().product()])?;
                Ok(Some(grad_out.clone().reshape(input_shape)?))
            }
            (LayerSpec::Dropout { .. }, CacheKind::Dropout { shape, mask }) => {
                check_grad(shape)?;
                Ok(Some(match mask {
                    None => grad_out.clone(),
                    Some(mask) => Tensor::new(
                        shape.clone(),
                        grad_out.data().iter().zip(mask).map(|(g, m)| g * m).collect(),
                    )?,
                }))
            }
            _ => Err(self.cache_mismatch(cache)),
        }
    }

    fn expect_params(&self) -> Result<&ParamSet> {
        self.params
            .as_ref()
            .ok_or_else(|| Error::InvalidLayer(format!("{} has no parameters", self.spec.name())))
    }

    fn cache_mismatch(&self, cache: &Cache) -> Error {
        Error::CacheMismatch {
            layer: self.spec.name(),
            cache: cache.label().into(),
        }
    }
}

/// Concatenates `(batch, w_i)` tensors along the feature axis.
pub fn concat(inputs: &[&Tensor]) -> Result<Tensor> {
    let first = inputs
        .first()
        .ok_or_else(|| Error::InvalidLayer("Concat needs at least one input".into()))?;
    let batch = first.shape()[0];
    for t in inputs {
        if t.ndim() != 2 || t.shape()[0] != batch {
            return Err(Error::ShapeMismatch {
                layer: "Concat".into(),
                expected: vec![batch, t.shape().last().copied().unwrap_or(0)],
                actual: t.shape().to_vec(),
            });
        }
    }
    let total: usize = inputs.iter().map(|t| t.shape()[1]).sum();
    let mut data = Vec::with_capacity(batch * total);
    for b in 0..batch {
        for t in inputs {
            data.extend_from_slice(t.row(b));
        }
    }
    Tensor::new(vec![batch, total], data)
}

/// Inverse of [`concat`].
pub fn split(joined: &Tensor, widths: &[usize]) -> Result<Vec<Tensor>> {
    let total: usize = widths.iter().sum();
    if joined.ndim() != 2 || joined.shape()[1] != total {
        return Err(Error::ShapeMismatch {
            layer: "Concat".into(),
            expected: vec![joined.shape()[0], total],
            actual: joined.shape().to_vec(),
        });
    }
    let batch = joined.shape()[0];
    let mut parts: Vec<Vec<f64>> = widths.iter().map(|w| Vec::with_capacity(batch * w)).collect();
    for b in 0..batch {
        let row = joined.row(b);
        let mut offset = 0;
        for (part, &w) in parts.iter_mut().zip(widths) {
            part.extend_from_slice(&row[offset..offset + w]);
            offset += w;
        }
    }
    parts
        .into_iter()
        .zip(widths)
        .map(|(data, &w)| Tensor::new(vec![batch, w], data))
        .collect()
}

fn apply_activation(data: &mut [f64], activation: Activation) {
    if activation == Activation::Relu {
        data.iter_mut().for_each(|x| *x = x.max(0.0));
    }
}

/// `grad_out ⊙ act'(output)`, where the ReLU derivative is read off the output.
fn activation_grad(grad_out: &Tensor, output: &Tensor, activation: Activation) -> Vec<f64> {
    match activation {
        Activation::Linear => grad_out.data().to_vec(),
        Activation::Relu => grad_out
            .data()
            .iter()
            .zip(output.data())
            .map(|(&g, &y)| if y > 0.0 { g } else { 0.0 })
            .collect(),
    }
}

fn add_bias_rows(data: &mut [f64], bias: &[f64]) {
    for row in data.chunks_exact_mut(bias.len()) {
        row.iter_mut().zip(bias).for_each(|(x, b)| *x += b);
    }
}

fn accumulate_bias_grad(bias_grad: &mut [f64], dz: &[f64]) {
    for row in dz.chunks_exact(bias_grad.len()) {
        bias_grad.iter_mut().zip(row).for_each(|(g, d)| *g += d);
    }
}

fn dense_forward(p: &ParamSet, input: &Tensor, out_shape: &[usize], act: Activation) -> Tensor {
    let (batch, in_dim, out_dim) = (out_shape[0], input.shape()[1], out_shape[1]);
    let mut out = vec![0.0; batch * out_dim];
    gemm(batch, in_dim, out_dim, input.data(), false, p.weights.data(), false, &mut out, 0.0);
    add_bias_rows(&mut out, p.biases.data());
    apply_activation(&mut out, act);
    Tensor::new(out_shape.to_vec(), out).expect("dense output shape")
}

fn dense_backward(
    p: &mut ParamSet,
    input: &Tensor,
    output: &Tensor,
    grad_out: &Tensor,
    act: Activation,
    want_input_grad: bool,
) -> Option<Tensor> {
    let (batch, in_dim, out_dim) = (input.shape()[0], input.shape()[1], output.shape()[1]);
    let dz = activation_grad(grad_out, output, act);
    gemm(in_dim, batch, out_dim, input.data(), true, &dz, false, p.weight_grad.data_mut(), 1.0);
    accumulate_bias_grad(p.bias_grad.data_mut(), &dz);
    want_input_grad.then(|| {
        let mut gi = vec![0.0; batch * in_dim];
        gemm(batch, out_dim, in_dim, &dz, false, p.weights.data(), true, &mut gi, 0.0);
        Tensor::new(input.shape().to_vec(), gi).expect("dense grad shape")
    })
}

fn conv_geometry(input: &[usize], kernel: usize, stride: usize, padding: Padding) -> ConvGeometry {
    ConvGeometry::new(input[1], input[2], kernel, stride, padding).expect("validated conv geometry")
}

/// Unrolls one NHWC sample into `(out_h·out_w) × (k·k·c)` patch rows.
fn im2col(sample: &[f64], channels: usize, kernel: usize, stride: usize, g: ConvGeometry, cols: &mut [f64]) {
    let row_len = kernel * kernel * channels;
    for oy in 0..g.out_h {
        for ox in 0..g.out_w {
            let row = &mut cols[(oy * g.out_w + ox) * row_len..][..row_len];
            for ky in 0..kernel {
                let iy = (oy * stride + ky) as isize - g.pad_top as isize;
                for kx in 0..kernel {
                    let ix = (ox * stride + kx) as isize - g.pad_left as isize;
                    let dst = &mut row[(ky * kernel + kx) * channels..][..channels];
                    if iy < 0 || ix < 0 || iy >= g.in_h as isize || ix >= g.in_w as isize {
                        dst.fill(0.0);
                    } else {
                        let src = (iy as usize * g.in_w + ix as usize) * channels;
                        dst.copy_from_slice(&sample[src..src + channels]);
                    }
                }
            }
        }
    }
}

/// Scatter-adds patch-row gradients back onto one NHWC sample.
fn col2im(cols: &[f64], channels: usize, kernel: usize, stride: usize, g: ConvGeometry, sample: &mut [f64]) {
    let row_len = kernel * kernel * channels;
    for oy in 0..g.out_h {
        for ox in 0..g.out_w {
            let row = &cols[(oy * g.out_w + ox) * row_len..][..row_len];
            for ky in 0..kernel {
                let iy = (oy * stride + ky) as isize - g.pad_top as isize;
                if iy < 0 || iy >= g.in_h as isize {
                    continue;
                }
                for kx in 0..kernel {
                    let ix = (ox * stride + kx) as isize - g.pad_left as isize;
                    if ix < 0 || ix >= g.in_w as isize {
                        continue;
                    }
                    let src = &row[(ky * kernel + kx) * channels..][..channels];
                    let dst = (iy as usize * g.in_w + ix as usize) * channels;
                    sample[dst..dst + channels]
                        .iter_mut()
                        .zip(src)
                        .for_each(|(d, s)| *d += s);
                }
            }
        }
    }
}

fn conv_forward(
    p: &ParamSet,
    input: &Tensor,
    out_shape: &[usize],
    kernel: usize,
    stride: usize,
    g: ConvGeometry,
    act: Activation,
) -> Tensor {
    let (batch, in_ch, out_ch) = (input.shape()[0], input.shape()[3], out_shape[3]);
    let patches = g.out_h * g.out_w;
    let row_len = kernel * kernel * in_ch;
    let in_stride = g.in_h * g.in_w * in_ch;
    let mut cols = vec![0.0; patches * row_len];
    let mut out = vec![0.0; batch * patches * out_ch];
    for b in 0..batch {
        im2col(&input.data()[b * in_stride..][..in_stride], in_ch, kernel, stride, g, &mut cols);
        let dst = &mut out[b * patches * out_ch..][..patches * out_ch];
        gemm(patches, row_len, out_ch, &cols, false, p.weights.data(), false, dst, 0.0);
    }
    add_bias_rows(&mut out, p.biases.data());
    apply_activation(&mut out, act);
    Tensor::new(out_shape.to_vec(), out).expect("conv output shape")
}

#[allow(clippy::too_many_arguments)]
fn conv_backward(
    p: &mut ParamSet,
    input: &Tensor,
    output: &Tensor,
    grad_out: &Tensor,
    kernel: usize,
    stride: usize,
    g: ConvGeometry,
    act: Activation,
    want_input_grad: bool,
) -> Option<Tensor> {
    let (batch, in_ch, out_ch) = (input.shape()[0], input.shape()[3], output.shape()[3]);
    let patches = g.out_h * g.out_w;
    let row_len = kernel * kernel * in_ch;
    let in_stride = g.in_h * g.in_w * in_ch;
    let dz = activation_grad(grad_out, output, act);
    accumulate_bias_grad(p.bias_grad.data_mut(), &dz);
    let mut cols = vec![0.0; patches * row_len];
    let mut dcols = vec![0.0; patches * row_len];
    let mut grad_in = want_input_grad.then(|| vec![0.0; input.len()]);
    for b in 0..batch {
        let dz_b = &dz[b * patches * out_ch..][..patches * out_ch];
        im2col(&input.data()[b * in_stride..][..in_stride], in_ch, kernel, stride, g, &mut cols);
        gemm(row_len, patches, out_ch, &cols, true, dz_b, false, p.weight_grad.data_mut(), 1.0);
        if let Some(gi) = grad_in.as_mut() {
            gemm(patches, out_ch, row_len, dz_b, false, p.weights.data(), true, &mut dcols, 0.0);
            col2im(&dcols, in_ch, kernel, stride, g, &mut gi[b * in_stride..][..in_stride]);
        }
    }
    grad_in.map(|gi| Tensor::new(input.shape().to_vec(), gi).expect("conv grad shape"))
}

fn maxpool_forward(input: &Tensor, out_shape: &[usize], kernel: usize, stride: usize) -> (Tensor, Vec<usize>) {
    let [batch, h, w, c] = [input.shape()[0], input.shape()[1], input.shape()[2], input.shape()[3]];
    let (oh, ow) = (out_shape[1], out_shape[2]);
    let x = input.data();
    let mut out = Vec::with_capacity(batch * oh * ow * c);
    let mut argmax = Vec::with_capacity(out.capacity());
    for b in 0..batch {
        for oy in 0..oh {
            for ox in 0..ow {
                for ch in 0..c {
                    let mut best = f64::NEG_INFINITY;
                    let mut best_idx = 0;
                    for ky in 0..kernel {
                        for kx in 0..kernel {
                            let idx = ((b * h + oy * stride + ky) * w + ox * stride + kx) * c + ch;
                            if x[idx] > best {
                                best = x[idx];
                                best_idx = idx;
                            }
                        }
                    }
                    out.push(best);
                    argmax.push(best_idx);
                }
            }
        }
    }
    (
        Tensor::new(out_shape.to_vec(), out).expect("pool output shape"),
        argmax,
    )
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::seeded;

    fn identity_dense(n: usize, act: Activation) -> Layer {
        let mut w = Tensor::zeros(&[n, n]);
        for i in 0..n {
            w.data_mut()[i * n + i] = 1.0;
        }
        Layer::with_params(LayerSpec::dense(n, n, act), Some(ParamSet::new(w, Tensor::zeros(&[n])))).unwrap()
    }

    #[test]
    fn relu_dense_clamps_negatives() {
        let layer = identity_dense(2, Activation::Relu);
        let x = Tensor::new(vec![1, 2], vec![-1.0, 2.0]).unwrap();
        let (y, _) = layer.forward(&x, Mode::Eval, &mut seeded(0)).unwrap();
        assert_eq!(y.data(), &[0.0, 2.0]);
    }

    #[test]
    fn one_by_one_identity_conv() {
        let spec = LayerSpec::Conv2D {
            in_ch: 1,
            out_ch: 1,
            kernel: 1,
            stride: 1,
            padding: Padding::Valid,
            activation: Activation::Linear,
        };
        let p = ParamSet::new(Tensor::filled(&[1, 1, 1, 1], 1.0), Tensor::zeros(&[1]));
        let layer = Layer::with_params(spec, Some(p)).unwrap();
        let x = Tensor::new(vec![1, 3, 2, 1], vec![1.0, -2.0, 3.5, 0.0, 7.0, -0.25]).unwrap();
        let (y, _) = layer.forward(&x, Mode::Eval, &mut seeded(0)).unwrap();
        assert_eq!(y, x);
    }

    #[test]
    fn all_ones_kernel_sums_receptive_field() {
        let spec = LayerSpec::Conv2D {
            in_ch: 1,
            out_ch: 1,
            kernel: 3,
            stride: 1,
            padding: Padding::Valid,
            activation: Activation::Linear,
        };
        let p = ParamSet::new(Tensor::filled(&[3, 3, 1, 1], 1.0), Tensor::zeros(&[1]));
        let layer = Layer::with_params(spec, Some(p)).unwrap();
        let x = Tensor::filled(&[1, 3, 3, 1], 1.0);
        let (y, _) = layer.forward(&x, Mode::Eval, &mut seeded(0)).unwrap();
        // direct summation over the 3x3 receptive field of ones
        let oracle: f64 = (0..9).map(|_| 1.0 * 1.0).sum();
        assert_eq!(y.shape(), &[1, 1, 1, 1]);
        assert_eq!(y.data(), &[oracle]);
        assert_eq!(oracle, 9.0);
    }

    #[test]
    fn same_padding_strided_shape() {
        let spec = LayerSpec::Conv2D {
            in_ch: 2,
            out_ch: 3,
            kernel: 3,
            stride: 2,
            padding: Padding::Same,
            activation: Activation::Relu,
        };
        assert_eq!(spec.output_shape(&[4, 7, 8, 2]).unwrap(), vec![4, 4, 4, 3]);
        let valid = LayerSpec::Conv2D {
            in_ch: 2,
            out_ch: 3,
            kernel: 3,
            stride: 2,
            padding: Padding::Valid,
            activation: Activation::Relu,
        };
        assert_eq!(valid.output_shape(&[4, 7, 8, 2]).unwrap(), vec![4, 3, 3, 3]);
    }

    #[test]
    fn shape_mismatch_names_layer_and_shapes() {
        let layer = identity_dense(3, Activation::Linear);
        let x = Tensor::zeros(&[2, 4]);
        let err = layer.forward(&x, Mode::Eval, &mut seeded(0)).unwrap_err();
        let msg = err.to_string();
        assert!(msg.contains("Dense(3,3)"), "{msg}");
        assert!(msg.contains("[2, 3]") && msg.contains("[2, 4]"), "{msg}");
    }

    #[test]
    fn zero_grad_out_gives_zero_grads() {
        let mut layer = Layer::new(LayerSpec::dense(4, 3, Activation::Linear), &mut seeded(1)).unwrap();
        let x = Tensor::new(vec![2, 4], (0..8).map(|i| i as f64 - 3.0).collect()).unwrap();
        let (y, cache) = layer.forward(&x, Mode::Train, &mut seeded(0)).unwrap();
        let gi = layer.backward(&cache, &Tensor::zeros(y.shape())).unwrap();
        assert!(gi.data().iter().all(|&g| g == 0.0));
        let p = layer.params().unwrap();
        assert!(p.weight_grad.data().iter().all(|&g| g == 0.0));
        assert!(p.bias_grad.data().iter().all(|&g| g == 0.0));
    }

    #[test]
    fn concat_backward_partitions_gradient() {
        let layer = Layer::stateless(LayerSpec::Concat { widths: vec![3, 2] }).unwrap();
        let a = Tensor::new(vec![2, 3], vec![1.0, 2.0, 3.0, 4.0, 5.0, 6.0]).unwrap();
        let b = Tensor::new(vec![2, 2], vec![7.0, 8.0, 9.0, 10.0]).unwrap();
        let (joined, cache) = layer.forward_many(&[&a, &b]).unwrap();
        assert_eq!(joined.data(), &[1.0, 2.0, 3.0, 7.0, 8.0, 4.0, 5.0, 6.0, 9.0, 10.0]);
        let g = Tensor::new(vec![2, 5], (0..10).map(|i| i as f64 * 0.5).collect()).unwrap();
        let parts = layer.backward_many(&cache, &g).unwrap();
        assert_eq!(parts[0].data(), &[0.0, 0.5, 1.0, 2.5, 3.0, 3.5]);
        assert_eq!(parts[1].data(), &[1.5, 2.0, 4.0, 4.5]);
    }

    #[test]
    fn dropout_eval_is_identity_and_train_masks_consistently() {
        let mut layer = Layer::stateless(LayerSpec::Dropout { rate: 0.5 }).unwrap();
        let x = Tensor::filled(&[4, 8], 3.0);
        let (y, _) = layer.forward(&x, Mode::Eval, &mut seeded(0)).unwrap();
        assert_eq!(y, x);
        let (y, cache) = layer.forward(&x, Mode::Train, &mut seeded(9)).unwrap();
        let mask = cache.dropout_mask().unwrap().to_vec();
        for ((yv, m), xv) in y.data().iter().zip(&mask).zip(x.data()) {
            assert_eq!(*yv, xv * m);
            assert!(*m == 0.0 || *m == 2.0);
        }
        let g = Tensor::filled(&[4, 8], 1.0);
        let gi = layer.backward(&cache, &g).unwrap();
        assert_eq!(gi.data(), mask.as_slice());
    }

    #[test]
    fn cache_from_another_layer_is_rejected() {
        let dense = identity_dense(2, Activation::Linear);
        let mut pool = Layer::stateless(LayerSpec::MaxPool2D { kernel: 2, stride: 2 }).unwrap();
        let x = Tensor::zeros(&[1, 2]);
        let (y, cache) = dense.forward(&x, Mode::Eval, &mut seeded(0)).unwrap();
        assert!(matches!(pool.backward(&cache, &y), Err(Error::CacheMismatch { .. })));
    }

    #[test]
    fn invalid_specs_rejected() {
        assert!(LayerSpec::Dropout { rate: 1.0 }.validate().is_err());
        assert!(LayerSpec::Dropout { rate: -0.1 }.validate().is_err());
        assert!(LayerSpec::conv(1, 1, 0, Activation::Relu).validate().is_err());
        assert!(LayerSpec::MaxPool2D { kernel: 2, stride: 0 }.validate().is_err());
    }

    #[test]
    fn maxpool_routes_gradient_to_argmax() {
        let mut pool = Layer::stateless(LayerSpec::MaxPool2D { kernel: 2, stride: 2 }).unwrap();
        let x = Tensor::new(vec![1, 2, 2, 1], vec![1.0, 4.0, 3.0, 2.0]).unwrap();
        let (y, cache) = pool.forward(&x, Mode::Eval, &mut seeded(0)).unwrap();
        assert_eq!(y.data(), &[4.0]);
        let gi = pool.backward(&cache, &Tensor::filled(&[1, 1, 1, 1], 5.0)).unwrap();
        assert_eq!(gi.data(), &[0.0, 5.0, 0.0, 0.0]);
    }
}

//! Central finite-difference gradient checking.

use super::layer::ParamSet;
use super::loss::mse_loss;
use super::sequential::Sequential;
use super::Mode;
use crate::error::Result;
use crate::rng::seeded;
use crate::tensor::Tensor;

pub const FD_STEP: f64 = 1e-6;

/// Entries checked per parameter tensor; larger tensors are strided.
const MAX_CHECKS_PER_TENSOR: usize = 48;

/// Anything owning an ordered list of parameter sets.
pub trait ParamHost {
    fn param_sets_mut(&mut self) -> Vec<&mut ParamSet>;
}

impl ParamHost for Sequential {
    fn param_sets_mut(&mut self) -> Vec<&mut ParamSet> {
        Sequential::param_sets_mut(self).collect()
    }
}

/// Max relative error `|a - n| / max(1e-8, |a| + |n|)` between analytic and
/// central-difference gradients of an MSE-trained sequential network, with
/// dropout in eval mode.
pub fn gradient_check(network: &mut Sequential, input: &Tensor, target: &Tensor) -> Result<f64> {
    check_gradients(
        network,
        |net| {
            let pred = net.infer(input)?;
            Ok(mse_loss(&pred, target)?.0)
        },
        |net| {
            net.zero_grad();
            let (pred, caches) = net.forward(input, Mode::Eval, &mut seeded(0))?;
            let (_, grad) = mse_loss(&pred, target)?;
            net.backward(&caches, &grad)?;
            Ok(())
        },
    )
}

/// Generic driver: `backprop` must leave fresh analytic gradients in every
/// trainable parameter set; `loss` must evaluate the same objective without
/// side effects. Frozen parameter sets are skipped.
pub fn check_gradients<M: ParamHost>(
    model: &mut M,
    mut loss: impl FnMut(&M) -> Result<f64>,
    mut backprop: impl FnMut(&mut M) -> Result<()>,
) -> Result<f64> {
    backprop(model)?;
    let analytic: Vec<Option<(Vec<f64>, Vec<f64>)>> = model
        .param_sets_mut()
        .into_iter()
        .map(|p| {
            p.trainable
                .then(|| (p.weight_grad.data().to_vec(), p.bias_grad.data().to_vec()))
        })
        .collect();

    let mut worst: f64 = 0.0;
    for (set, grads) in analytic.iter().enumerate() {
        let Some((wg, bg)) = grads else { continue };
        for (is_bias, g) in [(false, wg), (true, bg)] {
            for i in sample_indices(g.len()) {
                let numeric = central_difference(model, &mut loss, set, is_bias, i)?;
                let a = g[i];
                let rel = (a - numeric).abs() / (a.abs() + numeric.abs()).max(1e-8);
                worst = worst.max(rel);
            }
        }
    }
    Ok(worst)
}

fn sample_indices(len: usize) -> Vec<usize> {
    if len <= MAX_CHECKS_PER_TENSOR {
        (0..len).collect()
    } else {
        (0..MAX_CHECKS_PER_TENSOR)
            .map(|k| k * len / MAX_CHECKS_PER_TENSOR)
            .collect()
    }
}

fn central_difference<M: ParamHost>(
    model: &mut M,
    loss: &mut impl FnMut(&M) -> Result<f64>,
    set: usize,
    is_bias: bool,
    index: usize,
) -> Result<f64> {
    let poke = |model: &mut M, value: Option<f64>, delta: f64| -> f64 {
        let mut sets = model.param_sets_mut();
        let t = if is_bias {
            &mut sets[set].biases
        } else {
            &mut sets[set].weights
        };
        let slot = &mut t.data_mut()[index];
        let old = *slot;
        *slot = value.unwrap_or(old + delta);
        old
    };
    let original = poke(model, None, FD_STEP);
    let plus = loss(model)?;
    poke(model, Some(original - FD_STEP), 0.0);
    let minus = loss(model)?;
    poke(model, Some(original), 0.0);
    Ok((plus - minus) / (2.0 * FD_STEP))
}

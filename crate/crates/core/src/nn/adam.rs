//! Adam with bias correction.

use super::layer::ParamSet;
use crate::error::{Error, Result};
use crate::tensor::Tensor;

#[derive(Clone, Debug, PartialEq)]
pub struct AdamState {
    /// First and second moments of the weights.
    pub m: Tensor,
    pub v: Tensor,
    /// First and second moments of the biases.
    pub m_bias: Tensor,
    pub v_bias: Tensor,
    pub step_count: u64,
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub epsilon: f64,
}

impl AdamState {
    /// Fresh state with the usual defaults (β1 = 0.9, β2 = 0.999, ε = 1e-8).
    pub fn new(params: &ParamSet, lr: f64) -> Self {
        Self {
            m: Tensor::zeros(params.weights.shape()),
            v: Tensor::zeros(params.weights.shape()),
            m_bias: Tensor::zeros(params.biases.shape()),
            v_bias: Tensor::zeros(params.biases.shape()),
            step_count: 0,
            lr,
            beta1: 0.9,
            beta2: 0.999,
            epsilon: 1e-8,
        }
    }
}

/// Applies one Adam update to a trainable parameter set and clears its
/// gradients. Frozen parameter sets are refused untouched.
pub fn adam_step(params: &mut ParamSet, state: &mut AdamState) -> Result<()> {
    if !params.trainable {
        return Err(Error::FrozenParams);
    }
    if state.m.shape() != params.weights.shape() || state.m_bias.shape() != params.biases.shape() {
        return Err(Error::ShapeMismatch {
            layer: "adam_step".into(),
            expected: params.weights.shape().to_vec(),
            actual: state.m.shape().to_vec(),
        });
    }
    state.step_count += 1;
    let t = state.step_count as i32;
    let c1 = 1.0 - state.beta1.powi(t);
    let c2 = 1.0 - state.beta2.powi(t);
    let hp = (state.lr, state.beta1, state.beta2, state.epsilon, c1, c2);
    update(&mut params.weights, &params.weight_grad, &mut state.m, &mut state.v, hp);
    update(&mut params.biases, &params.bias_grad, &mut state.m_bias, &mut state.v_bias, hp);
    params.zero_grad();
    Ok(())
}

fn update(
    param: &mut Tensor,
    grad: &Tensor,
    m: &mut Tensor,
    v: &mut Tensor,
    (lr, b1, b2, eps, c1, c2): (f64, f64, f64, f64, f64, f64),
) {
    let it = param
        .data_mut()
        .iter_mut()
        .zip(grad.data())
        .zip(m.data_mut().iter_mut().zip(v.data_mut().iter_mut()));
    for ((p, &g), (mi, vi)) in it {
        *mi = b1 * *mi + (1.0 - b1) * g;
        *vi = b2 * *vi + (1.0 - b2) * g * g;
        let m_hat = *mi / c1;
        let v_hat = *vi / c2;
        *p -= lr * m_hat / (v_hat.sqrt() + eps);
    }
}

/// Optimizer over an ordered list of parameter sets.
#[derive(Clone, Debug)]
pub struct Adam {
    states: Vec<AdamState>,
}

impl Adam {
    pub fn new<'a>(params: impl IntoIterator<Item = &'a ParamSet>, lr: f64) -> Self {
        Self {
            states: params.into_iter().map(|p| AdamState::new(p, lr)).collect(),
        }
    }

    pub fn set_lr(&mut self, lr: f64) {
        self.states.iter_mut().for_each(|s| s.lr = lr);
    }

    pub fn lr(&self) -> f64 {
        self.states.first().map_or(0.0, |s| s.lr)
    }

    /// Steps every parameter set in the same order the optimizer was built with.
    pub fn step<'a>(&mut self, params: impl IntoIterator<Item = &'a mut ParamSet>) -> Result<()> {
        let mut n = 0;
        for (p, s) in params.into_iter().zip(self.states.iter_mut()) {
            adam_step(p, s)?;
            n += 1;
        }
        if n != self.states.len() {
            return Err(Error::InvalidConfig(format!(
                "optimizer tracks {} parameter sets, got {n}",
                self.states.len()
            )));
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn scalar(value: f64, grad: f64) -> ParamSet {
        let mut p = ParamSet::new(Tensor::filled(&[1], value), Tensor::zeros(&[1]));
        p.weight_grad.data_mut()[0] = grad;
        p
    }

    /// Hand-evaluated scalar Adam recurrence.
    fn reference(grads: &[f64], lr: f64) -> Vec<f64> {
        let (b1, b2, eps) = (0.9f64, 0.999f64, 1e-8);
        let (mut m, mut v, mut x) = (0.0, 0.0, 0.0);
        let mut out = Vec::new();
        for (i, g) in grads.iter().enumerate() {
            let t = (i + 1) as i32;
            m = b1 * m + (1.0 - b1) * g;
            v = b2 * v + (1.0 - b2) * g * g;
            x -= lr * (m / (1.0 - b1.powi(t))) / ((v / (1.0 - b2.powi(t))).sqrt() + eps);
            out.push(x);
        }
        out
    }

    #[test]
    fn first_step_magnitude_is_lr() {
        let mut p = scalar(0.0, 1.0);
        let mut s = AdamState::new(&p, 1e-3);
        adam_step(&mut p, &mut s).unwrap();
        let x = p.weights.data()[0];
        assert_eq!(x, reference(&[1.0], 1e-3)[0]);
        assert!((x + 0.000_999_999_99).abs() < 1e-15);
        assert_eq!(p.weight_grad.data()[0], 0.0);
        assert_eq!(s.step_count, 1);
    }

    #[test]
    fn zero_gradient_leaves_param() {
        let mut p = scalar(0.7, 0.0);
        let mut s = AdamState::new(&p, 1e-3);
        adam_step(&mut p, &mut s).unwrap();
        assert_eq!(p.weights.data()[0], 0.7);
    }

    #[test]
    fn constant_gradient_decreases_each_step() {
        let mut p = scalar(0.0, 1.0);
        let mut s = AdamState::new(&p, 1e-3);
        let want = reference(&[1.0, 1.0], 1e-3);
        adam_step(&mut p, &mut s).unwrap();
        let first = p.weights.data()[0];
        p.weight_grad.data_mut()[0] = 1.0;
        adam_step(&mut p, &mut s).unwrap();
        let second = p.weights.data()[0];
        assert!(first < 0.0 && second < first);
        assert_eq!(vec![first, second], want);
    }

    #[test]
    fn frozen_params_refused_and_untouched() {
        let mut p = scalar(0.3, 1.0);
        p.trainable = false;
        let before = p.clone();
        let mut s = AdamState::new(&p, 1e-3);
        assert!(matches!(adam_step(&mut p, &mut s), Err(Error::FrozenParams)));
        assert_eq!(p, before);
        assert_eq!(s.step_count, 0);
    }
}

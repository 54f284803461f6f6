use super::layer::{Cache, Layer, LayerSpec, Mode, ParamSet};
use crate::error::{Error, Result};
use crate::rng::{seeded, Rng};
use crate::tensor::Tensor;

/// A plain stack of single-input layers.
#[derive(Clone, Debug, PartialEq, Default)]
pub struct Sequential {
    layers: Vec<Layer>,
}

impl Sequential {
    pub fn new(layers: Vec<Layer>) -> Self {
        Self { layers }
    }

    pub fn from_specs(specs: &[LayerSpec], rng: &mut Rng) -> Result<Self> {
        specs
            .iter()
            .map(|s| Layer::new(s.clone(), rng))
            .collect::<Result<Vec<_>>>()
            .map(Self::new)
    }

    pub fn layers(&self) -> &[Layer] {
        &self.layers
    }

    pub fn push(&mut self, layer: Layer) {
        self.layers.push(layer);
    }

    pub fn is_empty(&self) -> bool {
        self.layers.is_empty()
    }

    pub fn output_shape(&self, input: &[usize]) -> Result<Vec<usize>> {
        self.layers
            .iter()
            .try_fold(input.to_vec(), |shape, l| l.spec().output_shape(&shape))
    }

    pub fn forward(&self, input: &Tensor, mode: Mode, rng: &mut Rng) -> Result<(Tensor, Vec<Cache>)> {
        let mut caches = Vec::with_capacity(self.layers.len());
        let mut x = input.clone();
        for layer in &self.layers {
            let (y, cache) = layer.forward(&x, mode, rng)?;
            caches.push(cache);
            x = y;
        }
        Ok((x, caches))
    }

    /// Eval-mode forward pass that keeps no activation records.
    pub fn infer(&self, input: &Tensor) -> Result<Tensor> {
        let mut rng = seeded(0);
        let mut x = input.clone();
        for layer in &self.layers {
            x = layer.forward(&x, Mode::Eval, &mut rng)?.0;
        }
        Ok(x)
    }

    pub fn backward(&mut self, caches: &[Cache], grad_out: &Tensor) -> Result<Tensor> {
        self.check_caches(caches)?;
        let mut g = grad_out.clone();
        for (layer, cache) in self.layers.iter_mut().zip(caches).rev() {
            g = layer.backward(cache, &g)?;
        }
        Ok(g)
    }

    /// Backward pass that stops short of computing the gradient with respect
    /// to the network input.
    pub fn backward_params_only(&mut self, caches: &[Cache], grad_out: &Tensor) -> Result<()> {
        self.check_caches(caches)?;
        let mut g = grad_out.clone();
        let first_with_params = self.layers.iter().position(|l| l.params().is_some());
        for (i, (layer, cache)) in self.layers.iter_mut().zip(caches).enumerate().rev() {
            match first_with_params {
                Some(f) if i == f => return layer.backward_params_only(cache, &g),
                None => return Ok(()),
                _ => g = layer.backward(cache, &g)?,
            }
        }
        Ok(())
    }

    fn check_caches(&self, caches: &[Cache]) -> Result<()> {
        if caches.len() != self.layers.len() {
            return Err(Error::InvalidLayer(format!(
                "{} caches for {} layers",
                caches.len(),
                self.layers.len()
            )));
        }
        Ok(())
    }

    pub fn param_sets(&self) -> impl Iterator<Item = &ParamSet> {
        self.layers.iter().filter_map(Layer::params)
    }

    pub fn param_sets_mut(&mut self) -> impl Iterator<Item = &mut ParamSet> {
        self.layers.iter_mut().filter_map(Layer::params_mut)
    }

    pub fn zero_grad(&mut self) {
        self.param_sets_mut().for_each(ParamSet::zero_grad);
    }

    pub fn set_trainable(&mut self, trainable: bool) {
        self.param_sets_mut().for_each(|p| p.trainable = trainable);
    }

    /// Replaces every parameter set, in layer order, checking shapes.
    pub fn load_param_sets(&mut self, sets: &[ParamSet]) -> Result<()> {
        let expected = self.param_sets().count();
        if sets.len() != expected {
            return Err(Error::Checkpoint(format!(
                "{} parameter sets for a stack with {expected}",
                sets.len()
            )));
        }
        for (slot, new) in self.param_sets_mut().zip(sets) {
            if slot.weights.shape() != new.weights.shape() || slot.biases.shape() != new.biases.shape() {
                return Err(Error::Checkpoint(format!(
                    "parameter shapes {:?}/{:?} do not match {:?}/{:?}",
                    new.weights.shape(),
                    new.biases.shape(),
                    slot.weights.shape(),
                    slot.biases.shape()
                )));
            }
            *slot = new.clone();
            slot.zero_grad();
        }
        Ok(())
    }

    pub fn num_params(&self) -> usize {
        self.param_sets().map(ParamSet::len).sum()
    }
}

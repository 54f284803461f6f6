use rand::Rng as _;
use rand_distr::{Distribution, Normal};

use super::layer::Activation;
use crate::rng::Rng;
use crate::tensor::Tensor;

/// He-normal for ReLU layers, Glorot-uniform otherwise.
pub(crate) fn weights(
    shape: &[usize],
    fan_in: usize,
    fan_out: usize,
    activation: Activation,
    rng: &mut Rng,
) -> Tensor {
    let n: usize = shape.iter().product();
    let data: Vec<f64> = match activation {
        Activation::Relu => {
            let normal = Normal::new(0.0, (2.0 / fan_in as f64).sqrt()).expect("positive std");
            (0..n).map(|_| normal.sample(rng)).collect()
        }
        Activation::Linear => {
            let limit = (6.0 / (fan_in + fan_out) as f64).sqrt();
            (0..n).map(|_| rng.random_range(-limit..limit)).collect()
        }
    };
    Tensor::new(shape.to_vec(), data).expect("init shape")
}

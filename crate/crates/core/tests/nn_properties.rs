use dmtlr_core::nn::{
    concat, gradient_check, split, Activation, Adam, Layer, LayerSpec, Mode, Padding, ParamSet, Sequential, FD_STEP,
};
use dmtlr_core::rng::seeded;
use dmtlr_core::Tensor;
use proptest::prelude::*;
use rand::Rng as _;

fn random_tensor(shape: &[usize], seed: u64) -> Tensor {
    let mut rng = seeded(seed);
    let len = shape.iter().product();
    let data = (0..len).map(|_| rng.random_range(-1.0..1.0)).collect();
    Tensor::new(shape.to_vec(), data).unwrap()
}

fn rel_err(a: f64, n: f64) -> f64 {
    (a - n).abs() / (a.abs() + n.abs()).max(1e-8)
}

/// Loss `sum(out * probe)` so the upstream gradient is `probe`.
fn probe_loss(layer: &Layer, input: &Tensor, probe: &Tensor, mode: Mode) -> f64 {
    let (out, _) = layer.forward(input, mode, &mut seeded(99)).unwrap();
    out.data().iter().zip(probe.data()).map(|(a, b)| a * b).sum()
}

/// Max relative error over every input entry and every parameter entry.
fn layer_gradient_error(mut layer: Layer, input: &Tensor, mode: Mode) -> f64 {
    let (out, cache) = layer.forward(input, mode, &mut seeded(99)).unwrap();
    let probe = random_tensor(out.shape(), 5);
    let grad_in = layer.backward(&cache, &probe).unwrap();
    let mut worst: f64 = 0.0;

    let mut x = input.clone();
    for i in 0..x.len() {
        let orig = x.data()[i];
        x.data_mut()[i] = orig + FD_STEP;
        let up = probe_loss(&layer, &x, &probe, mode);
        x.data_mut()[i] = orig - FD_STEP;
        let down = probe_loss(&layer, &x, &probe, mode);
        x.data_mut()[i] = orig;
        worst = worst.max(rel_err(grad_in.data()[i], (up - down) / (2.0 * FD_STEP)));
    }

    if let Some(params) = layer.params().cloned() {
        for which in 0..2 {
            let analytic = if which == 0 { &params.weight_grad } else { &params.bias_grad };
            for i in 0..analytic.len() {
                let mut eval = |delta: f64| {
                    let p = layer.params_mut().unwrap();
                    let t = if which == 0 { &mut p.weights } else { &mut p.biases };
                    t.data_mut()[i] += delta;
                    let l = probe_loss(&layer, input, &probe, mode);
                    let p = layer.params_mut().unwrap();
                    let t = if which == 0 { &mut p.weights } else { &mut p.biases };
                    t.data_mut()[i] -= delta;
                    l
                };
                let numeric = (eval(FD_STEP) - eval(-FD_STEP)) / (2.0 * FD_STEP);
                worst = worst.max(rel_err(analytic.data()[i], numeric));
            }
        }
    }
    worst
}

fn activation() -> impl Strategy<Value = Activation> {
    prop_oneof![Just(Activation::Relu), Just(Activation::Linear)]
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(24))]

    #[test]
    fn dense_gradients(batch in 1usize..5, in_dim in 1usize..7, out_dim in 1usize..7, act in activation(), seed in any::<u64>()) {
        let layer = Layer::new(LayerSpec::dense(in_dim, out_dim, act), &mut seeded(seed)).unwrap();
        let x = random_tensor(&[batch, in_dim], seed ^ 1);
        prop_assert!(layer_gradient_error(layer, &x, Mode::Train) < 1e-5);
    }

    #[test]
    fn conv_gradients(
        batch in 1usize..3,
        hw in 3usize..7,
        in_ch in 1usize..4,
        out_ch in 1usize..4,
        kernel in prop_oneof![Just(1usize), Just(3)],
        stride in 1usize..3,
        same in any::<bool>(),
        act in activation(),
        seed in any::<u64>(),
    ) {
        let spec = LayerSpec::Conv2D {
            in_ch,
            out_ch,
            kernel,
            stride,
            padding: if same { Padding::Same } else { Padding::Valid },
            activation: act,
        };
        let layer = Layer::new(spec, &mut seeded(seed)).unwrap();
        let x = random_tensor(&[batch, hw, hw, in_ch], seed ^ 2);
        prop_assert!(layer_gradient_error(layer, &x, Mode::Train) < 1e-5);
    }

    #[test]
    fn maxpool_gradients(batch in 1usize..3, blocks in 1usize..4, ch in 1usize..4, kernel in 1usize..4, seed in any::<u64>()) {
        let hw = blocks * kernel;
        let layer = Layer::stateless(LayerSpec::MaxPool2D { kernel, stride: kernel }).unwrap();
        let x = random_tensor(&[batch, hw, hw, ch], seed);
        prop_assert!(layer_gradient_error(layer, &x, Mode::Train) < 1e-5);
    }

    #[test]
    fn flatten_gradients(batch in 1usize..3, h in 1usize..5, w in 1usize..5, ch in 1usize..4, seed in any::<u64>()) {
        let layer = Layer::stateless(LayerSpec::Flatten).unwrap();
        let x = random_tensor(&[batch, h, w, ch], seed);
        prop_assert!(layer_gradient_error(layer, &x, Mode::Train) < 1e-5);
    }

    #[test]
    fn dropout_gradients(batch in 1usize..5, width in 1usize..9, rate in 0.0f64..0.9, train in any::<bool>(), seed in any::<u64>()) {
        let layer = Layer::stateless(LayerSpec::Dropout { rate }).unwrap();
        let x = random_tensor(&[batch, width], seed);
        let mode = if train { Mode::Train } else { Mode::Eval };
        prop_assert!(layer_gradient_error(layer, &x, mode) < 1e-5);
    }

    #[test]
    fn concat_gradients(batch in 1usize..4, w1 in 1usize..5, w2 in 1usize..5, seed in any::<u64>()) {
        let layer = Layer::stateless(LayerSpec::Concat { widths: vec![w1, w2] }).unwrap();
        let a = random_tensor(&[batch, w1], seed);
        let b = random_tensor(&[batch, w2], seed ^ 3);
        let (out, cache) = layer.forward_many(&[&a, &b]).unwrap();
        let probe = random_tensor(out.shape(), 4);
        let grads = layer.backward_many(&cache, &probe).unwrap();
        let loss = |a: &Tensor, b: &Tensor| -> f64 {
            let (o, _) = layer.forward_many(&[a, b]).unwrap();
            o.data().iter().zip(probe.data()).map(|(x, y)| x * y).sum()
        };
        for (k, x) in [&a, &b].into_iter().enumerate() {
            for i in 0..x.len() {
                let mut up = x.clone();
                up.data_mut()[i] += FD_STEP;
                let mut down = x.clone();
                down.data_mut()[i] -= FD_STEP;
                let (lu, ld) = if k == 0 { (loss(&up, &b), loss(&down, &b)) } else { (loss(&a, &up), loss(&a, &down)) };
                prop_assert!(rel_err(grads[k].data()[i], (lu - ld) / (2.0 * FD_STEP)) < 1e-5);
            }
        }
    }

    #[test]
    fn concat_split_round_trip(batch in 1usize..6, widths in prop::collection::vec(1usize..6, 1..5), seed in any::<u64>()) {
        let parts: Vec<Tensor> = widths.iter().enumerate().map(|(i, &w)| random_tensor(&[batch, w], seed + i as u64)).collect();
        let refs: Vec<&Tensor> = parts.iter().collect();
        let joined = concat(&refs).unwrap();
        prop_assert_eq!(joined.shape(), &[batch, widths.iter().sum::<usize>()][..]);
        let back = split(&joined, &widths).unwrap();
        prop_assert_eq!(back, parts);
    }

    #[test]
    fn eval_forward_is_deterministic(seed in any::<u64>()) {
        let specs = [
            LayerSpec::conv(2, 3, 3, Activation::Relu),
            LayerSpec::MaxPool2D { kernel: 2, stride: 2 },
            LayerSpec::Flatten,
            LayerSpec::dense(12, 5, Activation::Relu),
            LayerSpec::Dropout { rate: 0.5 },
            LayerSpec::dense(5, 2, Activation::Linear),
        ];
        let net = Sequential::from_specs(&specs, &mut seeded(seed)).unwrap();
        let x = random_tensor(&[3, 4, 4, 2], seed);
        let (a, _) = net.forward(&x, Mode::Eval, &mut seeded(1)).unwrap();
        let (b, _) = net.forward(&x, Mode::Eval, &mut seeded(2)).unwrap();
        prop_assert_eq!(a.data(), b.data());
    }
}

fn dropout_statistics(rate: f64) {
    let trials = 100_000;
    let layer = Layer::stateless(LayerSpec::Dropout { rate }).unwrap();
    let x = Tensor::filled(&[trials, 1], 2.0);
    let (out, _) = layer.forward(&x, Mode::Train, &mut seeded(17)).unwrap();
    let zeroed = out.data().iter().filter(|&&v| v == 0.0).count() as f64 / trials as f64;
    assert!((zeroed - rate).abs() < 0.01, "rate {rate}: zeroed fraction {zeroed}");
    let survivors: Vec<f64> = out.data().iter().copied().filter(|&v| v != 0.0).collect();
    assert!(survivors.iter().all(|&v| (v - 2.0 / (1.0 - rate)).abs() < 1e-12));
    let mean = out.mean();
    assert!((mean - 2.0).abs() < 0.02, "rate {rate}: mean {mean}");
}

#[test]
fn dropout_rate_quarter() {
    dropout_statistics(0.25);
}

#[test]
fn dropout_rate_half() {
    dropout_statistics(0.5);
}

#[test]
fn adam_refuses_frozen_sets() {
    let mut p = ParamSet::new(Tensor::filled(&[2, 2], 1.0), Tensor::zeros(&[2]));
    p.weight_grad.fill(3.0);
    p.trainable = false;
    let before = p.clone();
    let mut opt = Adam::new([&p], 1e-3);
    assert!(opt.step([&mut p]).is_err());
    assert_eq!(p, before);
}

#[test]
fn gradient_check_dense_stack() {
    let specs = [
        LayerSpec::dense(5, 8, Activation::Relu),
        LayerSpec::dense(8, 6, Activation::Relu),
        LayerSpec::dense(6, 3, Activation::Linear),
    ];
    let mut net = Sequential::from_specs(&specs, &mut seeded(3)).unwrap();
    let x = random_tensor(&[4, 5], 1);
    let y = random_tensor(&[4, 3], 2);
    let err = gradient_check(&mut net, &x, &y).unwrap();
    assert!(err < 1e-6, "dense stack error {err}");
}

#[test]
fn gradient_check_conv_pool_dense() {
    let specs = [
        LayerSpec::conv(3, 4, 3, Activation::Relu),
        LayerSpec::MaxPool2D { kernel: 2, stride: 2 },
        LayerSpec::conv(4, 5, 3, Activation::Relu),
        LayerSpec::MaxPool2D { kernel: 2, stride: 2 },
        LayerSpec::Flatten,
        LayerSpec::dense(20, 4, Activation::Linear),
    ];
    let mut net = Sequential::from_specs(&specs, &mut seeded(4)).unwrap();
    let x = random_tensor(&[2, 8, 8, 3], 3);
    let y = random_tensor(&[2, 4], 4);
    let err = gradient_check(&mut net, &x, &y).unwrap();
    assert!(err < 1e-5, "conv stack error {err}");
}

#[test]
fn gradient_check_with_eval_dropout() {
    let specs = [
        LayerSpec::dense(4, 10, Activation::Relu),
        LayerSpec::Dropout { rate: 0.5 },
        LayerSpec::dense(10, 2, Activation::Linear),
    ];
    let mut net = Sequential::from_specs(&specs, &mut seeded(5)).unwrap();
    let x = random_tensor(&[3, 4], 5);
    let y = random_tensor(&[3, 2], 6);
    let err = gradient_check(&mut net, &x, &y).unwrap();
    assert!(err < 1e-6, "dropout stack error {err}");
}

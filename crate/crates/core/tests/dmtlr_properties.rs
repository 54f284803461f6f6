use dmtlr_core::checkpoint::{W_F, W_FT, W_MLP, W_R};
use dmtlr_core::dmtlr::{build_dmtlr, build_stats_only, train_on_inputs, DmtlrModel, ModelInputs, TrainConfig};
use dmtlr_core::featurizer::{build_backbone, BackboneSpec, PretrainedBackbone};
use dmtlr_core::nn::{check_gradients, Adam, Mode, ParamHost, ParamSet};
use dmtlr_core::rng::seeded;
use dmtlr_core::Tensor;
use rand::Rng as _;

fn tiny_backbone(seed: u64) -> PretrainedBackbone {
    let spec = BackboneSpec {
        input_size: (8, 8, 3),
        blocks: vec![(4, 1), (4, 1)],
        ft_head_dims: vec![12, 8],
    };
    build_backbone(&spec, seed).unwrap().freeze()
}

fn random(shape: &[usize], lo: f64, hi: f64, seed: u64) -> Tensor {
    let mut rng = seeded(seed);
    let len = shape.iter().product();
    Tensor::new(shape.to_vec(), (0..len).map(|_| rng.random_range(lo..hi)).collect()).unwrap()
}

fn tiny_inputs(bb: &PretrainedBackbone, n: usize, d: usize, n_out: usize, seed: u64) -> ModelInputs {
    let images = random(&[n, 8, 8, 3], 0.0, 255.0, seed);
    let desc = random(&[n, d], -1.5, 1.5, seed + 1);
    let targets = random(&[n, n_out], -1.0, 1.0, seed + 2);
    ModelInputs::new(Some(bb), &images, &desc).unwrap().with_targets(targets).unwrap()
}

fn group_snapshot(model: &DmtlrModel) -> Vec<(&'static str, Vec<ParamSet>)> {
    model
        .groups()
        .into_iter()
        .map(|(tag, sets)| (tag, sets.into_iter().cloned().collect()))
        .collect()
}

fn changed(before: &[ParamSet], after: &[ParamSet]) -> bool {
    before
        .iter()
        .zip(after)
        .any(|(a, b)| a.weights != b.weights || a.biases != b.biases)
}

#[test]
fn one_step_updates_every_trainable_group_and_no_frozen_one() {
    let bb = tiny_backbone(1);
    let mut model = build_dmtlr(&bb, 5, 3, 2).unwrap();
    let data = tiny_inputs(&bb, 16, 5, 3, 10);
    let before = group_snapshot(&model);
    let hash_before = bb.weight_hash();
    let config = TrainConfig {
        epochs: 1,
        batch_size: 16,
        lr: 1e-3,
        seed: 4,
        n_output: 3,
        ..TrainConfig::default()
    };
    let report = train_on_inputs(&mut model, &data, &data, &config).unwrap();
    assert!(report.train_loss[0] > 0.0);
    let after = group_snapshot(&model);
    for ((tag, a), (_, b)) in before.iter().zip(&after) {
        match *tag {
            W_F => assert!(!changed(a, b), "frozen group moved"),
            W_FT | W_MLP | W_R => assert!(changed(a, b), "{tag} did not move"),
            other => panic!("unexpected group {other}"),
        }
    }
    assert_eq!(model.backbone().unwrap().weight_hash(), hash_before);
}

#[test]
fn fused_loss_gradient_matches_finite_differences() {
    let bb = tiny_backbone(2);
    let mut model = build_dmtlr(&bb, 4, 2, 3).unwrap();
    let data = tiny_inputs(&bb, 6, 4, 2, 20);
    let err = check_gradients(
        &mut model,
        |m| m.evaluate(&data),
        |m| {
            m.zero_grad();
            m.accumulate_gradients(&data, Mode::Eval, &mut seeded(0)).map(|_| ())
        },
    )
    .unwrap();
    assert!(err < 1e-4, "max relative error {err}");
}

#[test]
fn full_batch_loss_decreases_at_small_lr() {
    let mut decreasing = 0;
    for seed in 0..3 {
        let bb = tiny_backbone(seed);
        let mut model = build_dmtlr(&bb, 6, 3, seed).unwrap();
        let data = tiny_inputs(&bb, 24, 6, 3, 100 + seed);
        let mut opt = Adam::new(model.param_sets_mut().into_iter().map(|p| &*p), 1e-4);
        let mut losses = vec![model.evaluate(&data).unwrap()];
        for _ in 0..5 {
            model.zero_grad();
            model.accumulate_gradients(&data, Mode::Eval, &mut seeded(0)).unwrap();
            opt.step(model.param_sets_mut()).unwrap();
            losses.push(model.evaluate(&data).unwrap());
        }
        if losses.windows(2).all(|w| w[1] < w[0]) {
            decreasing += 1;
        }
    }
    assert!(decreasing >= 2, "loss decreased monotonically in {decreasing} of 3 seeds");
}

#[test]
fn output_layer_is_linear_in_its_weights() {
    let bb = tiny_backbone(3);
    let data = tiny_inputs(&bb, 5, 3, 4, 30);
    let base = build_dmtlr(&bb, 3, 4, 5).unwrap();
    let mut rng = seeded(0);
    let p0 = base.predict_inputs(&data, Mode::Eval, &mut rng).unwrap();
    let bias = base.output_layer().biases.clone();
    for c in [2.0, 0.5, -4.0, 3.0] {
        let mut m = base.clone();
        m.output_layer_mut().weights.scale(c);
        let p = m.predict_inputs(&data, Mode::Eval, &mut rng).unwrap();
        for (i, (a, b)) in p.data().iter().zip(p0.data()).enumerate() {
            let bj = bias.data()[i % 4];
            let lhs = a - bj;
            let rhs = c * (b - bj);
            let exact = c == 2.0 || c == 0.5 || c == -4.0;
            if exact {
                assert_eq!(lhs, rhs);
            } else {
                assert!((lhs - rhs).abs() <= 1e-12 * rhs.abs().max(1.0));
            }
        }
    }
}

#[test]
fn descriptor_perturbation_leaves_image_embedding_alone() {
    let bb = tiny_backbone(4);
    let model = build_dmtlr(&bb, 3, 2, 6).unwrap();
    let images = random(&[4, 8, 8, 3], 0.0, 255.0, 40);
    let desc = random(&[4, 3], -1.0, 1.0, 41);
    let mut bumped = desc.clone();
    bumped.data_mut()[1] += 0.75;
    let a = ModelInputs::new(Some(&bb), &images, &desc).unwrap();
    let b = ModelInputs::new(Some(&bb), &images, &bumped).unwrap();
    assert_eq!(model.image_embedding(&a).unwrap(), model.image_embedding(&b).unwrap());
    let mut rng = seeded(0);
    let pa = model.predict_inputs(&a, Mode::Eval, &mut rng).unwrap();
    let pb = model.predict_inputs(&b, Mode::Eval, &mut rng).unwrap();
    assert_ne!(pa.row(0), pb.row(0));
    assert_eq!(pa.row(1), pb.row(1));
}

#[test]
fn training_is_deterministic_and_reports_every_epoch() {
    let bb = tiny_backbone(5);
    let train = tiny_inputs(&bb, 40, 4, 2, 50);
    let test = tiny_inputs(&bb, 12, 4, 2, 60);
    let config = TrainConfig {
        batch_size: 8,
        seed: 9,
        n_output: 2,
        ..TrainConfig::default()
    };
    let run = || {
        let mut m = build_dmtlr(&bb, 4, 2, 7).unwrap();
        train_on_inputs(&mut m, &train, &test, &config).unwrap()
    };
    let (r1, r2) = (run(), run());
    assert!(r1.same_outcome(&r2));
    assert_eq!(r1.train_loss, r2.train_loss);
    assert_eq!(r1.train_loss.len(), 20);
    assert_eq!(r1.test_loss.len(), 20);
}

#[test]
fn train_set_smaller_than_a_batch_is_rejected() {
    let bb = tiny_backbone(6);
    let small = tiny_inputs(&bb, 5, 2, 1, 70);
    let mut m = build_dmtlr(&bb, 2, 1, 0).unwrap();
    let config = TrainConfig {
        batch_size: 8,
        n_output: 1,
        ..TrainConfig::default()
    };
    assert!(train_on_inputs(&mut m, &small, &small, &config).is_err());
}

#[test]
fn stats_only_ignores_images_and_is_seed_deterministic() {
    let a = build_stats_only(7, 2, 11).unwrap();
    let b = build_stats_only(7, 2, 11).unwrap();
    assert_eq!(a, b);
    let desc = random(&[3, 7], -1.0, 1.0, 80);
    let inputs = ModelInputs::new(None, &desc.clone(), &desc).unwrap();
    assert!(a.image_embedding(&inputs).unwrap().is_none());
    let p = a.predict_inputs(&inputs, Mode::Eval, &mut seeded(0)).unwrap();
    assert_eq!(p.shape(), &[3, 2]);
}

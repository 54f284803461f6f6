use dmtlr_core::pipeline::{
    batches, prepare, split, train_size, Preprocessor, RawDataset, SplitPlan, StandardScaler, TargetSelection,
};
use dmtlr_core::rng::seeded;
use dmtlr_core::Tensor;
use proptest::prelude::*;
use rand::Rng as _;

fn random(shape: &[usize], lo: f64, hi: f64, seed: u64) -> Tensor {
    let mut rng = seeded(seed);
    let len = shape.iter().product();
    Tensor::new(shape.to_vec(), (0..len).map(|_| rng.random_range(lo..hi)).collect()).unwrap()
}

fn raw(n: usize, seed: u64) -> RawDataset {
    RawDataset {
        sample_ids: (0..n).map(|i| format!("s{i}")).collect(),
        images: random(&[n, 8, 8, 3], 0.0, 255.0, seed),
        descriptors: random(&[n, 18], -2.0, 5.0, seed + 1),
        targets: random(&[n, 6], -1.0, 40.0, seed + 2),
    }
}

#[test]
fn fitted_statistics_see_only_training_rows() {
    let data = raw(60, 3);
    let plan = split(data.len(), 8).unwrap();
    let full = Preprocessor::fit(&data, &plan, TargetSelection::All, (4, 4)).unwrap();

    let train_only = RawDataset {
        sample_ids: plan.train.iter().map(|&i| data.sample_ids[i].clone()).collect(),
        images: data.images.select_rows(&plan.train).unwrap(),
        descriptors: data.descriptors.select_rows(&plan.train).unwrap(),
        targets: data.targets.select_rows(&plan.train).unwrap(),
    };
    let own_plan = SplitPlan {
        train: (0..plan.train.len()).collect(),
        test: Vec::new(),
        seed: plan.seed,
    };
    let refit = Preprocessor::fit(&train_only, &own_plan, TargetSelection::All, (4, 4)).unwrap();
    assert_eq!(full, refit);

    let mut poisoned = data.clone();
    for &i in &plan.test {
        poisoned.descriptors.data_mut()[i * 18] = 1e9;
        poisoned.images.data_mut()[i * 192] = 255.0 * 7.0;
    }
    let again = Preprocessor::fit(&poisoned, &plan, TargetSelection::All, (4, 4)).unwrap();
    assert_eq!(full, again);
}

#[test]
fn prepared_training_split_is_standardized() {
    let data = raw(90, 4);
    let plan = split(data.len(), 2).unwrap();
    let (_, train, test) = prepare(&data, &plan, TargetSelection::All, (4, 4)).unwrap();
    assert_eq!((train.len(), test.len()), (60, 30));
    for table in [&train.descriptors, &train.targets] {
        let (rows, cols) = (table.rows(), table.row_len());
        for j in 0..cols {
            let col: Vec<f64> = (0..rows).map(|i| table.row(i)[j]).collect();
            let mean = col.iter().sum::<f64>() / rows as f64;
            let var = col.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / rows as f64;
            assert!(mean.abs() < 1e-9);
            assert!((var - 1.0).abs() < 1e-6);
        }
    }
    for c in 0..3 {
        let m: f64 = train.images.data().iter().skip(c).step_by(3).sum::<f64>() / (60.0 * 16.0);
        assert!(m.abs() < 1e-9, "channel {c} mean {m}");
    }
}

#[test]
fn full_scale_split_sizes() {
    let plan = split(2500, 0).unwrap();
    assert_eq!((plan.train.len(), plan.test.len()), (1667, 833));
    let plan = split(900, 0).unwrap();
    assert_eq!((plan.train.len(), plan.test.len()), (600, 300));
}

#[test]
fn trial_seeds_give_different_splits() {
    let plans: Vec<_> = (0..3).map(|s| split(300, s).unwrap().train).collect();
    assert_ne!(plans[0], plans[1]);
    assert_ne!(plans[1], plans[2]);
    assert_ne!(plans[0], plans[2]);
}

proptest! {
    #[test]
    fn split_is_disjoint_covering_and_deterministic(n in 3usize..3000, seed in any::<u64>()) {
        let plan = split(n, seed).unwrap();
        prop_assert_eq!(plan.train.len(), train_size(n));
        prop_assert_eq!(plan.train.len(), ((2 * n) as f64 / 3.0).round() as usize);
        let mut all: Vec<usize> = plan.train.iter().chain(&plan.test).copied().collect();
        all.sort_unstable();
        prop_assert_eq!(all, (0..n).collect::<Vec<_>>());
        prop_assert_eq!(split(n, seed).unwrap(), plan);
    }

    #[test]
    fn every_row_batched_once_per_epoch(n in 1usize..500, batch in 1usize..64, seed in any::<u64>(), epoch in 0usize..50) {
        let bs = batches(n, batch, seed, epoch).unwrap();
        prop_assert!(bs.iter().all(|b| !b.is_empty() && b.len() <= batch));
        prop_assert_eq!(bs.len(), n.div_ceil(batch));
        let mut seen: Vec<usize> = bs.into_iter().flatten().collect();
        seen.sort_unstable();
        prop_assert_eq!(seen, (0..n).collect::<Vec<_>>());
    }

    #[test]
    fn scaler_round_trips(rows in 2usize..40, cols in 1usize..6, seed in any::<u64>()) {
        let data = random(&[rows, cols], -1e3, 1e3, seed);
        let scaler = StandardScaler::fit(&data).unwrap();
        let back = scaler.inverse_transform(&scaler.transform(&data).unwrap()).unwrap();
        for (a, b) in back.data().iter().zip(data.data()) {
            prop_assert!((a - b).abs() < 1e-9);
        }
    }
}

#[test]
fn split_rejects_tiny_and_batches_reject_zero() {
    assert!(split(2, 0).is_err());
    assert!(batches(10, 0, 0, 0).is_err());
    assert!(StandardScaler::new().transform(&Tensor::zeros(&[2, 2])).is_err());
}

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::*;
use crate::model::{DenseBlockConfig, ModelConfig};

fn small_config() -> ModelConfig {
    let mut c = ModelConfig::dense_tiny();
    c.backbone.input_side = 16;
    c.backbone.stem.channels = 8;
    c.backbone.blocks = vec![DenseBlockConfig { layers: 2, growth: 4 }; 2];
    c.head.widths = vec![16, 8];
    c
}

/// Class `c` images have mean brightness tied to `c`.
fn toy_split(n_per_class: usize, side: usize, seed: u64) -> LoadedSplit {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut split = LoadedSplit::default();
    for c in 0..3 {
        for _ in 0..n_per_class {
            let level = 0.2 + 0.3 * c as f64;
            split.images.push(Tensor::from_fn([side, side, 3], |_| level + 0.05 * rng.random::<f64>()));
            split.labels.push(c);
        }
    }
    split
}

fn quick_config(model: &Model, epochs: (usize, usize)) -> TrainConfig {
    let mut cfg = TrainConfig::for_model(model);
    cfg.phases[0].epochs = epochs.0;
    cfg.phases[1].epochs = epochs.1;
    cfg.batch_size = 8;
    cfg
}

#[test]
fn zero_learning_rate_leaves_parameters() {
    let mut model = Model::build(&small_config(), 1).unwrap();
    let before = model.params().clone();
    let data = toy_split(4, 16, 0);
    let mut adam = AdamState::default();
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    let ctx = StepContext { phase: 1, epoch: 1 };
    train_epoch(&mut model, &data, &[1.0; 3], &mut adam, 0.0, 5, &AugmentConfig::default(), &mut rng, ctx).unwrap();
    assert_eq!(model.params(), &before);
}

#[test]
fn loss_falls_on_a_repeated_sample() {
    let mut model = Model::build(&ModelConfig::dense_tiny(), 3).unwrap();
    model.set_trainable(0).unwrap();
    let img = Tensor::from_fn([64, 64, 3], |i| (i % 7) as f64 / 7.0);
    let data = LoadedSplit { images: vec![img; 4], labels: vec![0; 4], records: Vec::new() };
    let mut adam = AdamState::default();
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    let losses: Vec<f64> = (1..=3)
        .map(|epoch| {
            let ctx = StepContext { phase: 1, epoch };
            train_epoch(&mut model, &data, &[1.0; 3], &mut adam, 1e-3, 4, &AugmentConfig::identity(), &mut rng, ctx)
                .unwrap()
                .loss
        })
        .collect();
    assert!(losses[0] > losses[1] && losses[1] > losses[2], "{losses:?}");
}

#[test]
fn partial_batches_of_one_are_dropped() {
    let mut model = Model::build(&small_config(), 1).unwrap();
    let mut data = toy_split(3, 16, 1);
    data.images.truncate(9);
    let mut adam = AdamState::default();
    let ctx = StepContext { phase: 1, epoch: 1 };
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    train_epoch(&mut model, &data, &[1.0; 3], &mut adam, 1e-3, 4, &AugmentConfig::identity(), &mut rng, ctx).unwrap();
    assert_eq!(adam.step, 2);
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    train_epoch(&mut model, &data, &[1.0; 3], &mut adam, 1e-3, 8, &AugmentConfig::identity(), &mut rng, ctx).unwrap();
    assert_eq!(adam.step, 3);
}

#[test]
fn two_phase_budgets_best_policy_and_freezing() {
    let model = Model::build(&small_config(), 2).unwrap();
    let train = toy_split(6, 16, 2);
    let val = toy_split(2, 16, 3);
    let cfg = quick_config(&model, (1, 1));
    let out = run_two_phase(model.clone(), &train, &val, &[1.0; 3], &cfg, 2, None).unwrap();
    assert_eq!(out.history.epochs.len(), 2);
    assert_eq!(out.history.epochs.iter().map(|e| e.phase).collect::<Vec<_>>(), [1, 2]);
    let best = out.history.best().unwrap();
    let max = out.history.epochs.iter().map(|e| e.val_accuracy).fold(0.0, f64::max);
    assert_eq!(best.val_accuracy, max);
    assert_eq!(out.best_meta.val_accuracy, max);

    // Phase 1 alone must leave the backbone exactly as calibrated.
    let mut p1 = cfg.clone();
    p1.phases.truncate(1);
    p1.phases[0].epochs = 2;
    let mut calibrated = model.clone();
    let mut pick = ChaCha8Rng::seed_from_u64(2);
    pick.set_stream(2);
    let n = p1.calibration_images.min(train.len());
    let chosen: Vec<Tensor> =
        rand::seq::index::sample(&mut pick, train.len(), n).into_iter().map(|i| train.images[i].clone()).collect();
    calibrated.calibrate_batch_norm(&stack_images(&chosen).unwrap()).unwrap();
    let out = run_two_phase(model, &train, &val, &[1.0; 3], &p1, 2, None).unwrap();
    for (a, b) in out.last.params().iter().zip(calibrated.params().iter()) {
        let backbone = !(a.name.starts_with("cbam.") || a.name.starts_with("head."));
        if backbone {
            assert_eq!(a.value, b.value, "{}", a.name);
        } else {
            assert_ne!(a.value, b.value, "{}", a.name);
        }
    }
    for (a, b) in out.last.layers().iter().zip(calibrated.layers()) {
        if a.name != "head.bn" {
            assert_eq!(a.stats, b.stats, "{}", a.name);
        }
    }
}

#[test]
fn reruns_are_bit_identical_and_csv_has_header() {
    let model = Model::build(&small_config(), 4).unwrap();
    let train = toy_split(4, 16, 5);
    let val = toy_split(2, 16, 6);
    let cfg = quick_config(&model, (2, 1));
    let a = run_two_phase(model.clone(), &train, &val, &[1.0; 3], &cfg, 9, None).unwrap();
    let b = run_two_phase(model, &train, &val, &[1.0; 3], &cfg, 9, None).unwrap();
    assert_eq!(a.history, b.history);
    assert_eq!(a.last.params(), b.last.params());
    let csv = a.history.to_csv();
    assert!(csv.starts_with("epoch,phase,train_loss,train_acc,val_loss,val_acc,lr\n"));
    assert_eq!(csv.lines().count(), 1 + a.history.epochs.len());
}

#[test]
fn empty_validation_and_failed_seed_are_reported() {
    let model = Model::build(&small_config(), 4).unwrap();
    let cfg = quick_config(&model, (1, 1));
    let train = toy_split(2, 16, 0);
    assert!(matches!(
        run_two_phase(model, &train, &LoadedSplit::default(), &[1.0; 3], &cfg, 1, None),
        Err(Error::Data(_))
    ));
    let err = run_multi_seed(&[42, 7, 123], |s| if s == 7 { Err(Error::Data("boom".into())) } else { Ok(s) })
        .unwrap_err();
    assert!(matches!(err, Error::SeedRun { seed: 7, .. }));
    assert_eq!(run_multi_seed(&DEFAULT_SEEDS, Ok).unwrap(), DEFAULT_SEEDS);
}

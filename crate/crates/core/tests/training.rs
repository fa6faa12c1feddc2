mod common;

use common::synthetic_episode;
use uwdt_core::dataset::Dataset;
use uwdt_core::nn::train::evaluate_loss;
use uwdt_core::nn::{train, ModelConfig, SeqModel, TrainConfig};
use uwdt_core::Error;

fn one_episode() -> Dataset {
    Dataset::new(vec![synthetic_episode(22, 3)], 20).unwrap()
}

fn quick(lr: f64) -> TrainConfig {
    TrainConfig {
        lr,
        batch_size: 4,
        epochs: 1,
        ..TrainConfig::default()
    }
}

#[test]
fn one_epoch_overfits_single_episode() {
    let ds = one_episode();
    let (m0, _) = train::<f32>(&ds, ModelConfig::default(), &quick(0.0), 1).unwrap();
    let before = evaluate_loss(&m0, &ds, 8).unwrap();
    let (m, log) = train::<f32>(&ds, ModelConfig::default(), &quick(3e-3), 1).unwrap();
    let after = evaluate_loss(&m, &ds, 8).unwrap();
    assert_eq!(log.steps.len(), 6);
    assert!(after < before, "{before} -> {after}");
    let first = log.steps.first().unwrap().loss;
    let last = log.steps.last().unwrap().loss;
    assert!(last < first, "{first} -> {last}");
}

#[test]
fn fixed_seed_is_reproducible() {
    let ds = one_episode();
    let (a, la) = train::<f32>(&ds, ModelConfig::default(), &quick(1e-3), 9).unwrap();
    let (b, lb) = train::<f32>(&ds, ModelConfig::default(), &quick(1e-3), 9).unwrap();
    assert_eq!(la, lb);
    assert_eq!(a.params, b.params);
    let (c, _) = train::<f32>(&ds, ModelConfig::default(), &quick(1e-3), 10).unwrap();
    assert_ne!(a.params, c.params);
}

#[test]
fn zero_lr_leaves_parameters() {
    let ds = one_episode();
    let cfg = TrainConfig {
        epochs: 2,
        ..quick(0.0)
    };
    let (m, log) = train::<f32>(&ds, ModelConfig::bc(), &cfg, 4).unwrap();
    let mut rngs = uwdt_core::nn::TrainRngs::from_seed(4);
    let init = SeqModel::<f32>::new(ModelConfig::bc(), &mut rngs.init).unwrap();
    assert_eq!(m.params, init.params);
    // same windows in a different order, and dropout differs, so compare epoch means loosely
    let e = log.epoch_losses();
    assert!((e[0] - e[1]).abs() < 0.05, "{e:?}");
}

#[test]
fn warmup_covers_first_tenth() {
    let ds = Dataset::new((0..4).map(|s| synthetic_episode(22, s)).collect(), 20).unwrap();
    let cfg = TrainConfig {
        lr: 1e-3,
        batch_size: 16,
        epochs: 2,
        ..TrainConfig::default()
    };
    let mut small = ModelConfig::default();
    small.layers = 1;
    let (_, log) = train::<f32>(&ds, small, &cfg, 2).unwrap();
    // 88 windows / 16 = 6 steps per epoch, 12 total, warm-up ceil(1.2) = 2
    assert_eq!(log.steps.len(), 12);
    let lrs: Vec<f64> = log.steps.iter().map(|s| s.lr).collect();
    assert_eq!(lrs[0], 5e-4);
    assert!(lrs[1..].iter().all(|&l| l == 1e-3));
}

#[test]
fn nan_parameters_abort_training() {
    let ds = one_episode();
    let mut rngs = uwdt_core::nn::TrainRngs::from_seed(1);
    let mut m = SeqModel::<f32>::new(ModelConfig::default(), &mut rngs.init).unwrap();
    let head = m.arch.params.find("head.bias").unwrap().offset;
    m.params[head] = f32::NAN;
    let err = uwdt_core::nn::train_model(&mut m, &ds, &quick(1e-3), &mut rngs, &mut uwdt_core::nn::Unweighted);
    assert!(matches!(err, Err(Error::Diverged { step: 0, .. })));
}

use flexdistill::data::{make_synthetic, split, SyntheticKind};
use flexdistill::losses::{DistillConfig, Strategy};
use flexdistill::models::{EarlyExitConfig, EarlyExitNet, LayerKind};
use flexdistill::nn::ParamStore;
use flexdistill::trainer::{evaluate, train, TrainConfig};
use flexdistill::{DatasetF64, Error, RngState};

fn blobs(noise: f64, classes: usize) -> (DatasetF64, DatasetF64) {
    let ds = make_synthetic(SyntheticKind::Blobs, 100, classes, noise, 11).unwrap();
    split(&ds, 0.25, 0).unwrap()
}

fn net(widths: Vec<usize>, batch_norm: bool, classes: usize, seed: u64) -> (EarlyExitNet, ParamStore<f64>) {
    let cfg = EarlyExitConfig {
        batch_norm,
        ..EarlyExitConfig::new(LayerKind::Linear, widths)
    };
    let mut store = ParamStore::new();
    let n = EarlyExitNet::new(&cfg, &[2], classes, &mut store, &mut RngState::new(seed)).unwrap();
    (n, store)
}

#[test]
fn zero_learning_rate_changes_nothing() {
    let (tr, va) = blobs(1.0, 3);
    let (m, mut store) = net(vec![4, 5], false, 3, 0);
    let initial = store.clone();
    let untrained = evaluate(&m, &store, &va, None).unwrap();
    let cfg = TrainConfig {
        epochs: 1,
        lr_initial: 0.0,
        ..TrainConfig::default()
    };
    let out = train(&m, &mut store, &tr, &va, &cfg, &DistillConfig::default(), |_| {}).unwrap();
    for ((_, a), (_, b)) in store.iter().zip(initial.iter()) {
        assert_eq!(a.value, b.value, "{}", a.name);
    }
    assert_eq!(out.history[0].accuracies, untrained);
}

#[test]
fn separable_blobs_reach_99_percent() {
    let (tr, va) = blobs(0.1, 2);
    let (m, mut store) = net(vec![8], true, 2, 1);
    let cfg = TrainConfig {
        epochs: 30,
        batch_size: 16,
        ..TrainConfig::default()
    };
    let out = train(&m, &mut store, &tr, &va, &cfg, &DistillConfig::default(), |_| {}).unwrap();
    assert!(out.best.avg_accuracy >= 0.99, "{}", out.best.avg_accuracy);
}

#[test]
fn same_seed_same_history() {
    let (tr, va) = blobs(1.0, 3);
    let run = || {
        let (m, mut store) = net(vec![4, 6], true, 3, 2);
        let cfg = TrainConfig {
            epochs: 4,
            batch_size: 16,
            seed: 5,
            ..TrainConfig::default()
        };
        let d = DistillConfig::default().with_strategy(Strategy::Tam);
        train(&m, &mut store, &tr, &va, &cfg, &d, |_| {}).unwrap()
    };
    let (a, b) = (run(), run());
    assert_eq!(a.history, b.history);
    assert_eq!(a.step_losses, b.step_losses);
}

#[test]
fn ties_keep_the_earliest_epoch() {
    let (tr, va) = blobs(1.0, 3);
    let (m, mut store) = net(vec![4, 5], false, 3, 0);
    let cfg = TrainConfig {
        epochs: 3,
        lr_initial: 0.0,
        ..TrainConfig::default()
    };
    let out = train(&m, &mut store, &tr, &va, &cfg, &DistillConfig::default(), |_| {}).unwrap();
    assert_eq!(out.best.epoch, 1);
}

#[test]
fn eval_every_still_evaluates_last_epoch() {
    let (tr, va) = blobs(1.0, 3);
    let (m, mut store) = net(vec![4], false, 3, 0);
    let cfg = TrainConfig {
        epochs: 5,
        eval_every: 2,
        ..TrainConfig::default()
    };
    let out = train(&m, &mut store, &tr, &va, &cfg, &DistillConfig::default(), |_| {}).unwrap();
    let epochs: Vec<usize> = out.history.iter().map(|h| h.epoch).collect();
    assert_eq!(epochs, vec![2, 4, 5]);
}

#[test]
fn batch_norm_rejects_singleton_batches() {
    let (tr, va) = blobs(1.0, 3);
    let (m, mut store) = net(vec![4], true, 3, 0);
    let cfg = TrainConfig {
        batch_size: 1,
        ..TrainConfig::default()
    };
    let err = train(&m, &mut store, &tr, &va, &cfg, &DistillConfig::default(), |_| {}).unwrap_err();
    assert!(matches!(err, Error::Config { ref key, .. } if key == "train.batch_size"), "{err:?}");
}

#[test]
fn distillation_on_one_submodel_is_config_error() {
    let (tr, va) = blobs(1.0, 3);
    let (m, mut store) = net(vec![4], false, 3, 0);
    let d = DistillConfig::default().with_strategy(Strategy::Ipkd);
    let err = train(&m, &mut store, &tr, &va, &TrainConfig::default(), &d, |_| {}).unwrap_err();
    assert_eq!(err.exit_code(), 1);
}

#[test]
fn diverging_run_is_numeric_error() {
    let (tr, va) = blobs(1.0, 3);
    let (m, mut store) = net(vec![4], false, 3, 0);
    let cfg = TrainConfig {
        lr_initial: 1e300,
        epochs: 3,
        ..TrainConfig::default()
    };
    let err = train(&m, &mut store, &tr, &va, &cfg, &DistillConfig::default(), |_| {}).unwrap_err();
    assert!(matches!(err, Error::Numeric(_)), "{err:?}");
    assert_eq!(err.exit_code(), 2);
}

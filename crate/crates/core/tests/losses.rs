use flexdistill::losses::{
    flexible_loss, kd_loss, one_hot, teacher_weights, term_layout, DistillConfig, Divergence, LogitsBundle, Strategy,
    TermKind,
};
use flexdistill::{RngState, Tensor};
use proptest::prelude::*;

fn logits(seed: u64, n: usize, batch: usize, classes: usize, scale: f64) -> Vec<Tensor<f64>> {
    let mut rng = RngState::new(seed);
    (0..n)
        .map(|_| Tensor::rand_normal(&mut rng, &[batch, classes], 0.0, scale).unwrap())
        .collect()
}

fn labels(seed: u64, batch: usize, classes: usize) -> Tensor<f64> {
    let mut rng = RngState::derive(seed, 1);
    let y: Vec<usize> = (0..batch).map(|_| rng.index_inclusive(classes - 1)).collect();
    one_hot(&y, classes).unwrap()
}

proptest! {
    #[test]
    fn softmax_rows_sum_to_one(seed in 0u64..1000, scale in 0.1f64..50.0) {
        let x = logits(seed, 1, 5, 7, scale).remove(0);
        let p = x.softmax(1).unwrap();
        for r in 0..5 {
            let s: f64 = p.row(r).iter().sum();
            prop_assert!((s - 1.0).abs() < 1e-12);
        }
    }

    #[test]
    fn kl_is_non_negative_and_zero_on_itself(seed in 0u64..1000, tau in 0.5f64..8.0) {
        let a = logits(seed, 2, 4, 5, 3.0);
        prop_assert!(kd_loss(&a[0], &a[1], tau, Divergence::Kl).unwrap() >= -1e-15);
        prop_assert!(kd_loss(&a[0], &a[0], tau, Divergence::Kl).unwrap().abs() < 1e-12);
    }

    #[test]
    fn shifting_logits_changes_nothing(seed in 0u64..1000, shift in -100.0f64..100.0) {
        let a = logits(seed, 2, 3, 4, 2.0);
        let shifted = a[0].map(|v| v + shift);
        let base = kd_loss(&a[0], &a[1], 2.0, Divergence::Kl).unwrap();
        let moved = kd_loss(&shifted, &a[1], 2.0, Divergence::Kl).unwrap();
        prop_assert!((base - moved).abs() < 1e-9);
    }
}

#[test]
fn tam_weights_are_reciprocal_counts_up_to_sixteen() {
    use num_rational::Ratio;
    for n in 2..=16usize {
        for i in 1..n {
            let w = teacher_weights(Strategy::Tam, n, i);
            assert_eq!(w.len(), n - i);
            assert!(w.iter().all(|&(_, r)| r == Ratio::new(1, (n - i) as u64)));
            assert_eq!(w.iter().map(|&(_, r)| r).sum::<Ratio<u64>>(), Ratio::from_integer(1));
        }
    }
}

#[test]
fn term_counts_per_strategy() {
    let kd = |s| term_layout(s, 4).iter().filter(|k| matches!(k, TermKind::Kd { .. })).count();
    assert_eq!(kd(Strategy::None), 0);
    assert_eq!(kd(Strategy::Ipkd), 3);
    assert_eq!(kd(Strategy::Ta1), 3);
    assert_eq!(kd(Strategy::Tam), 6);
}

#[test]
fn ta1_and_ipkd_differ_beyond_two_submodels() {
    let a = logits(3, 3, 6, 4, 2.0);
    let y = labels(3, 6, 4);
    let bundle = LogitsBundle::new(a, y).unwrap();
    let total = |s| flexible_loss(&bundle, &DistillConfig::default().with_strategy(s)).unwrap().total;
    assert!((total(Strategy::Ipkd) - total(Strategy::Ta1)).abs() > 1e-6);
    assert!((total(Strategy::Ipkd) - total(Strategy::Tam)).abs() > 1e-6);
}

#[test]
fn f32_losses_track_f64() {
    let a = logits(9, 2, 4, 3, 1.0);
    let y = labels(9, 4, 3);
    let to32 = |t: &Tensor<f64>| Tensor::<f32>::from_vec(t.shape(), t.data().iter().map(|&v| v as f32).collect()).unwrap();
    let b64 = LogitsBundle::new(a.clone(), y.clone()).unwrap();
    let b32 = LogitsBundle::new(a.iter().map(to32).collect(), to32(&y)).unwrap();
    let cfg = DistillConfig::default().with_strategy(Strategy::Tam);
    let l64 = flexible_loss(&b64, &cfg).unwrap().total;
    let l32 = flexible_loss(&b32, &cfg).unwrap().total;
    assert!((l64 - l32 as f64).abs() < 1e-5);
}

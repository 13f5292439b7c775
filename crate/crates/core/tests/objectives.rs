mod common;

use loanscreen::objectives::{wd_schedule, Ablation, LossWeights};
use proptest::prelude::*;

#[test]
fn contrastive_loss_matches_direct_evaluation() {
    for m in [1, 2, 4] {
        for seed in 0..10 {
            let z = common::random_unit_rows(m, 6, seed);
            let z2 = common::random_unit_rows(m, 6, seed + 100);
            let got = common::contrastive_impl(&z, &z2, 0.1);
            let want = common::contrastive_brute_force(&z, &z2, 0.1);
            assert!((got - want).abs() <= 1e-10, "M={m}: {got} vs {want}");
            if m == 1 {
                assert_eq!(got, 0.0);
            }
        }
    }
}

#[test]
fn identical_views_beat_random_views() {
    let z = common::random_unit_rows(8, 6, 1);
    let shuffled = common::random_unit_rows(8, 6, 2);
    assert!(common::contrastive_impl(&z, &z, 0.1) < common::contrastive_impl(&z, &shuffled, 0.1));
}

#[test]
fn domain_weight_schedule() {
    let w = LossWeights::default();
    assert_eq!(w.w_d(0), 0.0);
    assert!((w.w_d(1000) - 0.1 * 0.5f64.tanh()).abs() <= 1e-9);
    let mut prev = 0.0;
    for p in 0..100_000u64 {
        let v = w.w_d(p);
        assert!(v >= prev && v <= 0.1, "step {p}");
        prev = v;
    }
    assert!((w.w_d(u64::MAX) - 0.1).abs() < 1e-15);
}

#[test]
fn ablation_labels_round_trip() {
    let labels: Vec<&str> = Ablation::ALL.iter().map(|a| a.label()).collect();
    assert_eq!(labels, ["ours", "no-CL", "no-DA", "neither"]);
    for a in Ablation::ALL {
        assert_eq!(Ablation::from_label(a.label()), Some(a));
    }
}

proptest! {
    #[test]
    fn schedule_is_bounded_and_monotone(gamma in 1e-5f64..1.0, p in 0u64..1_000_000, d in 0u64..1000) {
        let a = wd_schedule(p, gamma, 0.1);
        let b = wd_schedule(p + d, gamma, 0.1);
        prop_assert!((0.0..=0.1).contains(&a));
        prop_assert!(b >= a);
    }

    #[test]
    fn contrastive_loss_is_view_symmetric(seed in 0u64..1000, m in 2usize..6) {
        let z = common::random_unit_rows(m, 4, seed);
        let z2 = common::random_unit_rows(m, 4, seed + 7);
        let a = common::contrastive_impl(&z, &z2, 0.2);
        let b = common::contrastive_impl(&z2, &z, 0.2);
        prop_assert!((a - b).abs() < 1e-12);
        prop_assert!(a >= 0.0);
    }
}

//! Metric oracles and score-normalization properties.

use crc_core::init::rng_from_seed;
use crc_core::scoring::{eer, normalize, roc_auc, roc_auc_pairwise, ScoreSeries};
use proptest::prelude::*;
use rand::Rng;

/// Scores drawn from a small integer grid so ties are common; both classes
/// are present.
fn instance(seed: u64) -> (Vec<f64>, Vec<u8>) {
    let mut rng = rng_from_seed(seed);
    let m = rng.gen_range(2..=200);
    let levels = rng.gen_range(1..20);
    let scores: Vec<f64> = (0..m).map(|_| rng.gen_range(0..levels) as f64 / 4.0).collect();
    let mut labels: Vec<u8> = (0..m).map(|_| rng.gen_range(0..2)).collect();
    labels[0] = 0;
    labels[m - 1] = 1;
    (scores, labels)
}

#[test]
fn fast_auc_equals_pair_counting() {
    for seed in 0..100 {
        let (s, l) = instance(seed);
        let fast = roc_auc(&s, &l).unwrap();
        let oracle = roc_auc_pairwise(&s, &l).unwrap();
        assert!((fast - oracle).abs() <= 1e-12, "seed {seed}: {fast} vs {oracle}");
    }
}

#[test]
fn perfect_and_reversed_separation() {
    let l = [0, 0, 1, 1];
    assert_eq!(roc_auc(&[0.1, 0.2, 0.8, 0.9], &l).unwrap(), 1.0);
    assert_eq!(roc_auc(&[0.9, 0.8, 0.2, 0.1], &l).unwrap(), 0.0);
    assert_eq!(roc_auc(&[0.5; 4], &l).unwrap(), 0.5);
    assert_eq!(eer(&[0.1, 0.2, 0.8, 0.9], &l).unwrap(), 0.0);
}

#[test]
fn single_class_is_rejected() {
    assert!(roc_auc(&[0.1, 0.2], &[1, 1]).is_err());
    assert!(roc_auc(&[0.1, 0.2], &[0, 0]).is_err());
}

proptest! {
    #[test]
    fn auc_is_invariant_under_increasing_maps(seed in 0u64..10_000, a in 0.01f64..10.0, b in -5.0f64..5.0) {
        let (s, l) = instance(seed);
        let base = roc_auc(&s, &l).unwrap();
        let affine: Vec<f64> = s.iter().map(|v| a * v + b).collect();
        let exp: Vec<f64> = s.iter().map(|v| v.exp()).collect();
        prop_assert!((roc_auc(&affine, &l).unwrap() - base).abs() <= 1e-12);
        prop_assert!((roc_auc(&exp, &l).unwrap() - base).abs() <= 1e-12);
    }

    #[test]
    fn normalize_maps_into_unit_interval_and_is_idempotent(raw in prop::collection::vec(0.0f64..1e6, 1..100)) {
        let n = normalize(&raw);
        prop_assert!(n.iter().all(|v| (0.0..=1.0).contains(v)));
        let again = normalize(&n);
        let constant = raw.iter().all(|&v| v == raw[0]);
        if constant {
            prop_assert!(n.iter().all(|&v| v == 0.0));
        } else {
            for (x, y) in n.iter().zip(&again) {
                prop_assert!((x - y).abs() <= 1e-12);
            }
        }
    }

    #[test]
    fn score_csv_round_trips(raw in prop::collection::vec(0.0f64..1e3, 1..50)) {
        let series = ScoreSeries::from_raw(raw).unwrap();
        let back = ScoreSeries::from_csv(&series.to_csv()).unwrap();
        prop_assert_eq!(back, series);
    }
}

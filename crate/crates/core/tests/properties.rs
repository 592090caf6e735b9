//! Randomized invariants over the simulator, augmentation, traces,
//! checkpoints and the agent.

mod common;

use common::props;
use proptest::prelude::*;
use uinav_core::nn::{attention, Tensor};
use uinav_core::sim::Suite;

proptest! {
    #![proptest_config(ProptestConfig::with_cases(1000))]

    #[test]
    fn augmentation_keeps_critical_elements_and_valid_boxes(seed in any::<u64>()) {
        prop_assert!(props::augmentation_preserves(seed).map_err(TestCaseError::fail)? > 0);
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(6))]

    #[test]
    fn every_macro_action_terminates_on_the_scenario_catalog(seed in 0u64..10_000) {
        props::macro_termination(&Suite::scenarios(), seed).map_err(TestCaseError::fail)?;
    }

    #[test]
    fn every_macro_action_terminates_on_the_shipped_suite(seed in 0u64..10_000) {
        props::macro_termination(&Suite::builtin(), seed).map_err(TestCaseError::fail)?;
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(16))]

    #[test]
    fn checkpoints_round_trip_bit_exactly(seed in any::<u64>()) {
        props::checkpoint_round_trip(seed).map_err(TestCaseError::fail)?;
    }

    #[test]
    fn agent_is_equivariant_to_element_order(seed in any::<u64>()) {
        prop_assert!(props::permutation_equivariance(seed).map_err(TestCaseError::fail)? > 0);
    }
}

proptest! {
    #[test]
    fn attention_rows_lie_on_the_simplex(
        n in 1usize..7,
        m in 1usize..9,
        vals in proptest::collection::vec(-30.0f64..30.0, 200),
        mask_bits in proptest::collection::vec(any::<bool>(), 8),
    ) {
        let d = 3;
        let take = |off: usize, len: usize| vals.iter().cycle().skip(off).take(len).copied().collect::<Vec<_>>();
        let q = Tensor::from_vec(n, d, take(0, n * d)).unwrap();
        let k = Tensor::from_vec(m, d, take(7, m * d)).unwrap();
        let v = Tensor::from_vec(m, 2, take(13, m * 2)).unwrap();
        let mask: Vec<bool> = (0..m).map(|i| mask_bits[i % mask_bits.len()]).collect();
        let (_, w) = attention(&q, &k, &v, Some(&mask)).unwrap();
        let any_key = mask.iter().any(|&b| b);
        for r in 0..n {
            let row = w.row(r);
            prop_assert!(row.iter().all(|x| x.is_finite() && *x >= 0.0));
            for (x, &keep) in row.iter().zip(&mask) {
                if !keep {
                    prop_assert_eq!(*x, 0.0);
                }
            }
            let total: f64 = row.iter().sum();
            let want = if any_key { 1.0 } else { 0.0 };
            prop_assert!((total - want).abs() < 1e-9, "row sum {}", total);
        }
    }
}

#[test]
fn augmentation_over_the_first_thousand_seeds() {
    for seed in 0..1000 {
        props::augmentation_preserves(seed).unwrap();
    }
}

#[test]
fn shipped_corpus_replays_identically() {
    assert!(props::corpus_replays().unwrap() >= 21);
}

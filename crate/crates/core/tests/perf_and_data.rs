//! Performance-tensor oracle equivalence and dataset difficulty ordering.

use dragonfly_core::perf::{ability, perf_tensor, AbilityWeights, PerfTensor};
use dragonfly_core::synth::{centroid_reference_accuracy, synth_dataset, Experiment};
use proptest::prelude::*;

/// Naive sort-based reference for the performance tensor.
fn perf_oracle(z: &[f64]) -> PerfTensor {
    let mut sorted = z.to_vec();
    sorted.sort_by(|a, b| a.partial_cmp(b).unwrap());
    let n = sorted.len();
    let median = if n % 2 == 1 {
        sorted[n / 2]
    } else {
        (sorted[n / 2 - 1] + sorted[n / 2]) / 2.0
    };
    PerfTensor {
        min: sorted[0],
        mean: sorted.iter().sum::<f64>() / n as f64,
        median,
        max: sorted[n - 1],
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(200))]

    #[test]
    fn perf_tensor_matches_sort_oracle(z in proptest::collection::vec(0.0f64..100.0, 1..1000)) {
        let t = perf_tensor(&z).unwrap();
        let o = perf_oracle(&z);
        prop_assert_eq!(t.min, o.min);
        prop_assert_eq!(t.max, o.max);
        prop_assert_eq!(t.median, o.median);
        prop_assert!((t.mean - o.mean).abs() < 1e-9);
    }

    #[test]
    fn ability_is_monotone_and_bounded(z in proptest::collection::vec(0.0f64..100.0, 1..50),
                                       bump in 0.0f64..5.0) {
        let w = AbilityWeights::default();
        let t = perf_tensor(&z).unwrap();
        let a = ability(&t, &w);
        prop_assert!(a >= t.min - 1e-9 && a <= t.max + 1e-9);
        // increasing any statistic never decreases the summary
        for field in 0..4 {
            let mut t2 = t;
            match field {
                0 => t2.min += bump.min(t.median - t.min),
                1 => t2.mean += bump.min(t.max - t.mean),
                2 => t2.median += bump.min(t.max - t.median),
                _ => t2.max += bump,
            }
            prop_assert!(ability(&t2, &w) >= a - 1e-12);
        }
    }
}

#[test]
fn reference_classifier_orders_the_experiments() {
    let mut means = [0.0f64; 3];
    for seed in 0..3u64 {
        for (i, exp) in [
            Experiment::BinaryIo,
            Experiment::BinaryBdoq,
            Experiment::EncryptedIo,
        ]
        .iter()
        .enumerate()
        {
            let dir = tempfile::tempdir().unwrap();
            let m = synth_dataset(*exp, (40, 5, 25), 32, 1000 + seed, dir.path(), 0).unwrap();
            means[i] += centroid_reference_accuracy(&m).unwrap() / 3.0;
        }
    }
    assert!(
        means[0] >= means[1] && means[1] >= means[2],
        "difficulty ordering violated: {means:?}"
    );
    // the encrypted variant must be near chance for an intensity-only model
    assert!(means[2] < 75.0, "texture encryption too easy: {}", means[2]);
}

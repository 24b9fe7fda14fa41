use mtunet_core::data::{generate, stratified_split, SplitSpec, SynthConfig};
use proptest::prelude::*;

fn small(seed: u64) -> SynthConfig {
    SynthConfig {
        height: 16,
        width: 16,
        samples_per_class: 12,
        blob_spread: 2.0,
        seed,
        ..SynthConfig::default()
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(32))]

    #[test]
    fn samples_are_valid(seed in any::<u64>()) {
        let ds = generate(&small(seed)).unwrap();
        for s in &ds.samples {
            prop_assert!(s.image.data().iter().all(|v| (0.0..=1.0).contains(v)));
            prop_assert!(s.saliency.data().iter().all(|&v| v >= 0.0));
            prop_assert!((s.saliency.sum() - 1.0).abs() < 1e-4);
        }
    }

    #[test]
    fn split_membership_depends_only_on_seed(data_seed in any::<u64>(), split_seed in any::<u64>()) {
        let ds = generate(&small(data_seed)).unwrap();
        let spec = SplitSpec { seed: split_seed, ..SplitSpec::default() };
        let a = stratified_split(&ds, &spec).unwrap();
        let b = stratified_split(&ds, &spec).unwrap();
        prop_assert_eq!(&a, &b);
        let mut all: Vec<usize> = a.train.iter().chain(&a.val).chain(&a.test).copied().collect();
        all.sort_unstable();
        prop_assert_eq!(all, (0..ds.len()).collect::<Vec<_>>());
    }
}

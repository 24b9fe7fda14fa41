use mtunet_core::metrics::{auc_multiclass, auc_one_vs_rest, hs, kld_metric, pcc};
use mtunet_core::oracle::{hand_till_auc, one_vs_rest_auc, tied_scores};
use mtunet_core::SeededRng;
use proptest::prelude::*;

fn distribution(rng: &mut SeededRng, n: usize) -> Vec<f64> {
    let raw: Vec<f64> = (0..n).map(|_| rng.uniform()).collect();
    let total: f64 = raw.iter().sum::<f64>().max(1e-300);
    raw.iter().map(|v| v / total).collect()
}

proptest! {
    #[test]
    fn kld_is_nonnegative_and_zero_on_itself(seed in any::<u64>(), n in 1usize..80) {
        let mut rng = SeededRng::new(seed);
        let (p, q) = (distribution(&mut rng, n), distribution(&mut rng, n));
        prop_assert!(kld_metric(&p, &q).unwrap() >= 0.0);
        prop_assert!(kld_metric(&p, &p).unwrap().abs() < 1e-12);
    }

    #[test]
    fn hs_is_symmetric_and_bounded(seed in any::<u64>(), n in 1usize..80) {
        let mut rng = SeededRng::new(seed);
        let (p, q) = (distribution(&mut rng, n), distribution(&mut rng, n));
        let (a, b) = (hs(&p, &q).unwrap(), hs(&q, &p).unwrap());
        prop_assert_eq!(a, b);
        prop_assert!((0.0..=1.0 + 1e-12).contains(&a));
        prop_assert!((hs(&p, &p).unwrap() - 1.0).abs() < 1e-12);
    }

    #[test]
    fn pcc_ignores_positive_affine_maps(
        seed in any::<u64>(),
        n in 3usize..60,
        scale in 0.01f64..100.0,
        shift in -10.0f64..10.0,
    ) {
        let mut rng = SeededRng::new(seed);
        let (p, q) = (distribution(&mut rng, n), distribution(&mut rng, n));
        let Some(base) = pcc(&p, &q).unwrap() else { return Ok(()); };
        let moved: Vec<f64> = q.iter().map(|v| scale * v + shift).collect();
        let r = pcc(&p, &moved).unwrap().unwrap();
        prop_assert!((r - base).abs() < 1e-9);
        let moved: Vec<f64> = p.iter().map(|v| scale * v + shift).collect();
        let r = pcc(&moved, &q).unwrap().unwrap();
        prop_assert!((r - base).abs() < 1e-9);
    }

    #[test]
    fn rank_auc_equals_pairwise_oracle(seed in any::<u64>(), n in 3usize..=50, classes in 2usize..5) {
        prop_assume!(n >= classes);
        let mut rng = SeededRng::new(seed);
        let (scores, labels) = tied_scores(&mut rng, n, classes);
        prop_assert_eq!(auc_multiclass(&scores, &labels).unwrap(), hand_till_auc(&scores, &labels));
        for k in 0..classes {
            prop_assert_eq!(
                auc_one_vs_rest(&scores, &labels, k).unwrap(),
                one_vs_rest_auc(&scores, &labels, k)
            );
        }
    }

    #[test]
    fn binary_multiclass_auc_is_one_vs_rest(seed in any::<u64>(), n in 2usize..=50) {
        let mut rng = SeededRng::new(seed);
        let (raw, labels) = tied_scores(&mut rng, n, 2);
        // Complementary scores, as a two-way softmax produces.
        let scores: Vec<Vec<f64>> = raw.iter().map(|s| vec![s[0], 1.0 - s[0]]).collect();
        let m = auc_multiclass(&scores, &labels).unwrap();
        prop_assert!((m - auc_one_vs_rest(&scores, &labels, 0).unwrap()).abs() < 1e-12);
        prop_assert!((m - auc_one_vs_rest(&scores, &labels, 1).unwrap()).abs() < 1e-12);
    }
}

use mtunet_core::loss::{
    cross_entropy, entropy, equilibrium_f, equilibrium_f_derivative, equilibrium_inverse, saliency_loss,
    scheme_total_on_tape, sigma_gradient, SchemeKind, Sigmas,
};
use mtunet_core::optim::Adam;
use mtunet_core::oracle::kl_divergence;
use mtunet_core::{SeededRng, Tape, Tensor};
use proptest::prelude::*;

fn distribution(rng: &mut SeededRng, n: usize) -> Vec<f64> {
    let raw: Vec<f64> = (0..n).map(|_| rng.uniform_range(1e-3, 1.0)).collect();
    let total: f64 = raw.iter().sum();
    raw.iter().map(|v| v / total).collect()
}

fn log_grid(lo: f64, hi: f64, n: usize) -> Vec<f64> {
    (0..n)
        .map(|i| (lo.ln() + (hi.ln() - lo.ln()) * i as f64 / (n - 1) as f64).exp())
        .collect()
}

proptest! {
    #[test]
    fn saliency_loss_is_cross_entropy_minus_entropy(seed in any::<u64>(), n in 1usize..64) {
        let mut rng = SeededRng::new(seed);
        let (q, r) = (distribution(&mut rng, n), distribution(&mut rng, n));
        let lhs = saliency_loss(&q, &r).unwrap();
        let rhs = cross_entropy(&q, &r).unwrap() - entropy(&q);
        prop_assert!((lhs - rhs).abs() < 1e-10);
        prop_assert!((lhs - kl_divergence(&q, &r)).abs() < 1e-10);
        prop_assert!(lhs >= 0.0);
        prop_assert!(saliency_loss(&q, &q).unwrap().abs() < 1e-12);
    }

    #[test]
    fn sigma_gradient_matches_autodiff(l in 1e-4f64..10.0, sigma in 0.05f64..5.0) {
        let mut tape = Tape::new();
        let lv = tape.input(Tensor::scalar(l));
        let mut sigmas = Sigmas::<f64>::new();
        sigmas.store_mut().iter_mut().next().unwrap().value_mut().data_mut()[0] = sigma;
        let (s, c) = sigmas.bind(&mut tape, SchemeKind::Mtls2);
        let total = scheme_total_on_tape(&mut tape, SchemeKind::Mtls2, Some(lv), None, s, c).unwrap();
        tape.backward(total).unwrap();
        let g = tape.grad(s.unwrap()).unwrap().item();
        prop_assert!((g - sigma_gradient(l, sigma)).abs() < 1e-8);
    }

    #[test]
    fn smaller_loss_means_smaller_equilibrium(a in 1e-4f64..1e2, b in 1e-4f64..1e2) {
        prop_assume!(a < b);
        let (sa, sb) = (equilibrium_inverse(a).unwrap(), equilibrium_inverse(b).unwrap());
        prop_assert!(sa < sb);
        prop_assert!(1.0 / (sa * sa) > 1.0 / (sb * sb));
    }
}

#[test]
fn eq2_identity_on_a_thousand_pairs() {
    let mut rng = SeededRng::new(2024);
    for _ in 0..1000 {
        let n = 2 + rng.below(100);
        let (q, r) = (distribution(&mut rng, n), distribution(&mut rng, n));
        let lhs = saliency_loss(&q, &r).unwrap();
        assert!((lhs - (cross_entropy(&q, &r).unwrap() - entropy(&q))).abs() < 1e-10);
        assert!((lhs - kl_divergence(&q, &r)).abs() < 1e-10);
        assert!(lhs >= 0.0);
    }
}

#[test]
fn f_is_strictly_increasing_with_matching_derivative() {
    let grid = log_grid(1e-3, 1e3, 1000);
    for w in grid.windows(2) {
        assert!(equilibrium_f(w[0]) < equilibrium_f(w[1]), "{} vs {}", w[0], w[1]);
    }
    for &s in &grid {
        let h = 1e-6 * s.max(1.0);
        let fd = (equilibrium_f(s + h) - equilibrium_f(s - h)) / (2.0 * h);
        let d = equilibrium_f_derivative(s);
        assert!(d > 0.0);
        assert!(
            (fd - d).abs() <= 1e-6 * d.abs().max(1.0),
            "sigma {s}: {fd} vs {d}"
        );
    }
}

#[test]
fn inverse_round_trips() {
    for l in log_grid(1e-4, 1e2, 1000) {
        let s = equilibrium_inverse(l).unwrap();
        assert!((equilibrium_f(s) - l).abs() <= 1e-8 * l.max(1.0), "L {l}");
    }
}

#[test]
fn untrained_sigma_never_moves() {
    for (scheme, frozen) in [(SchemeKind::Mtls3, 0), (SchemeKind::Mtls2, 1)] {
        let mut sigmas = Sigmas::<f64>::new();
        let mut adam = Adam::<f64>::new(0.1);
        let mut rng = SeededRng::new(7);
        for _ in 0..50 {
            let mut tape = Tape::new();
            let ls = tape.input(Tensor::scalar(rng.uniform_range(0.1, 2.0)));
            let lc = tape.input(Tensor::scalar(rng.uniform_range(0.1, 2.0)));
            let (s, c) = sigmas.bind(&mut tape, scheme);
            let total = scheme_total_on_tape(&mut tape, scheme, Some(ls), Some(lc), s, c).unwrap();
            tape.backward(total).unwrap();
            tape.accumulate_param_grads(sigmas.store_mut());
            adam.step(sigmas.trainable_mut(scheme));
            sigmas.project();
        }
        let values = [sigmas.sigma_s(), sigmas.sigma_c()];
        assert_eq!(values[frozen], 1.0, "{scheme}");
        assert_ne!(values[1 - frozen], 1.0, "{scheme}");
    }
}

use mtunet_core::loss::SchemeKind;
use mtunet_core::model::Variant;
use mtunet_core::oracle::{model_max_error, primitive_cases, small_config, FD_STEP, FD_TOLERANCE};

const SEEDS: u64 = 20;

#[test]
fn every_primitive_matches_finite_differences() {
    let mut worst: Vec<(&str, f64)> = Vec::new();
    for seed in 0..SEEDS {
        for case in primitive_cases(seed) {
            let err = case.max_error(FD_STEP).unwrap();
            match worst.iter_mut().find(|(n, _)| *n == case.name) {
                Some(w) => w.1 = w.1.max(err),
                None => worst.push((case.name, err)),
            }
        }
    }
    assert!(worst.len() >= 20);
    for (name, err) in &worst {
        assert!(*err < FD_TOLERANCE, "{name}: {err}");
    }
}

#[test]
fn whole_network_matches_finite_differences() {
    for seed in 0..SEEDS {
        let err = model_max_error(&small_config(Variant::Mt), SchemeKind::Mtls1, seed).unwrap();
        assert!(err < FD_TOLERANCE, "seed {seed}: {err}");
    }
}

#[test]
fn every_variant_and_scheme_matches_finite_differences() {
    for (i, variant) in Variant::ALL.into_iter().enumerate() {
        for (j, scheme) in [SchemeKind::Mtls1, SchemeKind::Mtls2, SchemeKind::Mtls3]
            .into_iter()
            .enumerate()
        {
            let seed = 100 + (i * 3 + j) as u64;
            let err = model_max_error(&small_config(variant), scheme, seed).unwrap();
            assert!(err < FD_TOLERANCE, "{variant} {scheme}: {err}");
        }
    }
}

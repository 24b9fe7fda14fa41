use mtunet_core::loss::{classification_loss_on_tape, saliency_loss_on_tape};
use mtunet_core::model::{class_head_size, Mode, Model, ModelConfig, Variant};
use mtunet_core::{SeededRng, Tape, Tensor};
use proptest::prelude::*;

fn config(variant: Variant) -> ModelConfig {
    ModelConfig {
        input_height: 16,
        input_width: 16,
        depth: 2,
        base_features: 4,
        num_classes: 3,
        variant,
        dropout_rate: 0.25,
        head_hidden: 8,
    }
}

fn image(rng: &mut SeededRng, c: &ModelConfig) -> Tensor<f32> {
    let n = c.input_height * c.input_width;
    Tensor::new(
        vec![1, c.input_height, c.input_width],
        (0..n).map(|_| rng.uniform() as f32).collect(),
    )
    .unwrap()
}

fn is_trunk(name: &str) -> bool {
    !name.starts_with("class_head.") && !name.starts_with("saliency_head.")
}

/// Trunk scalars counted layer by layer.
fn trunk_size(c: &ModelConfig) -> usize {
    let f = |l: usize| c.base_features << l;
    let conv = |i: usize, o: usize| 9 * i * o + o;
    let mut n = 0;
    for l in 0..c.depth {
        let input = if l == 0 { 1 } else { f(l - 1) };
        n += conv(input, f(l)) + conv(f(l), f(l));
    }
    n += conv(f(c.depth - 1), f(c.depth)) + conv(f(c.depth), f(c.depth));
    for l in 0..c.depth {
        n += conv(f(l + 1), f(l)) + conv(2 * f(l), f(l)) + conv(f(l), f(l));
    }
    n
}

#[test]
fn parameter_counts_match_closed_form() {
    for v in Variant::ALL {
        let c = config(v);
        let m = Model::<f32>::build(&c, &mut SeededRng::new(0)).unwrap();
        let saliency_head = if v.has_saliency() { c.base_features + 1 } else { 0 };
        assert_eq!(
            m.parameter_count(),
            trunk_size(&c) + saliency_head + class_head_size(&c),
            "{v}"
        );
    }
    let count = |v| {
        Model::<f32>::build(&config(v), &mut SeededRng::new(0))
            .unwrap()
            .parameter_count()
    };
    assert!(count(Variant::Mt) > count(Variant::MtBottleneck));
    assert!(count(Variant::Mt) > count(Variant::MtTop));
    assert_eq!(
        count(Variant::Mt) - count(Variant::UnetSaliency),
        class_head_size(&config(Variant::Mt))
    );
}

#[test]
fn trunk_structure_is_shared_by_all_variants() {
    let trunk = |v| {
        let m = Model::<f32>::build(&config(v), &mut SeededRng::new(0)).unwrap();
        m.params()
            .iter()
            .filter(|p| is_trunk(p.name()))
            .map(|p| (p.name().to_string(), p.value().shape().to_vec()))
            .collect::<Vec<_>>()
    };
    let reference = trunk(Variant::Mt);
    assert!(!reference.is_empty());
    for v in Variant::ALL {
        assert_eq!(trunk(v), reference, "{v}");
    }
}

#[test]
fn removing_skips_changes_the_output() {
    let c = config(Variant::Mt);
    let model = Model::<f32>::build(&c, &mut SeededRng::new(3)).unwrap();
    let x = image(&mut SeededRng::new(4), &c);
    let with = model.forward(&x, Mode::Eval).unwrap();
    let without = model.clone().with_zeroed_skips().forward(&x, Mode::Eval).unwrap();
    assert_ne!(with.saliency, without.saliency);
}

#[test]
fn every_parameter_receives_gradient() {
    let c = config(Variant::Mt);
    let mut model = Model::<f32>::build(&c, &mut SeededRng::new(5)).unwrap();
    let mut rng = SeededRng::new(6);
    for k in 0..4 {
        let x = image(&mut rng, &c);
        let mut target = Tensor::full(&[c.input_height, c.input_width], 0.0f32);
        let n = target.numel();
        target.data_mut()[rng.below(n)] = 1.0;
        let mut label = Tensor::zeros(&[c.num_classes]);
        label.data_mut()[k % c.num_classes] = 1.0;
        let mut tape = Tape::new();
        let xv = tape.input(x);
        let out = model
            .forward_on_tape(&mut tape, xv, Mode::Train(&mut rng))
            .unwrap();
        let ls = saliency_loss_on_tape(&mut tape, &target, out.saliency.unwrap()).unwrap();
        let lc = classification_loss_on_tape(&mut tape, &label, out.class_probs.unwrap()).unwrap();
        let total = tape.add(ls, lc).unwrap();
        tape.backward(total).unwrap();
        tape.accumulate_param_grads(model.params_mut());
    }
    for p in model.params().iter() {
        assert!(
            p.grad().data().iter().any(|&g| g != 0.0),
            "{} has no gradient",
            p.name()
        );
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(24))]

    #[test]
    fn outputs_are_distributions(seed in any::<u64>(), vi in 0usize..5, train in any::<bool>()) {
        let c = config(Variant::ALL[vi]);
        let mut rng = SeededRng::new(seed);
        let model = Model::<f32>::build(&c, &mut rng).unwrap();
        let x = image(&mut rng, &c);
        let mode = if train { Mode::Train(&mut rng) } else { Mode::Eval };
        let out = model.forward(&x, mode).unwrap();
        prop_assert_eq!(out.saliency.is_some(), c.variant.has_saliency());
        prop_assert_eq!(out.class_probs.is_some(), c.variant.has_classifier());
        for t in [out.saliency, out.class_probs].into_iter().flatten() {
            prop_assert!(t.data().iter().all(|&p| p >= 0.0));
            prop_assert!((t.sum() - 1.0).abs() < 1e-4);
        }
    }
}

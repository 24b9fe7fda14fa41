//! Times one forward/backward pass of the default model.

use std::time::Instant;

use mtunet_core::model::{Mode, Model, ModelConfig};
use mtunet_core::{SeededRng, Tape, Tensor};

fn main() {
    let cfg = ModelConfig::default();
    let mut rng = SeededRng::new(0);
    let mut model = Model::<f32>::build(&cfg, &mut rng).unwrap();
    println!("parameters: {}", model.parameter_count());
    let x = Tensor::new(vec![1, 64, 64], (0..4096).map(|i| (i % 7) as f32 / 7.0).collect()).unwrap();
    let target = Tensor::full(&[64, 64], 1.0 / 4096.0);
    let label = Tensor::from_f64(&[3], &[1.0, 0.0, 0.0]).unwrap();
    let n = 50;
    let t0 = Instant::now();
    for _ in 0..n {
        let mut tape = Tape::new();
        let xv = tape.input(x.clone());
        let out = model
            .forward_on_tape(&mut tape, xv, Mode::Train(&mut rng))
            .unwrap();
        let ls = tape.cross_entropy(&target, out.saliency.unwrap()).unwrap();
        let lc = tape.cross_entropy(&label, out.class_probs.unwrap()).unwrap();
        let total = tape.add(ls, lc).unwrap();
        tape.backward(total).unwrap();
        tape.accumulate_param_grads(model.params_mut());
    }
    let dt = t0.elapsed().as_secs_f64() / n as f64;
    println!("train step: {:.2} ms/sample", dt * 1e3);
    let t0 = Instant::now();
    for _ in 0..n {
        model.forward(&x, Mode::Eval).unwrap();
    }
    println!(
        "eval: {:.2} ms/sample",
        t0.elapsed().as_secs_f64() / n as f64 * 1e3
    );
}

//! Independent reference computations for the test suites: central finite
//! differences through the tape and exhaustive pairwise AUC.
//!
//! Compiled for this crate's tests and behind the `oracle` feature.

use crate::loss::{
    classification_loss_on_tape, saliency_loss_on_tape, scheme_total_on_tape, SchemeKind, Sigmas,
};
use crate::model::{Mode, Model, ModelConfig, ModelError};
use crate::{SeededRng, Tape, Tensor, TensorError, Var};

pub const FD_STEP: f64 = 1e-5;
pub const FD_TOLERANCE: f64 = 1e-4;
/// Gradients smaller than this are compared on an absolute scale.
pub const FD_FLOOR: f64 = 1e-5;

/// `|a - n| / max(|a|, |n|, FD_FLOOR)`.
pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(FD_FLOOR)
}

/// `(f(x + h e_i) - f(x - h e_i)) / 2h` for every coordinate.
pub fn central_difference(f: &mut dyn FnMut(&[f64]) -> f64, x: &[f64], h: f64) -> Vec<f64> {
    let mut probe = x.to_vec();
    (0..x.len())
        .map(|i| {
            probe[i] = x[i] + h;
            let up = f(&probe);
            probe[i] = x[i] - h;
            let down = f(&probe);
            probe[i] = x[i];
            (up - down) / (2.0 * h)
        })
        .collect()
}

type Build = dyn Fn(&mut Tape<f64>, &[Var]) -> Result<Var, TensorError>;

/// A scalar function of some tensors, recorded on a fresh tape per call.
pub struct GradCase {
    pub name: &'static str,
    pub inputs: Vec<Tensor<f64>>,
    build: Box<Build>,
}

impl GradCase {
    pub fn new(
        name: &'static str,
        inputs: Vec<Tensor<f64>>,
        build: impl Fn(&mut Tape<f64>, &[Var]) -> Result<Var, TensorError> + 'static,
    ) -> Self {
        Self {
            name,
            inputs,
            build: Box::new(build),
        }
    }

    fn value(&self, inputs: &[Tensor<f64>]) -> Result<f64, TensorError> {
        let mut tape = Tape::new();
        let vars: Vec<Var> = inputs.iter().map(|t| tape.leaf(t.clone(), true)).collect();
        let out = (self.build)(&mut tape, &vars)?;
        Ok(tape.value(out).item())
    }

    /// Largest relative error between tape and finite-difference gradients
    /// over every input element.
    pub fn max_error(&self, h: f64) -> Result<f64, TensorError> {
        let mut tape = Tape::new();
        let vars: Vec<Var> = self.inputs.iter().map(|t| tape.leaf(t.clone(), true)).collect();
        let out = (self.build)(&mut tape, &vars)?;
        tape.backward(out)?;
        let mut worst = 0.0f64;
        for (k, v) in vars.iter().enumerate() {
            let analytic = tape
                .grad(*v)
                .unwrap_or_else(|| Tensor::zeros(self.inputs[k].shape()));
            let mut probe = self.inputs.clone();
            let base = self.inputs[k].data().to_vec();
            let mut err = None;
            let numeric = central_difference(
                &mut |x: &[f64]| {
                    probe[k].data_mut().copy_from_slice(x);
                    match self.value(&probe) {
                        Ok(v) => v,
                        Err(e) => {
                            err = Some(e);
                            f64::NAN
                        }
                    }
                },
                &base,
                h,
            );
            if let Some(e) = err {
                return Err(e);
            }
            for (a, n) in analytic.data().iter().zip(&numeric) {
                worst = worst.max(relative_error(*a, *n));
            }
        }
        Ok(worst)
    }
}

fn normal(rng: &mut SeededRng, shape: &[usize]) -> Tensor<f64> {
    let n = shape.iter().product();
    Tensor::new(shape.to_vec(), (0..n).map(|_| rng.normal()).collect()).expect("shape")
}

fn uniform(rng: &mut SeededRng, shape: &[usize], lo: f64, hi: f64) -> Tensor<f64> {
    let n = shape.iter().product();
    Tensor::new(
        shape.to_vec(),
        (0..n).map(|_| rng.uniform_range(lo, hi)).collect(),
    )
    .expect("shape")
}

/// `sum(v * r)` for a fixed random `r`, reducing any output to a scalar.
fn project(tape: &mut Tape<f64>, v: Var, r: &Tensor<f64>) -> Result<Var, TensorError> {
    let w = tape.input(r.clone());
    let p = tape.mul(v, w)?;
    Ok(tape.sum(p))
}

/// One case per differentiable primitive, with inputs drawn from `seed`.
pub fn primitive_cases(seed: u64) -> Vec<GradCase> {
    let mut rng = SeededRng::new(seed);
    let mut cases = Vec::new();

    macro_rules! projected {
        ($name:expr, $inputs:expr, $out_shape:expr, |$t:ident, $v:ident| $body:expr) => {{
            let r = normal(&mut rng, &$out_shape);
            cases.push(GradCase::new($name, $inputs, move |$t, $v| {
                let out = $body?;
                project($t, out, &r)
            }));
        }};
    }

    let ins = vec![
        normal(&mut rng, &[5]),
        normal(&mut rng, &[4, 5]),
        normal(&mut rng, &[4]),
    ];
    projected!("dense", ins, [4], |t, v| t.dense(v[0], v[1], v[2]));
    for (k, c_in, c_out, h, w) in [(3, 2, 3, 5, 6), (1, 3, 2, 4, 4), (5, 1, 2, 6, 6)] {
        let ins = vec![
            normal(&mut rng, &[c_in, h, w]),
            normal(&mut rng, &[c_out, c_in, k, k]),
            normal(&mut rng, &[c_out]),
        ];
        let name = match k {
            1 => "conv2d_k1",
            3 => "conv2d_k3",
            _ => "conv2d_k5",
        };
        projected!(name, ins, [c_out, h, w], |t, v| t.conv2d(v[0], v[1], v[2]));
    }
    projected!(
        "max_pool2",
        vec![normal(&mut rng, &[2, 4, 6])],
        [2, 2, 3],
        |t, v| t.max_pool2(v[0])
    );
    projected!(
        "upsample_nearest2",
        vec![normal(&mut rng, &[2, 3, 3])],
        [2, 6, 6],
        |t, v| t.upsample_nearest2(v[0])
    );
    let ins = vec![
        normal(&mut rng, &[2, 3, 3]),
        normal(&mut rng, &[3, 2, 3, 3]),
        normal(&mut rng, &[3]),
    ];
    projected!("upsample2", ins, [3, 6, 6], |t, v| t.upsample2(v[0], v[1], v[2]));
    let ins = vec![normal(&mut rng, &[2, 3, 3]), normal(&mut rng, &[1, 3, 3])];
    projected!("concat_features", ins, [3, 3, 3], |t, v| t
        .concat_features(v[0], v[1]));
    projected!("relu", vec![normal(&mut rng, &[20])], [20], |t, v| Ok::<
        _,
        TensorError,
    >(
        t.relu(v[0])
    ));
    projected!(
        "global_avg_pool",
        vec![normal(&mut rng, &[3, 4, 4])],
        [3],
        |t, v| t.global_avg_pool(v[0])
    );
    projected!("softmax_vec", vec![normal(&mut rng, &[6])], [6], |t, v| Ok::<
        _,
        TensorError,
    >(
        t.softmax_vec(v[0])
    ));
    projected!(
        "softmax_spatial",
        vec![normal(&mut rng, &[2, 3, 4])],
        [2, 3, 4],
        |t, v| t.softmax_spatial(v[0])
    );
    let mask_seed = rng.below(1 << 30) as u64;
    projected!("dropout", vec![normal(&mut rng, &[30])], [30], |t, v| t.dropout(
        v[0],
        0.4,
        true,
        &mut SeededRng::new(mask_seed)
    ));

    let mut target = uniform(&mut rng, &[6], 0.0, 1.0);
    target.data_mut()[2] = 0.0;
    let total = target.sum();
    target.data_mut().iter_mut().for_each(|q| *q /= total);
    cases.push(GradCase::new(
        "cross_entropy",
        vec![uniform(&mut rng, &[6], 0.05, 1.0)],
        move |t, v| t.cross_entropy(&target, v[0]),
    ));

    let shape = [3, 4];
    let away = |rng: &mut SeededRng| {
        let mut b = uniform(rng, &shape, 0.5, 2.0);
        for (i, x) in b.data_mut().iter_mut().enumerate() {
            if i % 2 == 1 {
                *x = -*x;
            }
        }
        b
    };
    let ins = vec![normal(&mut rng, &shape), normal(&mut rng, &shape)];
    projected!("add", ins, shape, |t, v| t.add(v[0], v[1]));
    let ins = vec![normal(&mut rng, &shape), normal(&mut rng, &shape)];
    projected!("sub", ins, shape, |t, v| t.sub(v[0], v[1]));
    let ins = vec![normal(&mut rng, &shape), normal(&mut rng, &shape)];
    projected!("mul", ins, shape, |t, v| t.mul(v[0], v[1]));
    let ins = vec![normal(&mut rng, &shape), away(&mut rng)];
    projected!("div", ins, shape, |t, v| t.div(v[0], v[1]));
    let c = rng.normal();
    projected!("scale", vec![normal(&mut rng, &shape)], shape, |t, v| Ok::<
        _,
        TensorError,
    >(
        t.scale(v[0], c)
    ));
    projected!("add_scalar", vec![normal(&mut rng, &shape)], shape, |t, v| Ok::<
        _,
        TensorError,
    >(
        t.add_scalar(v[0], c)
    ));
    projected!(
        "ln",
        vec![uniform(&mut rng, &shape, 0.2, 3.0)],
        shape,
        |t, v| Ok::<_, TensorError>(t.ln(v[0]))
    );
    let r = normal(&mut rng, &[1]);
    cases.push(GradCase::new(
        "sum",
        vec![normal(&mut rng, &shape)],
        move |t, v| {
            let s = t.sum(v[0]);
            let s = t.reshape(s, &[1])?;
            project(t, s, &r)
        },
    ));
    projected!("reshape", vec![normal(&mut rng, &shape)], [2, 6], |t, v| t
        .reshape(v[0], &[2, 6]));
    cases
}

/// Small network configuration used by the whole-model check.
pub fn small_config(variant: crate::model::Variant) -> ModelConfig {
    ModelConfig {
        input_height: 8,
        input_width: 8,
        depth: 2,
        base_features: 2,
        num_classes: 3,
        variant,
        dropout_rate: 0.25,
        head_hidden: 4,
    }
}

struct ModelProblem {
    model: Model<f64>,
    sigmas: Sigmas<f64>,
    scheme: SchemeKind,
    image: Tensor<f64>,
    saliency: Tensor<f64>,
    label: Tensor<f64>,
    dropout_seed: u64,
}

impl ModelProblem {
    /// Records the scheme total for a training-mode pass with a fixed mask.
    fn record(&self, tape: &mut Tape<f64>) -> Result<Var, ModelError> {
        let x = tape.input(self.image.clone());
        let mut rng = SeededRng::new(self.dropout_seed);
        let out = self.model.forward_on_tape(tape, x, Mode::Train(&mut rng))?;
        let ls = out
            .saliency
            .map(|p| saliency_loss_on_tape(tape, &self.saliency, p))
            .transpose()
            .map_err(loss_err)?;
        let lc = out
            .class_probs
            .map(|p| classification_loss_on_tape(tape, &self.label, p))
            .transpose()
            .map_err(loss_err)?;
        let (s, c) = self.sigmas.bind(tape, self.scheme);
        scheme_total_on_tape(tape, self.scheme, ls, lc, s, c).map_err(loss_err)
    }

    fn margin(&self) -> Result<f64, ModelError> {
        let mut tape = Tape::new();
        self.record(&mut tape)?;
        Ok(tape.kink_margin())
    }

    fn total(&self) -> Result<f64, ModelError> {
        let mut tape = Tape::new();
        let v = self.record(&mut tape)?;
        Ok(tape.value(v).item())
    }
}

fn loss_err(e: crate::loss::LossError) -> ModelError {
    match e {
        crate::loss::LossError::Tensor(t) => ModelError::Tensor(t),
        other => ModelError::InvalidConfig(other.to_string()),
    }
}

/// Required distance from any ReLU kink or max-pool tie, far above the
/// perturbation a finite-difference step can cause.
pub const KINK_MARGIN: f64 = 1e-3;

/// Draws network, input and targets from `rng` at a point at least
/// [`KINK_MARGIN`] away from every kink.
fn generic_problem(
    config: &ModelConfig,
    scheme: SchemeKind,
    rng: &mut SeededRng,
) -> Result<ModelProblem, ModelError> {
    loop {
        let mut model = Model::<f64>::build(config, rng)?;
        // Zero biases put dead receptive fields exactly on a ReLU kink.
        for p in model.params_mut().iter_mut() {
            for v in p.value_mut().data_mut() {
                *v += 0.05 * rng.normal();
            }
        }
        let (h, w, c) = (config.input_height, config.input_width, config.num_classes);
        let mut saliency = uniform(rng, &[h, w], 0.0, 1.0);
        let total = saliency.sum();
        saliency.data_mut().iter_mut().for_each(|v| *v /= total);
        let mut label = Tensor::zeros(&[c]);
        label.data_mut()[rng.below(c)] = 1.0;
        let mut sigmas = Sigmas::new();
        for p in sigmas.store_mut().iter_mut() {
            p.value_mut().data_mut()[0] = rng.uniform_range(0.5, 1.5);
        }
        let problem = ModelProblem {
            model,
            sigmas,
            scheme,
            image: uniform(rng, &[1, h, w], 0.0, 1.0),
            saliency,
            label,
            dropout_seed: rng.below(1 << 30) as u64,
        };
        if problem.margin()? > KINK_MARGIN {
            return Ok(problem);
        }
    }
}

/// Largest relative error of the scheme-total gradient with respect to
/// every network parameter and both σ values, at a generic point drawn
/// from `seed`.
pub fn model_max_error(config: &ModelConfig, scheme: SchemeKind, seed: u64) -> Result<f64, ModelError> {
    let mut rng = SeededRng::new(seed);
    let mut problem = generic_problem(config, scheme, &mut rng)?;

    let mut tape = Tape::new();
    let out = problem.record(&mut tape)?;
    tape.backward(out)?;
    tape.accumulate_param_grads(problem.model.params_mut());
    tape.accumulate_param_grads(problem.sigmas.store_mut());

    let mut worst = 0.0f64;
    let model_params = problem.model.params().len();
    let total_params = model_params + problem.sigmas.store().len();
    for k in 0..total_params {
        let (analytic, base) = {
            let p = if k < model_params {
                problem.model.params().iter().nth(k)
            } else {
                problem.sigmas.store().iter().nth(k - model_params)
            }
            .expect("index in range");
            (p.grad().data().to_vec(), p.value().data().to_vec())
        };
        for (e, a) in analytic.iter().enumerate() {
            let mut eval_at = |v: f64| -> Result<f64, ModelError> {
                set_param(&mut problem, k, model_params, e, v);
                problem.total()
            };
            let up = eval_at(base[e] + FD_STEP)?;
            let down = eval_at(base[e] - FD_STEP)?;
            eval_at(base[e])?;
            let n = (up - down) / (2.0 * FD_STEP);
            worst = worst.max(relative_error(*a, n));
        }
    }
    Ok(worst)
}

fn set_param(problem: &mut ModelProblem, k: usize, model_params: usize, e: usize, v: f64) {
    let p = if k < model_params {
        problem.model.params_mut().iter_mut().nth(k)
    } else {
        problem.sigmas.store_mut().iter_mut().nth(k - model_params)
    }
    .expect("index in range");
    p.value_mut().data_mut()[e] = v;
}

/// `Σ q ln(q/r)` over the support of `q`, summed term by term.
pub fn kl_divergence(q: &[f64], r: &[f64]) -> f64 {
    q.iter()
        .zip(r)
        .filter(|(&qi, _)| qi > 0.0)
        .map(|(&qi, &ri)| qi * (qi / ri).ln())
        .sum()
}

/// `#{p > n} + ½ #{p = n}` over all pairs, divided by the pair count.
pub fn pairwise_auc(pos: &[f64], neg: &[f64]) -> f64 {
    let mut u = 0.0;
    for &p in pos {
        for &n in neg {
            if p > n {
                u += 1.0;
            } else if p == n {
                u += 0.5;
            }
        }
    }
    u / (pos.len() as f64 * neg.len() as f64)
}

fn column_of(scores: &[Vec<f64>], labels: &[usize], k: usize, of: usize) -> Vec<f64> {
    scores
        .iter()
        .zip(labels)
        .filter(|(_, &l)| l == of)
        .map(|(s, _)| s[k])
        .collect()
}

/// Hand & Till AUC from exhaustive pair counts.
pub fn hand_till_auc(scores: &[Vec<f64>], labels: &[usize]) -> f64 {
    let classes = scores[0].len();
    let mut total = 0.0;
    let mut pairs = 0usize;
    for i in 0..classes {
        for j in i + 1..classes {
            let a_ij = pairwise_auc(&column_of(scores, labels, i, i), &column_of(scores, labels, i, j));
            let a_ji = pairwise_auc(&column_of(scores, labels, j, j), &column_of(scores, labels, j, i));
            total += (a_ij + a_ji) / 2.0;
            pairs += 1;
        }
    }
    total / pairs as f64
}

/// One-vs-rest AUC of class `k` from exhaustive pair counts.
pub fn one_vs_rest_auc(scores: &[Vec<f64>], labels: &[usize], k: usize) -> f64 {
    let pos: Vec<f64> = column_of(scores, labels, k, k);
    let neg: Vec<f64> = scores
        .iter()
        .zip(labels)
        .filter(|(_, &l)| l != k)
        .map(|(s, _)| s[k])
        .collect();
    pairwise_auc(&pos, &neg)
}

/// Random multi-class scores with deliberate ties, every class present.
pub fn tied_scores(rng: &mut SeededRng, n: usize, classes: usize) -> (Vec<Vec<f64>>, Vec<usize>) {
    let mut labels: Vec<usize> = (0..n)
        .map(|i| if i < classes { i } else { rng.below(classes) })
        .collect();
    rng.shuffle(&mut labels);
    let levels = 1 + rng.below(6);
    let scores = (0..n)
        .map(|_| {
            (0..classes)
                .map(|_| rng.below(levels + 1) as f64 / levels as f64)
                .collect()
        })
        .collect();
    (scores, labels)
}

//! Component losses, uncertainty-weighted balancing schemes and the
//! equilibrium analysis of a trainable uncertainty scalar.
//!
//! For one task with loss `L` and uncertainty `σ` the balanced objective is
//! `L/σ² + ln(σ+1)`. Its stationary point satisfies `L = f(σ̃) = σ̃³/(2σ̃+2)`,
//! and since `f` is strictly increasing a falling `L` drags `σ̃` down and
//! raises the effective learning rate `r/σ̃²`.

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::tensor::{ParamId, ParamStore, Real, Tape, Tensor, TensorError, Var, LOG_FLOOR};

/// Lower bound applied to σ after every optimizer step.
pub const SIGMA_FLOOR: f64 = 1e-4;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum LossError {
    #[error("length mismatch: {0} vs {1}")]
    LengthMismatch(usize, usize),
    #[error("sigma must be positive, got {0}")]
    NonPositiveSigma(f64),
    #[error("equilibrium inverse needs a positive loss, got {0}")]
    NonPositiveLoss(f64),
    #[error("sigma descent diverged at step {step} (sigma = {sigma})")]
    Divergence { step: usize, sigma: f64 },
    #[error("invalid argument: {0}")]
    InvalidArgument(String),
    #[error(transparent)]
    Tensor(#[from] TensorError),
}

/// `-Σ q_i ln(max(r_i, 1e-12))` with `0·ln 0 = 0`.
pub fn cross_entropy(q: &[f64], r: &[f64]) -> Result<f64, LossError> {
    if q.len() != r.len() {
        return Err(LossError::LengthMismatch(q.len(), r.len()));
    }
    Ok(q.iter()
        .zip(r)
        .filter(|(&qi, _)| qi != 0.0)
        .map(|(&qi, &ri)| -qi * ri.max(LOG_FLOOR).ln())
        .sum())
}

pub fn entropy(q: &[f64]) -> f64 {
    cross_entropy(q, q).expect("same length")
}

/// KLD saliency loss written as `H(ȳ, y) - H(ȳ)`.
pub fn saliency_loss(truth: &[f64], pred: &[f64]) -> Result<f64, LossError> {
    Ok(cross_entropy(truth, pred)? - entropy(truth))
}

/// Cross-entropy classification loss `H(ȳ, y)`.
pub fn classification_loss(truth: &[f64], pred: &[f64]) -> Result<f64, LossError> {
    cross_entropy(truth, pred)
}

/// Which uncertainty terms enter the total loss.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum SchemeKind {
    /// Both losses scaled: `L_s/σ_s² + L_c/σ_c² + ln(σ_s+1) + ln(σ_c+1)`.
    #[serde(rename = "MTLS1")]
    Mtls1,
    /// Saliency loss scaled only: `L_s/σ_s² + L_c + ln(σ_s+1)`.
    #[serde(rename = "MTLS2")]
    Mtls2,
    /// Classification loss scaled only: `L_s + L_c/σ_c² + ln(σ_c+1)`.
    #[serde(rename = "MTLS3")]
    Mtls3,
}

impl SchemeKind {
    pub const ALL: [SchemeKind; 3] = [SchemeKind::Mtls1, SchemeKind::Mtls2, SchemeKind::Mtls3];

    pub fn as_str(&self) -> &'static str {
        match self {
            SchemeKind::Mtls1 => "MTLS1",
            SchemeKind::Mtls2 => "MTLS2",
            SchemeKind::Mtls3 => "MTLS3",
        }
    }

    pub fn scales_saliency(&self) -> bool {
        matches!(self, SchemeKind::Mtls1 | SchemeKind::Mtls2)
    }

    pub fn scales_class(&self) -> bool {
        matches!(self, SchemeKind::Mtls1 | SchemeKind::Mtls3)
    }
}

impl fmt::Display for SchemeKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for SchemeKind {
    type Err = LossError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        SchemeKind::ALL
            .into_iter()
            .find(|k| k.as_str().eq_ignore_ascii_case(s))
            .ok_or_else(|| LossError::InvalidArgument(format!("unknown scheme {s:?}")))
    }
}

/// Decomposition of one evaluation of a balancing scheme.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct LossBreakdown {
    pub l_s: f64,
    pub l_c: f64,
    pub total: f64,
    pub sigma_s: f64,
    pub sigma_c: f64,
    pub r_eff_s: f64,
    pub r_eff_c: f64,
}

/// Evaluates a scheme for given component losses. `lr` is the base learning
/// rate used for the effective-rate fields; a σ that the scheme does not use
/// is reported but ignored.
pub fn scheme_total(
    scheme: SchemeKind,
    l_s: f64,
    l_c: f64,
    sigma_s: f64,
    sigma_c: f64,
    lr: f64,
) -> Result<LossBreakdown, LossError> {
    scheme_total_tasks(scheme, Some(l_s), Some(l_c), sigma_s, sigma_c, lr)
}

/// [`scheme_total`] for single-task networks: an absent task contributes
/// neither its loss nor its regularizer, and is reported with a zero loss.
pub fn scheme_total_tasks(
    scheme: SchemeKind,
    l_s: Option<f64>,
    l_c: Option<f64>,
    sigma_s: f64,
    sigma_c: f64,
    lr: f64,
) -> Result<LossBreakdown, LossError> {
    for s in [sigma_s, sigma_c] {
        if !(s > 0.0) {
            return Err(LossError::NonPositiveSigma(s));
        }
    }
    if l_s.is_none() && l_c.is_none() {
        return Err(LossError::InvalidArgument("no task loss given".into()));
    }
    let term = |l: Option<f64>, sigma: f64, scaled: bool| match (l, scaled) {
        (None, _) => (0.0, lr),
        (Some(l), false) => (l, lr),
        (Some(l), true) => (l / (sigma * sigma) + (sigma + 1.0).ln(), lr / (sigma * sigma)),
    };
    let (ts, r_eff_s) = term(l_s, sigma_s, scheme.scales_saliency());
    let (tc, r_eff_c) = term(l_c, sigma_c, scheme.scales_class());
    Ok(LossBreakdown {
        l_s: l_s.unwrap_or(0.0),
        l_c: l_c.unwrap_or(0.0),
        total: ts + tc,
        sigma_s,
        sigma_c,
        r_eff_s,
        r_eff_c,
    })
}

/// `∂/∂σ [L/σ² + ln(σ+1)] = -2L/σ³ + 1/(σ+1)`.
pub fn sigma_gradient(l: f64, sigma: f64) -> f64 {
    -2.0 * l / sigma.powi(3) + 1.0 / (sigma + 1.0)
}

/// Loss at which `σ̃` is stationary: `σ̃³ / (2σ̃ + 2)`.
pub fn equilibrium_f(sigma: f64) -> f64 {
    sigma.powi(3) / (2.0 * sigma + 2.0)
}

/// `df/dσ̃ = σ̃²(2σ̃+3) / (2(σ̃+1)²)`.
pub fn equilibrium_f_derivative(sigma: f64) -> f64 {
    sigma * sigma * (2.0 * sigma + 3.0) / (2.0 * (sigma + 1.0).powi(2))
}

/// Solves `f(σ̃) = l` by bracketed bisection.
pub fn equilibrium_inverse(l: f64) -> Result<f64, LossError> {
    if !(l > 0.0) || !l.is_finite() {
        return Err(LossError::NonPositiveLoss(l));
    }
    let (mut lo, mut hi) = (0.0_f64, 1.0_f64);
    while equilibrium_f(hi) < l {
        lo = hi;
        hi *= 2.0;
    }
    for _ in 0..400 {
        let mid = 0.5 * (lo + hi);
        let fm = equilibrium_f(mid);
        if (fm - l).abs() < 1e-14 * l.max(1.0) || mid == lo || mid == hi {
            return Ok(mid);
        }
        if fm < l {
            lo = mid;
        } else {
            hi = mid;
        }
    }
    Ok(0.5 * (lo + hi))
}

/// One iterate of [`sigma_descent_trace`].
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct SigmaStep {
    pub step: usize,
    pub loss: f64,
    pub sigma: f64,
    /// `1/σ²`, the effective learning rate relative to the base rate.
    pub rate_multiplier: f64,
}

/// Gradient descent on `L_t/σ² + ln(σ+1)` with the loss fixed at `losses[t]`
/// for step `t`. Returns `σ` before each step plus the final iterate.
pub fn sigma_descent_trace(losses: &[f64], sigma0: f64, step: f64) -> Result<Vec<SigmaStep>, LossError> {
    if !(sigma0 > 0.0) {
        return Err(LossError::NonPositiveSigma(sigma0));
    }
    if !(step > 0.0) {
        return Err(LossError::InvalidArgument(format!(
            "step must be positive, got {step}"
        )));
    }
    if let Some(&bad) = losses.iter().find(|&&l| !(l > 0.0)) {
        return Err(LossError::NonPositiveLoss(bad));
    }
    let mut sigma = sigma0;
    let mut out = Vec::with_capacity(losses.len() + 1);
    for (t, &l) in losses.iter().enumerate() {
        out.push(SigmaStep {
            step: t,
            loss: l,
            sigma,
            rate_multiplier: 1.0 / (sigma * sigma),
        });
        sigma -= step * sigma_gradient(l, sigma);
        if !sigma.is_finite() || sigma <= 0.0 || sigma > 1e8 {
            return Err(LossError::Divergence { step: t, sigma });
        }
    }
    let last = losses.last().copied().unwrap_or(f64::NAN);
    out.push(SigmaStep {
        step: losses.len(),
        loss: last,
        sigma,
        rate_multiplier: 1.0 / (sigma * sigma),
    });
    Ok(out)
}

/// Records `H(ȳ, y) - H(ȳ)` on the tape. The entropy term is a constant.
pub fn saliency_loss_on_tape<T: Real>(
    tape: &mut Tape<T>,
    truth: &Tensor<T>,
    pred: Var,
) -> Result<Var, LossError> {
    let ce = tape.cross_entropy(truth, pred)?;
    let h: f64 = entropy(&truth.to_f64_vec());
    Ok(tape.add_scalar(ce, T::lit(-h)))
}

pub fn classification_loss_on_tape<T: Real>(
    tape: &mut Tape<T>,
    truth: &Tensor<T>,
    pred: Var,
) -> Result<Var, LossError> {
    Ok(tape.cross_entropy(truth, pred)?)
}

fn scaled_term<T: Real>(tape: &mut Tape<T>, l: Var, sigma: Var) -> Result<Var, LossError> {
    let sq = tape.mul(sigma, sigma)?;
    let scaled = tape.div(l, sq)?;
    let shifted = tape.add_scalar(sigma, T::one());
    let reg = tape.ln(shifted);
    Ok(tape.add(scaled, reg)?)
}

/// Records the scheme total. An absent task loss drops that task's terms;
/// σ handles are only read for the terms the scheme uses.
pub fn scheme_total_on_tape<T: Real>(
    tape: &mut Tape<T>,
    scheme: SchemeKind,
    l_s: Option<Var>,
    l_c: Option<Var>,
    sigma_s: Option<Var>,
    sigma_c: Option<Var>,
) -> Result<Var, LossError> {
    let missing = |name: &str| LossError::InvalidArgument(format!("{scheme} needs {name}"));
    let s_term = match l_s {
        Some(l) if scheme.scales_saliency() => {
            Some(scaled_term(tape, l, sigma_s.ok_or_else(|| missing("sigma_s"))?)?)
        }
        other => other,
    };
    let c_term = match l_c {
        Some(l) if scheme.scales_class() => {
            Some(scaled_term(tape, l, sigma_c.ok_or_else(|| missing("sigma_c"))?)?)
        }
        other => other,
    };
    match (s_term, c_term) {
        (Some(a), Some(b)) => Ok(tape.add(a, b)?),
        (Some(a), None) | (None, Some(a)) => Ok(a),
        (None, None) => Err(LossError::InvalidArgument("no task loss given".into())),
    }
}

/// The two trainable uncertainty scalars, both initialized to exactly 1.
#[derive(Clone, Debug)]
pub struct Sigmas<T> {
    store: ParamStore<T>,
    s: ParamId,
    c: ParamId,
}

impl<T: Real> Default for Sigmas<T> {
    fn default() -> Self {
        Self::new()
    }
}

impl<T: Real> Sigmas<T> {
    pub fn new() -> Self {
        let mut store = ParamStore::new();
        let s = store.add("sigma_s", Tensor::scalar(T::one()));
        let c = store.add("sigma_c", Tensor::scalar(T::one()));
        Self { store, s, c }
    }

    pub fn sigma_s(&self) -> T {
        self.store.get(self.s).value().item()
    }

    pub fn sigma_c(&self) -> T {
        self.store.get(self.c).value().item()
    }

    pub fn store(&self) -> &ParamStore<T> {
        &self.store
    }

    pub fn store_mut(&mut self) -> &mut ParamStore<T> {
        &mut self.store
    }

    /// Puts the σ values the scheme trains on the tape.
    pub fn bind(&self, tape: &mut Tape<T>, scheme: SchemeKind) -> (Option<Var>, Option<Var>) {
        let s = scheme.scales_saliency().then(|| tape.param(&self.store, self.s));
        let c = scheme.scales_class().then(|| tape.param(&self.store, self.c));
        (s, c)
    }

    /// Both values as `f64`, `(σ_s, σ_c)`.
    pub fn values_f64(&self) -> (f64, f64) {
        (
            self.sigma_s().to_f64().unwrap_or(f64::NAN),
            self.sigma_c().to_f64().unwrap_or(f64::NAN),
        )
    }

    /// The σ parameters the scheme trains, for the optimizer.
    pub fn trainable_mut(
        &mut self,
        scheme: SchemeKind,
    ) -> impl Iterator<Item = &mut crate::tensor::Parameter<T>> {
        let (train_s, train_c) = (scheme.scales_saliency(), scheme.scales_class());
        self.store
            .iter_mut()
            .enumerate()
            .filter(move |(i, _)| (*i == 0 && train_s) || (*i == 1 && train_c))
            .map(|(_, p)| p)
    }

    /// Enforces `σ >= SIGMA_FLOOR`.
    pub fn project(&mut self) {
        let floor = T::lit(SIGMA_FLOOR);
        for p in self.store.iter_mut() {
            for v in p.value_mut().data_mut() {
                if *v < floor {
                    *v = floor;
                }
            }
        }
    }
}

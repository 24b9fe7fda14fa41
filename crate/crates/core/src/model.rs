//! MT-UNet: a UNet trunk with a spatial-softmax saliency head and a
//! classification head fed by globally pooled bottleneck and/or top-level
//! decoder features.

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::rng::SeededRng;
use crate::tensor::{ParamId, ParamStore, Real, Tape, Tensor, TensorError, Var};

#[derive(Debug, Error)]
pub enum ModelError {
    #[error("invalid model config: {0}")]
    InvalidConfig(String),
    #[error("input shape {got:?} does not match configured {expected:?}")]
    InputShape { got: Vec<usize>, expected: Vec<usize> },
    #[error(transparent)]
    Tensor(#[from] TensorError),
}

/// Head wiring of the network.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Variant {
    /// Classification from bottleneck and top decoder features.
    #[serde(rename = "MT")]
    Mt,
    /// Classification from bottleneck features only.
    #[serde(rename = "MT-B")]
    MtBottleneck,
    /// Classification from top decoder features only.
    #[serde(rename = "MT-T")]
    MtTop,
    /// Saliency only.
    #[serde(rename = "UNET-S")]
    UnetSaliency,
    /// Classification only, head on the bottleneck.
    #[serde(rename = "UNET-C")]
    UnetClass,
}

impl Variant {
    pub const ALL: [Variant; 5] = [
        Variant::Mt,
        Variant::MtBottleneck,
        Variant::MtTop,
        Variant::UnetSaliency,
        Variant::UnetClass,
    ];

    pub fn as_str(&self) -> &'static str {
        match self {
            Variant::Mt => "MT",
            Variant::MtBottleneck => "MT-B",
            Variant::MtTop => "MT-T",
            Variant::UnetSaliency => "UNET-S",
            Variant::UnetClass => "UNET-C",
        }
    }

    pub fn has_saliency(&self) -> bool {
        !matches!(self, Variant::UnetClass)
    }

    pub fn has_classifier(&self) -> bool {
        !matches!(self, Variant::UnetSaliency)
    }

    fn pools_bottleneck(&self) -> bool {
        matches!(self, Variant::Mt | Variant::MtBottleneck | Variant::UnetClass)
    }

    fn pools_top(&self) -> bool {
        matches!(self, Variant::Mt | Variant::MtTop)
    }
}

impl fmt::Display for Variant {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Variant {
    type Err = ModelError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        Variant::ALL
            .into_iter()
            .find(|v| v.as_str().eq_ignore_ascii_case(s))
            .ok_or_else(|| ModelError::InvalidConfig(format!("unknown variant {s:?}")))
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ModelConfig {
    pub input_height: usize,
    pub input_width: usize,
    /// Number of encoder levels (max-pool steps).
    pub depth: usize,
    /// Features at the top level; doubled at every level below.
    pub base_features: usize,
    pub num_classes: usize,
    pub variant: Variant,
    pub dropout_rate: f64,
    pub head_hidden: usize,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            input_height: 64,
            input_width: 64,
            depth: 3,
            base_features: 8,
            num_classes: 3,
            variant: Variant::Mt,
            dropout_rate: 0.25,
            head_hidden: 32,
        }
    }
}

impl ModelConfig {
    pub fn validate(&self) -> Result<(), ModelError> {
        let bad = |m: String| Err(ModelError::InvalidConfig(m));
        if self.depth == 0 {
            return bad("depth must be at least 1".into());
        }
        let step = 1usize
            .checked_shl(self.depth as u32)
            .filter(|s| *s > 0)
            .ok_or_else(|| ModelError::InvalidConfig("depth too large".into()))?;
        if self.input_height == 0
            || self.input_width == 0
            || !self.input_height.is_multiple_of(step)
            || !self.input_width.is_multiple_of(step)
        {
            return bad(format!(
                "input {}x{} must be a positive multiple of 2^depth = {step}",
                self.input_height, self.input_width
            ));
        }
        if self.num_classes < 2 {
            return bad(format!("num_classes must be >= 2, got {}", self.num_classes));
        }
        if !(0.0..1.0).contains(&self.dropout_rate) {
            return bad(format!(
                "dropout_rate must lie in [0, 1), got {}",
                self.dropout_rate
            ));
        }
        if self.base_features == 0 || self.head_hidden == 0 {
            return bad("base_features and head_hidden must be positive".into());
        }
        Ok(())
    }

    /// Feature width at encoder level `level` (`depth` is the bottleneck).
    pub fn features_at(&self, level: usize) -> usize {
        self.base_features << level
    }

    /// Width of the pooled vector entering the classification head.
    pub fn head_input_width(&self) -> usize {
        let mut w = 0;
        if self.variant.pools_bottleneck() {
            w += self.features_at(self.depth);
        }
        if self.variant.pools_top() {
            w += self.features_at(0);
        }
        w
    }
}

/// Training or inference pass. Dropout draws from the rng in training mode.
pub enum Mode<'a> {
    Eval,
    Train(&'a mut SeededRng),
}

/// Probability outputs of one forward pass.
#[derive(Clone, Debug, PartialEq)]
pub struct ModelOutput<T> {
    /// `[H, W]` spatial distribution.
    pub saliency: Option<Tensor<T>>,
    /// `[C]` class probabilities.
    pub class_probs: Option<Tensor<T>>,
}

/// Tape handles of the two outputs.
#[derive(Clone, Copy, Debug)]
pub struct OutputVars {
    pub saliency: Option<Var>,
    pub class_probs: Option<Var>,
}

#[derive(Clone, Copy, Debug)]
struct Conv {
    weight: ParamId,
    bias: ParamId,
}

#[derive(Clone, Copy, Debug)]
struct Dense {
    weight: ParamId,
    bias: ParamId,
}

#[derive(Clone, Debug)]
struct Level {
    first: Conv,
    second: Conv,
}

#[derive(Clone, Debug)]
struct DecoderLevel {
    up: Conv,
    block: Level,
}

#[derive(Clone, Debug)]
struct ClassHead {
    hidden: Dense,
    out: Dense,
}

#[derive(Clone, Debug)]
pub struct Model<T> {
    config: ModelConfig,
    params: ParamStore<T>,
    encoder: Vec<Level>,
    bottleneck: Level,
    /// Ordered top (level 0) to bottom.
    decoder: Vec<DecoderLevel>,
    saliency_head: Option<Conv>,
    class_head: Option<ClassHead>,
    zero_skips: bool,
}

const KERNEL: usize = 3;

struct Builder<'a, T> {
    params: ParamStore<T>,
    rng: &'a mut SeededRng,
}

impl<T: Real> Builder<'_, T> {
    fn he(&mut self, shape: &[usize], fan_in: usize) -> Tensor<T> {
        let std = (2.0 / fan_in as f64).sqrt();
        let n: usize = shape.iter().product();
        let data = (0..n).map(|_| T::lit(self.rng.normal() * std)).collect();
        Tensor::new(shape.to_vec(), data).expect("shape product")
    }

    fn conv(&mut self, name: &str, c_in: usize, c_out: usize, k: usize) -> Conv {
        let w = self.he(&[c_out, c_in, k, k], c_in * k * k);
        Conv {
            weight: self.params.add(format!("{name}.weight"), w),
            bias: self.params.add(format!("{name}.bias"), Tensor::zeros(&[c_out])),
        }
    }

    fn dense(&mut self, name: &str, n_in: usize, n_out: usize) -> Dense {
        let w = self.he(&[n_out, n_in], n_in);
        Dense {
            weight: self.params.add(format!("{name}.weight"), w),
            bias: self.params.add(format!("{name}.bias"), Tensor::zeros(&[n_out])),
        }
    }

    fn level(&mut self, name: &str, c_in: usize, c_out: usize) -> Level {
        Level {
            first: self.conv(&format!("{name}.conv1"), c_in, c_out, KERNEL),
            second: self.conv(&format!("{name}.conv2"), c_out, c_out, KERNEL),
        }
    }
}

impl<T: Real> Model<T> {
    /// Builds the network with He-initialized weights and zero biases.
    pub fn build(config: &ModelConfig, rng: &mut SeededRng) -> Result<Self, ModelError> {
        config.validate()?;
        let mut b = Builder {
            params: ParamStore::new(),
            rng,
        };
        let depth = config.depth;
        let mut encoder = Vec::with_capacity(depth);
        let mut c_in = 1;
        for level in 0..depth {
            let f = config.features_at(level);
            encoder.push(b.level(&format!("enc{level}"), c_in, f));
            c_in = f;
        }
        let bottleneck = b.level("bottleneck", c_in, config.features_at(depth));
        let mut decoder = Vec::with_capacity(depth);
        for level in (0..depth).rev() {
            let f = config.features_at(level);
            let up = b.conv(
                &format!("dec{level}.up"),
                config.features_at(level + 1),
                f,
                KERNEL,
            );
            let block = b.level(&format!("dec{level}"), 2 * f, f);
            decoder.push(DecoderLevel { up, block });
        }
        decoder.reverse();

        let saliency_head = config
            .variant
            .has_saliency()
            .then(|| b.conv("saliency_head", config.features_at(0), 1, 1));
        let class_head = config.variant.has_classifier().then(|| ClassHead {
            hidden: b.dense("class_head.hidden", config.head_input_width(), config.head_hidden),
            out: b.dense("class_head.out", config.head_hidden, config.num_classes),
        });

        Ok(Self {
            config: config.clone(),
            params: b.params,
            encoder,
            bottleneck,
            decoder,
            saliency_head,
            class_head,
            zero_skips: false,
        })
    }

    pub fn config(&self) -> &ModelConfig {
        &self.config
    }

    pub fn params(&self) -> &ParamStore<T> {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut ParamStore<T> {
        &mut self.params
    }

    /// Exact number of trainable scalars.
    pub fn parameter_count(&self) -> usize {
        self.params.numel()
    }

    /// Copy of the model in another precision; parameter order preserved.
    pub fn cast<U: Real>(&self) -> Model<U> {
        let mut params = ParamStore::new();
        let mut remap = Vec::new();
        for p in self.params.iter() {
            remap.push(params.add(p.name(), p.value().cast()));
        }
        let map = |id: ParamId| remap[id.index()];
        let conv = |c: &Conv| Conv {
            weight: map(c.weight),
            bias: map(c.bias),
        };
        let level = |l: &Level| Level {
            first: conv(&l.first),
            second: conv(&l.second),
        };
        Model {
            config: self.config.clone(),
            encoder: self.encoder.iter().map(level).collect(),
            bottleneck: level(&self.bottleneck),
            decoder: self
                .decoder
                .iter()
                .map(|d| DecoderLevel {
                    up: conv(&d.up),
                    block: level(&d.block),
                })
                .collect(),
            saliency_head: self.saliency_head.as_ref().map(conv),
            class_head: self.class_head.as_ref().map(|h| ClassHead {
                hidden: Dense {
                    weight: map(h.hidden.weight),
                    bias: map(h.hidden.bias),
                },
                out: Dense {
                    weight: map(h.out.weight),
                    bias: map(h.out.bias),
                },
            }),
            zero_skips: self.zero_skips,
            params,
        }
    }

    #[doc(hidden)]
    /// Feeds zeros in place of every skip connection. Diagnostic only.
    pub fn with_zeroed_skips(mut self) -> Self {
        self.zero_skips = true;
        self
    }

    fn conv(&self, tape: &mut Tape<T>, x: Var, c: &Conv) -> Result<Var, TensorError> {
        let w = tape.param(&self.params, c.weight);
        let b = tape.param(&self.params, c.bias);
        tape.conv2d(x, w, b)
    }

    fn dense(&self, tape: &mut Tape<T>, x: Var, d: &Dense) -> Result<Var, TensorError> {
        let w = tape.param(&self.params, d.weight);
        let b = tape.param(&self.params, d.bias);
        tape.dense(x, w, b)
    }

    fn block(&self, tape: &mut Tape<T>, x: Var, l: &Level) -> Result<Var, TensorError> {
        let h = self.conv(tape, x, &l.first)?;
        let h = tape.relu(h);
        let h = self.conv(tape, h, &l.second)?;
        Ok(tape.relu(h))
    }

    /// Records the forward pass on `tape`. `x` must be `[1, H, W]`.
    pub fn forward_on_tape(
        &self,
        tape: &mut Tape<T>,
        x: Var,
        mode: Mode<'_>,
    ) -> Result<OutputVars, ModelError> {
        let expected = [1, self.config.input_height, self.config.input_width];
        if tape.shape(x) != expected {
            return Err(ModelError::InputShape {
                got: tape.shape(x).to_vec(),
                expected: expected.to_vec(),
            });
        }
        let variant = self.config.variant;

        let mut skips = Vec::with_capacity(self.encoder.len());
        let mut h = x;
        for level in &self.encoder {
            let s = self.block(tape, h, level)?;
            skips.push(s);
            h = tape.max_pool2(s)?;
        }
        let bottleneck = self.block(tape, h, &self.bottleneck)?;

        let need_decoder = variant.has_saliency() || variant.pools_top();
        let mut top = None;
        if need_decoder {
            let mut h = bottleneck;
            for (level, skip) in self.decoder.iter().zip(&skips).rev() {
                let w = tape.param(&self.params, level.up.weight);
                let b = tape.param(&self.params, level.up.bias);
                let up = tape.upsample2(h, w, b)?;
                let skip = if self.zero_skips {
                    tape.input(Tensor::zeros(tape.shape(*skip)))
                } else {
                    *skip
                };
                let cat = tape.concat_features(skip, up)?;
                h = self.block(tape, cat, &level.block)?;
            }
            top = Some(h);
        }

        let saliency = match (&self.saliency_head, top) {
            (Some(head), Some(top)) => {
                let logits = self.conv(tape, top, head)?;
                let p = tape.softmax_spatial(logits)?;
                Some(tape.reshape(p, &expected[1..])?)
            }
            _ => None,
        };

        let class_probs = match &self.class_head {
            Some(head) => {
                let mut pooled = None;
                if variant.pools_bottleneck() {
                    pooled = Some(tape.global_avg_pool(bottleneck)?);
                }
                if variant.pools_top() {
                    let t = tape.global_avg_pool(top.expect("decoder evaluated"))?;
                    pooled = Some(match pooled {
                        Some(p) => tape.concat_features(p, t)?,
                        None => t,
                    });
                }
                let pooled = pooled.expect("variant pools at least one tensor");
                let hdn = self.dense(tape, pooled, &head.hidden)?;
                let hdn = tape.relu(hdn);
                let hdn = match mode {
                    Mode::Train(rng) => tape.dropout(hdn, self.config.dropout_rate, true, rng)?,
                    Mode::Eval => hdn,
                };
                let logits = self.dense(tape, hdn, &head.out)?;
                Some(tape.softmax_vec(logits))
            }
            None => None,
        };

        Ok(OutputVars {
            saliency,
            class_probs,
        })
    }

    /// Runs a standalone forward pass and returns the output values.
    pub fn forward(&self, x: &Tensor<T>, mode: Mode<'_>) -> Result<ModelOutput<T>, ModelError> {
        let mut tape = Tape::new();
        let xv = tape.input(x.clone());
        let out = self.forward_on_tape(&mut tape, xv, mode)?;
        Ok(ModelOutput {
            saliency: out.saliency.map(|v| tape.value(v).clone()),
            class_probs: out.class_probs.map(|v| tape.value(v).clone()),
        })
    }
}

/// Closed-form count of the classification head's scalars.
pub fn class_head_size(config: &ModelConfig) -> usize {
    if !config.variant.has_classifier() {
        return 0;
    }
    let n_in = config.head_input_width();
    n_in * config.head_hidden
        + config.head_hidden
        + config.head_hidden * config.num_classes
        + config.num_classes
}

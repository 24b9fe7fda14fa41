//! The training loop: shuffled mini-batches, Adam over the network and the
//! scheme's σ values, per-epoch validation and plateau rollback.

use std::fs;
use std::path::Path;

use mtunet_core::checkpoint;
use mtunet_core::data::{self, Dataset, Split, SplitSpec};
use mtunet_core::loss::{
    classification_loss_on_tape, saliency_loss_on_tape, scheme_total_on_tape, SchemeKind, Sigmas,
};
use mtunet_core::model::{Mode, Model};
use mtunet_core::optim::{self, Adam, Rlrp, RlrpAction, RlrpConfig};
use mtunet_core::{SeededRng, Tape};
use serde::{Deserialize, Serialize};

use crate::config::TrainConfig;
use crate::error::{io_err, LabError};
use crate::evaluate::{self, ensure_dir, EvalReport};

/// Bumped whenever the columns of [`LogRow`] change.
pub const LOG_SCHEMA_VERSION: u32 = 1;
pub const LOG_FILE: &str = "training_log.csv";

/// One completed epoch. Absent tasks leave their loss columns empty.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LogRow {
    pub epoch: usize,
    #[serde(rename = "train_L_s")]
    pub train_l_s: Option<f64>,
    #[serde(rename = "train_L_c")]
    pub train_l_c: Option<f64>,
    pub train_total: f64,
    #[serde(rename = "val_L_s")]
    pub val_l_s: Option<f64>,
    #[serde(rename = "val_L_c")]
    pub val_l_c: Option<f64>,
    pub val_total: f64,
    /// σ values the validation total was computed with.
    pub sigma_s: f64,
    pub sigma_c: f64,
    /// Learning rate after this epoch's scheduler decision.
    pub lr: f64,
    pub r_eff_s: f64,
    pub r_eff_c: f64,
    pub rollback: bool,
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct TrainingLog {
    pub rows: Vec<LogRow>,
}

impl TrainingLog {
    pub fn to_csv(&self) -> Result<String, LabError> {
        let mut w = csv::Writer::from_writer(Vec::new());
        if self.rows.is_empty() {
            w.write_record(LOG_COLUMNS)?;
        }
        for row in &self.rows {
            w.serialize(row)?;
        }
        let bytes = w.into_inner().map_err(|e| LabError::Config(e.to_string()))?;
        Ok(String::from_utf8(bytes).expect("csv output is utf-8"))
    }

    pub fn from_csv(text: &str) -> Result<Self, LabError> {
        let mut r = csv::Reader::from_reader(text.as_bytes());
        let header: Vec<String> = r.headers()?.iter().map(str::to_string).collect();
        if header != LOG_COLUMNS {
            return Err(LabError::Config(format!("unexpected log header {header:?}")));
        }
        let rows = r.deserialize().collect::<Result<Vec<LogRow>, _>>()?;
        Ok(Self { rows })
    }

    pub fn write(&self, path: &Path) -> Result<(), LabError> {
        fs::write(path, self.to_csv()?).map_err(io_err(path))
    }

    /// The row holding the smallest validation total, earliest on ties.
    pub fn best(&self) -> Option<&LogRow> {
        self.rows
            .iter()
            .fold(None, |best: Option<&LogRow>, r| match best {
                Some(b) if !(r.val_total < b.val_total) => Some(b),
                _ => Some(r),
            })
    }
}

pub const LOG_COLUMNS: [&str; 13] = [
    "epoch",
    "train_L_s",
    "train_L_c",
    "train_total",
    "val_L_s",
    "val_L_c",
    "val_total",
    "sigma_s",
    "sigma_c",
    "lr",
    "r_eff_s",
    "r_eff_c",
    "rollback",
];

pub struct TrainOutcome {
    pub config: TrainConfig,
    pub split: Split,
    pub log: TrainingLog,
    pub best_epoch: usize,
    pub best_val_total: f64,
    /// Parameters of the best validation epoch.
    pub model: Model<f32>,
    pub sigmas: Sigmas<f32>,
    pub test: EvalReport,
}

fn effective_rate(scaled: bool, lr: f64, sigma: f64) -> f64 {
    if scaled {
        lr / (sigma * sigma)
    } else {
        lr
    }
}

#[derive(Default)]
struct Running {
    l_s: f64,
    l_c: f64,
    total: f64,
    n: usize,
}

impl Running {
    fn mean(&self, v: f64) -> f64 {
        v / self.n.max(1) as f64
    }
}

pub fn check_dataset(config: &TrainConfig, dataset: &Dataset) -> Result<(), LabError> {
    let m = &config.model;
    if (dataset.height, dataset.width, dataset.num_classes) != (m.input_height, m.input_width, m.num_classes)
    {
        return Err(LabError::Config(format!(
            "dataset is {}x{} with {} classes, model expects {}x{} with {}",
            dataset.height, dataset.width, dataset.num_classes, m.input_height, m.input_width, m.num_classes
        )));
    }
    Ok(())
}

pub fn split_for(config: &TrainConfig, dataset: &Dataset) -> Result<Split, LabError> {
    Ok(data::stratified_split(
        dataset,
        &SplitSpec {
            seed: config.split_seed,
            ..SplitSpec::default()
        },
    )?)
}

/// Trains on `dataset`, calling `on_epoch` after each logged row.
pub fn train_with(
    config: &TrainConfig,
    dataset: &Dataset,
    mut on_epoch: impl FnMut(&LogRow),
) -> Result<TrainOutcome, LabError> {
    config.validate()?;
    check_dataset(config, dataset)?;
    let split = split_for(config, dataset)?;
    let scheme: SchemeKind = config.scheme;
    let variant = config.model.variant;
    let classes = config.model.num_classes;

    let mut root = SeededRng::new(config.seed);
    let mut init_rng = root.fork();
    let mut order_rng = root.fork();
    let mut dropout_rng = root.fork();

    let mut model = Model::<f32>::build(&config.model, &mut init_rng)?;
    let mut sigmas = Sigmas::<f32>::new();
    let mut adam = Adam::<f32>::new(config.lr);
    let mut rlrp = Rlrp::<f32>::new(
        RlrpConfig {
            patience: config.patience,
            ..RlrpConfig::default()
        },
        config.lr,
    );
    let mut log = TrainingLog::default();
    let mut order = split.train.clone();

    for epoch in 1..=config.max_epochs {
        order_rng.shuffle(&mut order);
        let mut run = Running::default();
        for batch in order.chunks(config.batch_size) {
            let seed = 1.0 / batch.len() as f32;
            for &i in batch {
                let sample = &dataset.samples[i];
                let mut tape = Tape::new();
                let x = tape.input(sample.image.clone());
                let out = model.forward_on_tape(&mut tape, x, Mode::Train(&mut dropout_rng))?;
                let l_s = out
                    .saliency
                    .map(|p| saliency_loss_on_tape(&mut tape, &sample.saliency, p))
                    .transpose()?;
                let l_c = out
                    .class_probs
                    .map(|p| classification_loss_on_tape(&mut tape, &sample.one_hot(classes), p))
                    .transpose()?;
                let (s_var, c_var) = sigmas.bind(&mut tape, scheme);
                let total = scheme_total_on_tape(&mut tape, scheme, l_s, l_c, s_var, c_var)?;
                run.l_s += l_s.map_or(0.0, |v| f64::from(tape.value(v).item()));
                run.l_c += l_c.map_or(0.0, |v| f64::from(tape.value(v).item()));
                run.total += f64::from(tape.value(total).item());
                run.n += 1;
                tape.backward_scaled(total, seed)?;
                tape.accumulate_param_grads(model.params_mut());
                tape.accumulate_param_grads(sigmas.store_mut());
            }
            adam.step(model.params_mut().iter_mut().chain(sigmas.trainable_mut(scheme)));
            sigmas.project();
        }

        let preds = evaluate::predict(&model, dataset, &split.val)?;
        let val = evaluate::split_losses(&preds, dataset, scheme, &sigmas, adam.lr())?;
        let action = rlrp.observe(epoch, val.total, || {
            optim::snapshot(&model, &sigmas, epoch, val.total)
        });
        let rollback = match action {
            RlrpAction::None => false,
            RlrpAction::ReduceAndRollback { lr_after, .. } => {
                if let Some(best) = rlrp.best_checkpoint() {
                    optim::restore(&mut model, &mut sigmas, best)?;
                }
                adam.reset();
                adam.set_lr(lr_after);
                true
            }
        };
        let lr = adam.lr();
        let row = LogRow {
            epoch,
            train_l_s: variant.has_saliency().then(|| run.mean(run.l_s)),
            train_l_c: variant.has_classifier().then(|| run.mean(run.l_c)),
            train_total: run.mean(run.total),
            val_l_s: variant.has_saliency().then_some(val.l_s),
            val_l_c: variant.has_classifier().then_some(val.l_c),
            val_total: val.total,
            sigma_s: val.sigma_s,
            sigma_c: val.sigma_c,
            lr,
            r_eff_s: effective_rate(scheme.scales_saliency(), lr, val.sigma_s),
            r_eff_c: effective_rate(scheme.scales_class(), lr, val.sigma_c),
            rollback,
        };
        on_epoch(&row);
        log.rows.push(row);
        if config.max_reductions.is_some_and(|m| rlrp.reductions() > m) {
            break;
        }
    }

    let best = rlrp
        .best_checkpoint()
        .cloned()
        .ok_or_else(|| LabError::Config("no epoch completed".into()))?;
    optim::restore(&mut model, &mut sigmas, &best)?;
    let test = evaluate::evaluate(&model, &sigmas, scheme, dataset, &split.test)?;
    Ok(TrainOutcome {
        config: config.clone(),
        split,
        log,
        best_epoch: best.epoch,
        best_val_total: best.val_loss,
        model,
        sigmas,
        test,
    })
}

pub fn train(config: &TrainConfig, dataset: &Dataset) -> Result<TrainOutcome, LabError> {
    train_with(config, dataset, |_| {})
}

pub const CHECKPOINT_DIR: &str = "checkpoint";
pub const TEST_METRICS_FILE: &str = "test_metrics.csv";
pub const CONFIG_FILE: &str = "config.json";
pub const SUMMARY_FILE: &str = "summary.json";

/// Writes the log, the best checkpoint, the test metrics and the effective
/// config under `out`.
pub fn write_outcome(outcome: &TrainOutcome, out: &Path) -> Result<(), LabError> {
    ensure_dir(out)?;
    outcome.log.write(&out.join(LOG_FILE))?;
    checkpoint::save(
        &out.join(CHECKPOINT_DIR),
        &outcome.model,
        &outcome.sigmas,
        outcome.config.scheme,
        outcome.best_epoch,
        outcome.best_val_total,
    )?;
    let record = outcome.test.record("test", outcome.config.model.num_classes);
    evaluate::write_records(&out.join(TEST_METRICS_FILE), &[record])?;
    let cfg_path = out.join(CONFIG_FILE);
    let text = serde_json::to_string_pretty(&outcome.config).expect("config serializes");
    fs::write(&cfg_path, text).map_err(io_err(&cfg_path))?;
    let summary = serde_json::json!({
        "log_schema_version": LOG_SCHEMA_VERSION,
        "epochs": outcome.log.rows.len(),
        "best_epoch": outcome.best_epoch,
        "best_val_total": outcome.best_val_total,
    });
    let path = out.join(SUMMARY_FILE);
    let text = serde_json::to_string_pretty(&summary).expect("summary serializes");
    fs::write(&path, text).map_err(io_err(&path))
}

/// Loads the configured dataset, trains and writes the outputs.
pub fn cmd_train(config: &TrainConfig, on_epoch: impl FnMut(&LogRow)) -> Result<TrainOutcome, LabError> {
    let path = config
        .dataset
        .as_deref()
        .ok_or_else(|| LabError::Config("dataset path is required".into()))?;
    let dataset = data::load(path)?;
    let outcome = train_with(config, &dataset, on_epoch)?;
    if let Some(out) = &config.out {
        write_outcome(&outcome, out)?;
    }
    Ok(outcome)
}

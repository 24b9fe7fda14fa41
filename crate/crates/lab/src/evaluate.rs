//! Inference over a split and the metric suite.

use std::fs;
use std::path::Path;

use mtunet_core::data::Dataset;
use mtunet_core::loss::{
    classification_loss, saliency_loss, scheme_total_tasks, LossBreakdown, SchemeKind, Sigmas,
};
use mtunet_core::metrics::{self, ClassMetrics, RunRecord};
use mtunet_core::model::{Mode, Model};

use crate::error::{io_err, LabError};

/// Eval-mode outputs for a list of samples, as `f64`.
#[derive(Clone, Debug, Default)]
pub struct Predictions {
    pub indices: Vec<usize>,
    pub saliency: Vec<Vec<f64>>,
    pub class_probs: Vec<Vec<f64>>,
}

pub fn predict(model: &Model<f32>, dataset: &Dataset, indices: &[usize]) -> Result<Predictions, LabError> {
    let mut out = Predictions {
        indices: indices.to_vec(),
        ..Default::default()
    };
    for &i in indices {
        let y = model.forward(&dataset.samples[i].image, Mode::Eval)?;
        if let Some(s) = y.saliency {
            out.saliency.push(s.to_f64_vec());
        }
        if let Some(p) = y.class_probs {
            out.class_probs.push(p.to_f64_vec());
        }
    }
    Ok(out)
}

/// Mean component losses and the scheme total at the current σ values.
pub fn split_losses(
    preds: &Predictions,
    dataset: &Dataset,
    scheme: SchemeKind,
    sigmas: &Sigmas<f32>,
    lr: f64,
) -> Result<LossBreakdown, LabError> {
    let mean = |v: Vec<f64>| v.iter().sum::<f64>() / v.len().max(1) as f64;
    let l_s = if preds.saliency.is_empty() {
        None
    } else {
        let per: Vec<f64> = preds
            .indices
            .iter()
            .zip(&preds.saliency)
            .map(|(&i, p)| saliency_loss(&dataset.samples[i].saliency.to_f64_vec(), p))
            .collect::<Result<_, _>>()?;
        Some(mean(per))
    };
    let l_c = if preds.class_probs.is_empty() {
        None
    } else {
        let per: Vec<f64> = preds
            .indices
            .iter()
            .zip(&preds.class_probs)
            .map(|(&i, p)| {
                let truth = dataset.samples[i].one_hot(dataset.num_classes).to_f64_vec();
                classification_loss(&truth, p)
            })
            .collect::<Result<_, _>>()?;
        Some(mean(per))
    };
    let (sigma_s, sigma_c) = sigmas.values_f64();
    Ok(scheme_total_tasks(scheme, l_s, l_c, sigma_s, sigma_c, lr)?)
}

/// Per-sample saliency metrics averaged over the split. PCC averages the
/// samples where it is defined.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct SaliencySummary {
    pub kld: f64,
    pub pcc: Option<f64>,
    pub hs: f64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct EvalReport {
    pub samples: usize,
    pub losses: LossBreakdown,
    pub has_saliency: bool,
    pub has_classifier: bool,
    pub saliency: Option<SaliencySummary>,
    pub class: Option<ClassMetrics>,
}

pub fn evaluate(
    model: &Model<f32>,
    sigmas: &Sigmas<f32>,
    scheme: SchemeKind,
    dataset: &Dataset,
    indices: &[usize],
) -> Result<EvalReport, LabError> {
    let preds = predict(model, dataset, indices)?;
    let losses = split_losses(&preds, dataset, scheme, sigmas, 1.0)?;
    let saliency = if preds.saliency.is_empty() {
        None
    } else {
        let (mut kld, mut hs, mut pcc, mut defined) = (0.0, 0.0, 0.0, 0usize);
        for (&i, p) in preds.indices.iter().zip(&preds.saliency) {
            let m = metrics::saliency_metrics(&dataset.samples[i].saliency.to_f64_vec(), p)?;
            kld += m.kld;
            hs += m.hs;
            if let Some(r) = m.pcc {
                pcc += r;
                defined += 1;
            }
        }
        let n = preds.saliency.len() as f64;
        Some(SaliencySummary {
            kld: kld / n,
            pcc: (defined > 0).then(|| pcc / defined as f64),
            hs: hs / n,
        })
    };
    let class = if preds.class_probs.is_empty() {
        None
    } else {
        let labels: Vec<usize> = indices.iter().map(|&i| dataset.samples[i].label).collect();
        Some(metrics::class_metrics(&preds.class_probs, &labels)?)
    };
    Ok(EvalReport {
        samples: indices.len(),
        has_saliency: saliency.is_some(),
        has_classifier: class.is_some(),
        losses,
        saliency,
        class,
    })
}

impl EvalReport {
    /// Metric columns, absent values left undefined. Class-wise AUC columns
    /// are always emitted for `num_classes` classes.
    pub fn record(&self, label: impl Into<String>, num_classes: usize) -> RunRecord {
        let mut r = RunRecord::new(label);
        r.push("total", Some(self.losses.total));
        r.push("L_s", self.has_saliency.then_some(self.losses.l_s));
        r.push("L_c", self.has_classifier.then_some(self.losses.l_c));
        r.push("KLD", self.saliency.map(|s| s.kld));
        r.push("PCC", self.saliency.and_then(|s| s.pcc));
        r.push("HS", self.saliency.map(|s| s.hs));
        r.push("ACC", self.class.as_ref().map(|c| c.acc));
        r.push("AUC", self.class.as_ref().map(|c| c.auc));
        for k in 0..num_classes {
            let v = self.class.as_ref().and_then(|c| c.auc_per_class.get(k).copied());
            r.push(&format!("AUC-Y{}", k + 1), v);
        }
        r
    }
}

/// Writes records as CSV: a `run` column, then one column per metric.
pub fn write_records(path: &Path, records: &[RunRecord]) -> Result<(), LabError> {
    let report = metrics::aggregate_runs(records);
    let mut w = csv::Writer::from_path(path)?;
    let mut header = vec!["run".to_string()];
    header.extend(report.columns.iter().cloned());
    w.write_record(&header)?;
    for r in records {
        let mut row = vec![r.label.clone()];
        row.extend(report.columns.iter().map(|c| fmt_opt(r.get(c))));
        w.write_record(&row)?;
    }
    w.flush().map_err(io_err(path))?;
    Ok(())
}

pub(crate) fn fmt_opt(v: Option<f64>) -> String {
    v.map(|x| x.to_string()).unwrap_or_default()
}

pub(crate) fn ensure_dir(dir: &Path) -> Result<(), LabError> {
    fs::create_dir_all(dir).map_err(io_err(dir))
}

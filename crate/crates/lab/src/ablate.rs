//! Scheme and head-placement ablation over several seeds.

use std::fmt;
use std::fs;
use std::path::Path;

use mtunet_core::data::Dataset;
use mtunet_core::loss::SchemeKind;
use mtunet_core::metrics::{aggregate_runs, RunRecord, RunReport};
use mtunet_core::model::Variant;

use crate::config::TrainConfig;
use crate::error::{io_err, LabError};
use crate::evaluate::{ensure_dir, write_records};
use crate::train::{self, TrainOutcome};

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Arm {
    pub variant: Variant,
    pub scheme: SchemeKind,
}

impl fmt::Display for Arm {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}/{}", self.variant, self.scheme)
    }
}

impl Arm {
    /// Directory-safe form of the label.
    pub fn slug(&self) -> String {
        format!("{}_{}", self.variant, self.scheme)
    }
}

/// Schemes on the full network, then head placements under MTLS3.
pub const ARMS: [Arm; 7] = [
    Arm {
        variant: Variant::Mt,
        scheme: SchemeKind::Mtls1,
    },
    Arm {
        variant: Variant::Mt,
        scheme: SchemeKind::Mtls2,
    },
    Arm {
        variant: Variant::Mt,
        scheme: SchemeKind::Mtls3,
    },
    Arm {
        variant: Variant::MtBottleneck,
        scheme: SchemeKind::Mtls3,
    },
    Arm {
        variant: Variant::MtTop,
        scheme: SchemeKind::Mtls3,
    },
    Arm {
        variant: Variant::UnetSaliency,
        scheme: SchemeKind::Mtls3,
    },
    Arm {
        variant: Variant::UnetClass,
        scheme: SchemeKind::Mtls3,
    },
];

#[derive(Clone, Debug)]
pub struct Ablation {
    pub arms: Vec<(Arm, RunReport)>,
}

impl Ablation {
    pub fn report(&self, arm: Arm) -> Option<&RunReport> {
        self.arms.iter().find(|(a, _)| *a == arm).map(|(_, r)| r)
    }

    /// Metrics in first-appearance order across all arms.
    pub fn metrics(&self) -> Vec<String> {
        let mut names: Vec<String> = Vec::new();
        for (_, r) in &self.arms {
            for c in &r.columns {
                if !names.contains(c) {
                    names.push(c.clone());
                }
            }
        }
        names
    }

    /// One row per metric, one column per arm, cells `median±std`.
    pub fn table_csv(&self) -> Result<String, LabError> {
        let mut w = csv::Writer::from_writer(Vec::new());
        let mut header = vec!["metric".to_string()];
        header.extend(self.arms.iter().map(|(a, _)| a.to_string()));
        w.write_record(&header)?;
        for m in self.metrics() {
            let mut row = vec![m.clone()];
            for (_, r) in &self.arms {
                row.push(
                    r.summary(&m)
                        .map(|s| format!("{}±{}", s.median, s.std))
                        .unwrap_or_default(),
                );
            }
            w.write_record(&row)?;
        }
        let bytes = w.into_inner().map_err(|e| LabError::Config(e.to_string()))?;
        Ok(String::from_utf8(bytes).expect("csv output is utf-8"))
    }
}

/// Parses a `median±std` table cell.
pub fn parse_cell(cell: &str) -> Option<(f64, f64)> {
    let (m, s) = cell.split_once('±')?;
    Some((m.parse().ok()?, s.parse().ok()?))
}

pub fn run_record(seed: u64, outcome: &TrainOutcome) -> RunRecord {
    let mut r = outcome
        .test
        .record(format!("seed{seed}"), outcome.config.model.num_classes);
    r.push("sigma_s", Some(f64::from(outcome.sigmas.sigma_s())));
    r.push("sigma_c", Some(f64::from(outcome.sigmas.sigma_c())));
    r.push("best_epoch", Some(outcome.best_epoch as f64));
    r
}

/// Trains every arm for every seed. `on_run` sees each finished run.
pub fn ablate(
    base: &TrainConfig,
    dataset: &Dataset,
    arms: &[Arm],
    seeds: &[u64],
    mut on_run: impl FnMut(Arm, u64, &TrainOutcome) -> Result<(), LabError>,
) -> Result<Ablation, LabError> {
    if seeds.is_empty() {
        return Err(LabError::Config("ablation needs at least one seed".into()));
    }
    let mut out = Vec::with_capacity(arms.len());
    for &arm in arms {
        let mut records = Vec::with_capacity(seeds.len());
        for &seed in seeds {
            let mut config = base.clone();
            config.model.variant = arm.variant;
            config.scheme = arm.scheme;
            config.seed = seed;
            let outcome = train::train(&config, dataset)?;
            records.push(run_record(seed, &outcome));
            on_run(arm, seed, &outcome)?;
        }
        out.push((arm, aggregate_runs(&records)));
    }
    Ok(Ablation { arms: out })
}

pub const TABLE_FILE: &str = "table.csv";
pub const RUNS_FILE: &str = "runs.csv";

/// Runs the ablation, writing each run under `out/<arm>/seed<k>/`, the
/// per-arm run tables and the combined table.
pub fn cmd_ablate(
    base: &TrainConfig,
    dataset: &Dataset,
    seeds: &[u64],
    out: &Path,
) -> Result<Ablation, LabError> {
    ensure_dir(out)?;
    let ablation = ablate(base, dataset, &ARMS, seeds, |arm, seed, outcome| {
        train::write_outcome(outcome, &out.join(arm.slug()).join(format!("seed{seed}")))
    })?;
    write_ablation(&ablation, out)?;
    Ok(ablation)
}

pub fn write_ablation(ablation: &Ablation, out: &Path) -> Result<(), LabError> {
    for (arm, report) in &ablation.arms {
        let dir = out.join(arm.slug());
        ensure_dir(&dir)?;
        write_records(&dir.join(RUNS_FILE), &report.runs)?;
    }
    let path = out.join(TABLE_FILE);
    fs::write(&path, ablation.table_csv()?).map_err(io_err(&path))
}

/// Reads a runs file back into records.
pub fn read_runs(path: &Path) -> Result<Vec<RunRecord>, LabError> {
    let mut r = csv::Reader::from_path(path)?;
    let header: Vec<String> = r.headers()?.iter().map(str::to_string).collect();
    let mut out = Vec::new();
    for row in r.records() {
        let row = row?;
        let mut rec = RunRecord::new(&row[0]);
        for (name, cell) in header.iter().zip(row.iter()).skip(1) {
            let v = if cell.is_empty() {
                None
            } else {
                Some(
                    cell.parse()
                        .map_err(|_| LabError::Config(format!("bad cell {cell:?}")))?,
                )
            };
            rec.push(name, v);
        }
        out.push(rec);
    }
    Ok(out)
}

//! Uncertainty-scalar dynamics under a scripted loss schedule.

use std::str::FromStr;

use mtunet_core::loss::{equilibrium_inverse, sigma_descent_trace, SchemeKind};
use serde::Serialize;

use crate::error::LabError;

/// A stretch of `steps` descent steps at a fixed loss.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Phase {
    pub loss: f64,
    pub steps: usize,
}

/// Parses `L:steps,L:steps,...`.
pub fn parse_schedule(text: &str) -> Result<Vec<Phase>, LabError> {
    text.split(',')
        .map(|part| {
            let bad = || LabError::Config(format!("bad phase {part:?}, expected LOSS:STEPS"));
            let (l, n) = part.trim().split_once(':').ok_or_else(bad)?;
            Ok(Phase {
                loss: l.trim().parse().map_err(|_| bad())?,
                steps: n.trim().parse().map_err(|_| bad())?,
            })
        })
        .collect()
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Task {
    Saliency,
    Classification,
}

impl FromStr for Task {
    type Err = LabError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "s" | "saliency" => Ok(Task::Saliency),
            "c" | "classification" => Ok(Task::Classification),
            _ => Err(LabError::Config(format!("unknown task {s:?}"))),
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct SigmaLabConfig {
    pub phases: Vec<Phase>,
    pub sigma0: f64,
    pub step: f64,
    pub scheme: SchemeKind,
    pub task: Task,
    pub lr: f64,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize)]
pub struct TrajectoryRow {
    pub t: usize,
    pub phase: usize,
    #[serde(rename = "L")]
    pub loss: f64,
    pub sigma: f64,
    pub r_eff: f64,
    /// Stationary σ for the phase loss; empty when σ is not trained.
    pub equilibrium: Option<f64>,
}

/// One row per step plus the final iterate. A task the scheme does not
/// scale keeps σ at 1.
pub fn sigma_lab(config: &SigmaLabConfig) -> Result<Vec<TrajectoryRow>, LabError> {
    if config.phases.is_empty() || config.phases.iter().all(|p| p.steps == 0) {
        return Err(LabError::Config("schedule has no steps".into()));
    }
    if !(config.lr > 0.0) {
        return Err(LabError::Config(format!(
            "lr must be positive, got {}",
            config.lr
        )));
    }
    let mut losses = Vec::new();
    let mut phase_of = Vec::new();
    for (k, p) in config.phases.iter().enumerate() {
        losses.extend(std::iter::repeat_n(p.loss, p.steps));
        phase_of.extend(std::iter::repeat_n(k, p.steps));
    }
    let last_phase = *phase_of.last().expect("schedule is non-empty");
    let scaled = match config.task {
        Task::Saliency => config.scheme.scales_saliency(),
        Task::Classification => config.scheme.scales_class(),
    };
    if !scaled {
        return Ok((0..=losses.len())
            .map(|t| TrajectoryRow {
                t,
                phase: phase_of.get(t).copied().unwrap_or(last_phase),
                loss: losses.get(t).copied().unwrap_or(losses[losses.len() - 1]),
                sigma: 1.0,
                r_eff: config.lr,
                equilibrium: None,
            })
            .collect());
    }
    let equilibria = config
        .phases
        .iter()
        .map(|p| equilibrium_inverse(p.loss))
        .collect::<Result<Vec<_>, _>>()?;
    let trace = sigma_descent_trace(&losses, config.sigma0, config.step)?;
    Ok(trace
        .iter()
        .map(|s| {
            let phase = phase_of.get(s.step).copied().unwrap_or(last_phase);
            TrajectoryRow {
                t: s.step,
                phase,
                loss: s.loss,
                sigma: s.sigma,
                r_eff: config.lr * s.rate_multiplier,
                equilibrium: Some(equilibria[phase]),
            }
        })
        .collect())
}

pub fn to_csv(rows: &[TrajectoryRow]) -> Result<String, LabError> {
    let mut w = csv::Writer::from_writer(Vec::new());
    for r in rows {
        w.serialize(r)?;
    }
    let bytes = w.into_inner().map_err(|e| LabError::Config(e.to_string()))?;
    Ok(String::from_utf8(bytes).expect("csv output is utf-8"))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn config(phases: &str, scheme: SchemeKind, task: Task) -> SigmaLabConfig {
        SigmaLabConfig {
            phases: parse_schedule(phases).unwrap(),
            sigma0: 1.0,
            step: 0.5,
            scheme,
            task,
            lr: 1e-3,
        }
    }

    #[test]
    fn constant_loss_settles_at_equilibrium() {
        let rows = sigma_lab(&config("0.1:2000", SchemeKind::Mtls1, Task::Saliency)).unwrap();
        let last = rows.last().unwrap();
        let target = equilibrium_inverse(0.1).unwrap();
        assert!((last.sigma - target).abs() < 1e-8);
        assert_eq!(last.equilibrium, Some(target));
        assert_eq!(rows.len(), 2001);
    }

    #[test]
    fn falling_phases_raise_the_rate() {
        let rows = sigma_lab(&config(
            "0.4:400,0.2:400,0.1:400,0.05:400",
            SchemeKind::Mtls1,
            Task::Classification,
        ))
        .unwrap();
        let ends: Vec<&TrajectoryRow> = [399, 799, 1199, 1599].iter().map(|&t| &rows[t]).collect();
        for w in ends.windows(2) {
            assert!(w[1].equilibrium.unwrap() < w[0].equilibrium.unwrap());
            assert!(w[1].r_eff > w[0].r_eff);
        }
    }

    #[test]
    fn unscaled_task_is_flat() {
        let rows = sigma_lab(&config("0.4:10,0.1:10", SchemeKind::Mtls3, Task::Saliency)).unwrap();
        assert!(rows
            .iter()
            .all(|r| r.sigma == 1.0 && r.r_eff == 1e-3 && r.equilibrium.is_none()));
        assert_eq!(rows.len(), 21);
    }

    #[test]
    fn schedule_parsing() {
        assert_eq!(
            parse_schedule("0.5:3, 0.25:4").unwrap(),
            vec![Phase { loss: 0.5, steps: 3 }, Phase { loss: 0.25, steps: 4 }]
        );
        assert!(parse_schedule("0.5").is_err());
        assert!(parse_schedule("x:3").is_err());
    }

    #[test]
    fn divergence_is_reported() {
        let mut c = config("0.25:50", SchemeKind::Mtls1, Task::Saliency);
        c.sigma0 = 2.0;
        c.step = 100.0;
        assert!(matches!(sigma_lab(&c), Err(LabError::Loss(_))));
    }
}

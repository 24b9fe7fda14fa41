//! Saliency and classification metrics plus cross-run aggregation.

use std::cmp::Ordering;

use thiserror::Error;

/// Smoothing added to both arguments of the KLD metric.
pub const KLD_EPS: f64 = 1e-12;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum MetricError {
    #[error("length mismatch: {0} vs {1}")]
    LengthMismatch(usize, usize),
    #[error("empty input")]
    Empty,
    #[error("class {0} has no samples")]
    MissingClass(usize),
    #[error("label {label} out of range for {classes} classes")]
    LabelOutOfRange { label: usize, classes: usize },
    #[error("class {0} appears on only one side of the one-vs-rest split")]
    OneSided(usize),
}

fn same_len(a: &[f64], b: &[f64]) -> Result<(), MetricError> {
    if a.len() != b.len() {
        return Err(MetricError::LengthMismatch(a.len(), b.len()));
    }
    if a.is_empty() {
        return Err(MetricError::Empty);
    }
    Ok(())
}

/// `Σ t_i ln((t_i + ε) / (p_i + ε))`.
pub fn kld_metric(truth: &[f64], pred: &[f64]) -> Result<f64, MetricError> {
    same_len(truth, pred)?;
    Ok(truth
        .iter()
        .zip(pred)
        .map(|(&t, &p)| t * ((t + KLD_EPS) / (p + KLD_EPS)).ln())
        .sum())
}

/// Pearson correlation of the flattened maps; `None` when either map is
/// constant.
pub fn pcc(truth: &[f64], pred: &[f64]) -> Result<Option<f64>, MetricError> {
    same_len(truth, pred)?;
    let n = truth.len() as f64;
    let mt = truth.iter().sum::<f64>() / n;
    let mp = pred.iter().sum::<f64>() / n;
    let (mut cov, mut vt, mut vp) = (0.0, 0.0, 0.0);
    for (&t, &p) in truth.iter().zip(pred) {
        let (dt, dp) = (t - mt, p - mp);
        cov += dt * dp;
        vt += dt * dt;
        vp += dp * dp;
    }
    if vt == 0.0 || vp == 0.0 {
        return Ok(None);
    }
    Ok(Some((cov / (vt.sqrt() * vp.sqrt())).clamp(-1.0, 1.0)))
}

/// Histogram intersection `Σ min(t_i, p_i)`.
pub fn hs(truth: &[f64], pred: &[f64]) -> Result<f64, MetricError> {
    same_len(truth, pred)?;
    Ok(truth.iter().zip(pred).map(|(&t, &p)| t.min(p)).sum())
}

/// Index of the largest entry; ties go to the lowest index.
pub fn argmax(v: &[f64]) -> usize {
    let mut best = 0;
    for (i, &x) in v.iter().enumerate() {
        if x > v[best] {
            best = i;
        }
    }
    best
}

pub fn acc(labels: &[usize], probs: &[Vec<f64>]) -> Result<f64, MetricError> {
    if labels.len() != probs.len() {
        return Err(MetricError::LengthMismatch(labels.len(), probs.len()));
    }
    if labels.is_empty() {
        return Err(MetricError::Empty);
    }
    let hits = labels.iter().zip(probs).filter(|(&l, p)| argmax(p) == l).count();
    Ok(hits as f64 / labels.len() as f64)
}

/// Mann-Whitney statistic `#{pos > neg} + ½ #{pos = neg}` via midranks.
fn rank_u(pos: &[f64], neg: &[f64]) -> f64 {
    let mut all: Vec<(f64, bool)> = pos
        .iter()
        .map(|&s| (s, true))
        .chain(neg.iter().map(|&s| (s, false)))
        .collect();
    all.sort_by(|a, b| a.0.partial_cmp(&b.0).unwrap_or(Ordering::Equal));
    let mut rank_sum = 0.0;
    let mut i = 0;
    while i < all.len() {
        let mut j = i;
        while j + 1 < all.len() && all[j + 1].0 == all[i].0 {
            j += 1;
        }
        // Ranks i+1 ..= j+1 share their mean.
        let mid = (i + j + 2) as f64 / 2.0;
        let n_pos = all[i..=j].iter().filter(|e| e.1).count();
        rank_sum += mid * n_pos as f64;
        i = j + 1;
    }
    let np = pos.len() as f64;
    rank_sum - np * (np + 1.0) / 2.0
}

/// Probability that a random positive outscores a random negative, ties ½.
pub fn binary_auc(pos: &[f64], neg: &[f64]) -> Result<f64, MetricError> {
    if pos.is_empty() || neg.is_empty() {
        return Err(MetricError::Empty);
    }
    Ok(rank_u(pos, neg) / (pos.len() as f64 * neg.len() as f64))
}

fn check_scores(scores: &[Vec<f64>], labels: &[usize]) -> Result<usize, MetricError> {
    if scores.len() != labels.len() {
        return Err(MetricError::LengthMismatch(scores.len(), labels.len()));
    }
    let classes = scores.first().ok_or(MetricError::Empty)?.len();
    if let Some(s) = scores.iter().find(|s| s.len() != classes) {
        return Err(MetricError::LengthMismatch(s.len(), classes));
    }
    if let Some(&label) = labels.iter().find(|&&l| l >= classes) {
        return Err(MetricError::LabelOutOfRange { label, classes });
    }
    Ok(classes)
}

/// Class-`k` scores of the samples labelled `of`.
fn scores_of(scores: &[Vec<f64>], labels: &[usize], k: usize, of: usize) -> Vec<f64> {
    scores
        .iter()
        .zip(labels)
        .filter(|(_, &l)| l == of)
        .map(|(s, _)| s[k])
        .collect()
}

/// Hand & Till multi-class AUC: the mean over unordered class pairs of
/// `(Â(i|j) + Â(j|i)) / 2`.
pub fn auc_multiclass(scores: &[Vec<f64>], labels: &[usize]) -> Result<f64, MetricError> {
    let classes = check_scores(scores, labels)?;
    if let Some(missing) = (0..classes).find(|c| !labels.contains(c)) {
        return Err(MetricError::MissingClass(missing));
    }
    let mut total = 0.0;
    let mut pairs = 0usize;
    for i in 0..classes {
        for j in i + 1..classes {
            let a_ij = binary_auc(&scores_of(scores, labels, i, i), &scores_of(scores, labels, i, j))?;
            let a_ji = binary_auc(&scores_of(scores, labels, j, j), &scores_of(scores, labels, j, i))?;
            total += (a_ij + a_ji) / 2.0;
            pairs += 1;
        }
    }
    Ok(total / pairs as f64)
}

/// Binary AUC of the class-`k` score, class `k` against all others.
pub fn auc_one_vs_rest(scores: &[Vec<f64>], labels: &[usize], k: usize) -> Result<f64, MetricError> {
    let classes = check_scores(scores, labels)?;
    if k >= classes {
        return Err(MetricError::LabelOutOfRange { label: k, classes });
    }
    let (mut pos, mut neg) = (Vec::new(), Vec::new());
    for (s, &l) in scores.iter().zip(labels) {
        if l == k {
            pos.push(s[k]);
        } else {
            neg.push(s[k]);
        }
    }
    if pos.is_empty() || neg.is_empty() {
        return Err(MetricError::OneSided(k));
    }
    binary_auc(&pos, &neg)
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct SaliencyMetrics {
    pub kld: f64,
    /// `None` when a map is constant.
    pub pcc: Option<f64>,
    pub hs: f64,
}

pub fn saliency_metrics(truth: &[f64], pred: &[f64]) -> Result<SaliencyMetrics, MetricError> {
    Ok(SaliencyMetrics {
        kld: kld_metric(truth, pred)?,
        pcc: pcc(truth, pred)?,
        hs: hs(truth, pred)?,
    })
}

#[derive(Clone, Debug, PartialEq)]
pub struct ClassMetrics {
    pub acc: f64,
    pub auc: f64,
    pub auc_per_class: Vec<f64>,
}

pub fn class_metrics(scores: &[Vec<f64>], labels: &[usize]) -> Result<ClassMetrics, MetricError> {
    let classes = check_scores(scores, labels)?;
    Ok(ClassMetrics {
        acc: acc(labels, scores)?,
        auc: auc_multiclass(scores, labels)?,
        auc_per_class: (0..classes)
            .map(|k| auc_one_vs_rest(scores, labels, k))
            .collect::<Result<_, _>>()?,
    })
}

/// Median, with the mean of the middle pair for even counts.
pub fn median(values: &[f64]) -> Option<f64> {
    if values.is_empty() {
        return None;
    }
    let mut v = values.to_vec();
    v.sort_by(|a, b| a.total_cmp(b));
    let n = v.len();
    Some(if n % 2 == 1 {
        v[n / 2]
    } else {
        (v[n / 2 - 1] + v[n / 2]) / 2.0
    })
}

pub fn population_std(values: &[f64]) -> Option<f64> {
    if values.is_empty() {
        return None;
    }
    let n = values.len() as f64;
    let mean = values.iter().sum::<f64>() / n;
    Some((values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n).sqrt())
}

/// Named metric values of one run, in a fixed column order.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct RunRecord {
    pub label: String,
    pub values: Vec<(String, Option<f64>)>,
}

impl RunRecord {
    pub fn new(label: impl Into<String>) -> Self {
        Self {
            label: label.into(),
            values: Vec::new(),
        }
    }

    pub fn push(&mut self, name: &str, value: Option<f64>) {
        self.values.push((name.to_string(), value));
    }

    pub fn get(&self, name: &str) -> Option<f64> {
        self.values.iter().find(|(n, _)| n == name).and_then(|(_, v)| *v)
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Summary {
    pub median: f64,
    pub std: f64,
    pub count: usize,
}

/// Per-run records and their per-metric median and population std.
#[derive(Clone, Debug, PartialEq)]
pub struct RunReport {
    pub runs: Vec<RunRecord>,
    pub columns: Vec<String>,
    /// Aligned with `columns`; `None` when no run defines the metric.
    pub aggregate: Vec<Option<Summary>>,
}

impl RunReport {
    pub fn summary(&self, name: &str) -> Option<Summary> {
        let i = self.columns.iter().position(|c| c == name)?;
        self.aggregate[i]
    }

    /// CSV with one row per run followed by `median` and `std` rows.
    pub fn to_csv(&self) -> String {
        let fmt = |v: Option<f64>| v.map(|x| format!("{x}")).unwrap_or_default();
        let mut out = String::from("run");
        for c in &self.columns {
            out.push(',');
            out.push_str(c);
        }
        out.push('\n');
        for r in &self.runs {
            out.push_str(&r.label);
            for c in &self.columns {
                out.push(',');
                out.push_str(&fmt(r.get(c)));
            }
            out.push('\n');
        }
        for (name, pick) in [("median", 0), ("std", 1)] {
            out.push_str(name);
            for s in &self.aggregate {
                out.push(',');
                out.push_str(&fmt(s.map(|s| if pick == 0 { s.median } else { s.std })));
            }
            out.push('\n');
        }
        out
    }
}

/// Aggregates runs; columns follow first appearance. Undefined values are
/// excluded from a column's statistics.
pub fn aggregate_runs(runs: &[RunRecord]) -> RunReport {
    let mut columns: Vec<String> = Vec::new();
    for r in runs {
        for (name, _) in &r.values {
            if !columns.contains(name) {
                columns.push(name.clone());
            }
        }
    }
    let aggregate = columns
        .iter()
        .map(|c| {
            let vals: Vec<f64> = runs.iter().filter_map(|r| r.get(c)).collect();
            Some(Summary {
                median: median(&vals)?,
                std: population_std(&vals)?,
                count: vals.len(),
            })
        })
        .collect();
    RunReport {
        runs: runs.to_vec(),
        columns,
        aggregate,
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn kld_examples() {
        let p = [0.5, 0.5];
        let q = [0.25, 0.75];
        assert_eq!(kld_metric(&p, &p).unwrap(), 0.0);
        let v = kld_metric(&p, &q).unwrap();
        assert!((v - 0.1438).abs() < 1e-4);
        let back = kld_metric(&q, &p).unwrap();
        assert!((back - (0.25 * 0.5f64.ln() + 0.75 * 1.5f64.ln())).abs() < 1e-10);
        assert!((v - back).abs() > 1e-3);
        assert!(kld_metric(&p, &[1.0]).is_err());
    }

    #[test]
    fn pcc_examples() {
        let x = [0.1, 0.4, 0.2, 0.3];
        assert!((pcc(&x, &x).unwrap().unwrap() - 1.0).abs() < 1e-12);
        let y: Vec<f64> = x.iter().map(|v| 3.0 * v + 2.0).collect();
        assert!((pcc(&x, &y).unwrap().unwrap() - 1.0).abs() < 1e-12);
        assert!((pcc(&[1.0, 2.0, 3.0], &[3.0, 2.0, 1.0]).unwrap().unwrap() + 1.0).abs() < 1e-12);
        assert_eq!(pcc(&[0.5, 0.5], &[0.2, 0.8]).unwrap(), None);
    }

    #[test]
    fn hs_examples() {
        assert!((hs(&[0.3, 0.7], &[0.3, 0.7]).unwrap() - 1.0).abs() < 1e-15);
        assert_eq!(hs(&[1.0, 0.0], &[0.0, 1.0]).unwrap(), 0.0);
        assert_eq!(hs(&[0.5, 0.5], &[0.25, 0.75]).unwrap(), 0.75);
    }

    #[test]
    fn acc_examples() {
        let probs = vec![vec![0.8, 0.2], vec![0.3, 0.7], vec![0.6, 0.4]];
        assert_eq!(acc(&[0, 1, 0], &probs).unwrap(), 1.0);
        assert_eq!(acc(&[1, 0, 1], &probs).unwrap(), 0.0);
        assert!((acc(&[0, 1, 1], &probs).unwrap() - 2.0 / 3.0).abs() < 1e-15);
        assert_eq!(acc(&[], &[]), Err(MetricError::Empty));
        // Tie resolves to the lowest class.
        assert_eq!(acc(&[0], &[vec![0.5, 0.5]]).unwrap(), 1.0);
    }

    #[test]
    fn auc_extremes() {
        let scores = vec![
            vec![0.9, 0.05, 0.05],
            vec![0.8, 0.1, 0.1],
            vec![0.1, 0.8, 0.1],
            vec![0.05, 0.9, 0.05],
            vec![0.1, 0.1, 0.8],
            vec![0.05, 0.05, 0.9],
        ];
        let labels = [0, 0, 1, 1, 2, 2];
        assert_eq!(auc_multiclass(&scores, &labels).unwrap(), 1.0);
        for k in 0..3 {
            assert_eq!(auc_one_vs_rest(&scores, &labels, k).unwrap(), 1.0);
        }
        let flat = vec![vec![1.0 / 3.0; 3]; 6];
        assert_eq!(auc_multiclass(&flat, &labels).unwrap(), 0.5);
        let reversed: Vec<Vec<f64>> = scores.iter().map(|s| s.iter().map(|v| -v).collect()).collect();
        assert_eq!(auc_one_vs_rest(&reversed, &labels, 0).unwrap(), 0.0);
    }

    #[test]
    fn auc_errors() {
        let scores = vec![vec![0.6, 0.4], vec![0.7, 0.3]];
        assert_eq!(
            auc_multiclass(&scores, &[0, 0]),
            Err(MetricError::MissingClass(1))
        );
        assert_eq!(
            auc_one_vs_rest(&scores, &[0, 0], 0),
            Err(MetricError::OneSided(0))
        );
        assert!(matches!(
            auc_multiclass(&scores, &[0, 5]),
            Err(MetricError::LabelOutOfRange { .. })
        ));
    }

    #[test]
    fn aggregate_examples() {
        let mk = |v: f64| {
            let mut r = RunRecord::new("r");
            r.push("acc", Some(v));
            r
        };
        let one = aggregate_runs(&[mk(0.7)]);
        assert_eq!(one.summary("acc").unwrap().median, 0.7);
        assert_eq!(one.summary("acc").unwrap().std, 0.0);
        let three = aggregate_runs(&[mk(3.0), mk(1.0), mk(2.0)]);
        let s = three.summary("acc").unwrap();
        assert_eq!(s.median, 2.0);
        assert!((s.std - 0.8165).abs() < 1e-4);
        assert_eq!(median(&[4.0, 1.0, 3.0, 2.0]), Some(2.5));
    }

    #[test]
    fn undefined_values_skip_aggregation() {
        let mut a = RunRecord::new("a");
        a.push("pcc", None);
        let mut b = RunRecord::new("b");
        b.push("pcc", Some(0.5));
        let rep = aggregate_runs(&[a, b]);
        assert_eq!(rep.summary("pcc").unwrap().count, 1);
        let csv = rep.to_csv();
        assert_eq!(csv, "run,pcc\na,\nb,0.5\nmedian,0.5\nstd,0\n");
    }
}

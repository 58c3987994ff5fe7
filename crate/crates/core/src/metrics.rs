//! Subset accuracies and the cross-domain (R1) and unseen-class (R2)
//! robustness scores.

use std::collections::BTreeMap;
use std::fmt::Write as _;

use serde::{Deserialize, Serialize};

use crate::datasets::SplitDataset;
use crate::error::{Error, Result};
use crate::models::Model;

/// Accuracies over all test samples and over the seen / unseen subsets.
/// Predictions are always an argmax over every class.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct AccuracyBreakdown {
    pub acc_all: f64,
    pub acc_unseen: f64,
    pub acc_seen: f64,
    pub n_all: usize,
    pub n_unseen: usize,
    pub n_seen: usize,
    pub correct_unseen: usize,
    pub correct_seen: usize,
}

impl AccuracyBreakdown {
    /// `|acc_all - (n_s acc_s + n_u acc_u) / (n_s + n_u)|`.
    pub fn weighted_mean_residual(&self) -> f64 {
        let n = (self.n_seen + self.n_unseen) as f64;
        let mean = (self.n_seen as f64 * self.acc_seen + self.n_unseen as f64 * self.acc_unseen) / n;
        (self.acc_all - mean).abs()
    }

    /// Smaller of the two subset accuracies.
    pub fn min_subset(&self) -> f64 {
        self.acc_seen.min(self.acc_unseen)
    }
}

/// Breakdown from predicted and true labels.
pub fn breakdown_from_predictions(
    predictions: &[usize],
    labels: &[usize],
    seen: &[usize],
    unseen: &[usize],
) -> Result<AccuracyBreakdown> {
    if predictions.len() != labels.len() {
        return Err(Error::Dataset(format!(
            "{} predictions for {} labels",
            predictions.len(),
            labels.len()
        )));
    }
    let (mut n_s, mut n_u, mut c_s, mut c_u) = (0usize, 0usize, 0usize, 0usize);
    for (&p, &y) in predictions.iter().zip(labels) {
        let hit = usize::from(p == y);
        if seen.contains(&y) {
            n_s += 1;
            c_s += hit;
        } else if unseen.contains(&y) {
            n_u += 1;
            c_u += hit;
        } else {
            return Err(Error::Dataset(format!("label {y} is neither seen nor unseen")));
        }
    }
    if n_s == 0 {
        return Err(Error::EmptySubset("seen"));
    }
    if n_u == 0 {
        return Err(Error::EmptySubset("unseen"));
    }
    let n = n_s + n_u;
    Ok(AccuracyBreakdown {
        acc_all: (c_s + c_u) as f64 / n as f64,
        acc_unseen: c_u as f64 / n_u as f64,
        acc_seen: c_s as f64 / n_s as f64,
        n_all: n,
        n_unseen: n_u,
        n_seen: n_s,
        correct_unseen: c_u,
        correct_seen: c_s,
    })
}

pub fn accuracy_breakdown(model: &Model, test: &SplitDataset) -> Result<AccuracyBreakdown> {
    let preds = model.forward(&test.features)?.argmax_rows();
    breakdown_from_predictions(&preds, &test.labels, &test.seen, &test.unseen)
}

/// Plain accuracy over every sample.
pub fn accuracy(model: &Model, test: &SplitDataset) -> Result<f64> {
    let preds = model.forward(&test.features)?.argmax_rows();
    let hits = preds.iter().zip(&test.labels).filter(|(p, y)| p == y).count();
    Ok(hits as f64 / test.len().max(1) as f64)
}

/// Metric differences are snapped to a `1e-10` grid so that decimal inputs
/// such as percentages come back as the decimal a reader expects
/// (`28.1 - 42.2` gives `-14.1`, not `-14.100000000000001`).
fn snap(x: f64) -> f64 {
    const GRID: f64 = 1e10;
    let s = (x * GRID).round() / GRID;
    if s == 0.0 {
        0.0
    } else {
        s
    }
}

/// Cross-domain robustness: fine-tuned minus zero-shot metric on the same
/// out-of-domain test set, in the units of the inputs.
pub fn r1(metric_ft: f64, metric_zeroshot: f64) -> f64 {
    snap(metric_ft - metric_zeroshot)
}

/// Unseen-class robustness: change in unseen-subset accuracy.
pub fn r2(ft: &AccuracyBreakdown, zeroshot: &AccuracyBreakdown) -> f64 {
    snap(ft.acc_unseen - zeroshot.acc_unseen)
}

/// The same difference taken over the seen subset, i.e. R2 under the
/// opposite reading of which half was held out.
pub fn r2_seen(ft: &AccuracyBreakdown, zeroshot: &AccuracyBreakdown) -> f64 {
    snap(ft.acc_seen - zeroshot.acc_seen)
}

pub const DEFAULT_EPSILON: f64 = 0.01;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Verdict {
    Robust,
    NotRobust,
}

/// Robust iff `value >= -epsilon`.
pub fn verdict(value: f64, epsilon: f64) -> Verdict {
    if value >= -epsilon {
        Verdict::Robust
    } else {
        Verdict::NotRobust
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RobustnessReport {
    pub r1_per_target: BTreeMap<String, f64>,
    pub r2: Option<f64>,
    pub epsilon: f64,
    pub verdicts: BTreeMap<String, Verdict>,
}

impl RobustnessReport {
    pub fn new(epsilon: f64) -> Self {
        RobustnessReport {
            r1_per_target: BTreeMap::new(),
            r2: None,
            epsilon,
            verdicts: BTreeMap::new(),
        }
    }

    pub fn add_r1(&mut self, target: impl Into<String>, value: f64) {
        let target = target.into();
        self.verdicts.insert(format!("r1:{target}"), verdict(value, self.epsilon));
        self.r1_per_target.insert(target, value);
    }

    pub fn set_r2(&mut self, value: f64) {
        self.r2 = Some(value);
        self.verdicts.insert("r2".into(), verdict(value, self.epsilon));
    }

    /// Robust on every recorded metric.
    pub fn robust(&self) -> bool {
        self.verdicts.values().all(|v| *v == Verdict::Robust)
    }
}

/// One `(run, metric, value)` line of `metrics.csv`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricRow {
    pub run: String,
    pub metric: String,
    pub value: f64,
}

impl MetricRow {
    pub fn new(run: impl Into<String>, metric: impl Into<String>, value: f64) -> Self {
        MetricRow {
            run: run.into(),
            metric: metric.into(),
            value,
        }
    }
}

/// Flat CSV with header `run,metric,value`.
pub fn to_csv(rows: &[MetricRow]) -> String {
    let mut out = String::from("run,metric,value\n");
    for r in rows {
        let _ = writeln!(out, "{},{},{}", r.run, r.metric, r.value);
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn perfect_classifier() {
        let labels = vec![0, 1, 2, 3];
        let b = breakdown_from_predictions(&labels, &labels, &[0, 1], &[2, 3]).unwrap();
        assert_eq!((b.acc_all, b.acc_unseen, b.acc_seen), (1.0, 1.0, 1.0));
    }

    #[test]
    fn constant_seen_prediction() {
        // balanced 10 classes x 10 samples, always predicts seen class 0
        let labels: Vec<usize> = (0..10).flat_map(|c| std::iter::repeat_n(c, 10)).collect();
        let preds = vec![0; labels.len()];
        let seen = [0, 1, 2, 3, 4];
        let unseen = [5, 6, 7, 8, 9];
        let b = breakdown_from_predictions(&preds, &labels, &seen, &unseen).unwrap();
        assert_eq!(b.acc_all, 0.1);
        assert_eq!(b.acc_seen, 0.2);
        assert_eq!(b.acc_unseen, 0.0);
    }

    #[test]
    fn empty_subset_errors() {
        assert!(matches!(
            breakdown_from_predictions(&[0], &[0], &[0], &[1]),
            Err(Error::EmptySubset("unseen"))
        ));
    }

    #[test]
    fn r1_examples() {
        assert_eq!(r1(92.9, 92.9), 0.0);
        assert_eq!(r1(28.1, 42.2), -14.1);
        assert_eq!(r1(42.2, 28.1), 14.1);
    }

    #[test]
    fn verdict_boundary_is_robust() {
        assert_eq!(verdict(-0.01, 0.01), Verdict::Robust);
        assert_eq!(verdict(-0.0100001, 0.01), Verdict::NotRobust);
        let mut rep = RobustnessReport::new(0.01);
        rep.add_r1("b", -0.5);
        rep.set_r2(0.2);
        assert!(!rep.robust());
        assert_eq!(rep.verdicts["r2"], Verdict::Robust);
    }

    #[test]
    fn csv_layout() {
        let csv = to_csv(&[MetricRow::new("frozen", "acc_all", 0.5)]);
        assert_eq!(csv, "run,metric,value\nfrozen,acc_all,0.5\n");
    }
}

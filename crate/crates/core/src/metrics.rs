//! Classification metrics and round-count summaries.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Fraction of predictions equal to their label.
pub fn accuracy(preds: &[usize], labels: &[usize]) -> Result<f64> {
    if preds.len() != labels.len() {
        return Err(Error::Shape(format!(
            "{} predictions for {} labels",
            preds.len(),
            labels.len()
        )));
    }
    if preds.is_empty() {
        return Err(Error::UndefinedMetric("accuracy of an empty set".into()));
    }
    let correct = preds.iter().zip(labels).filter(|(p, y)| p == y).count();
    Ok(correct as f64 / preds.len() as f64)
}

/// Unweighted mean of per-class F1 over all `c` classes. A class with no
/// true positives (including one absent from both predictions and labels)
/// scores 0.
pub fn macro_f1(preds: &[usize], labels: &[usize], c: usize) -> Result<f64> {
    if preds.len() != labels.len() {
        return Err(Error::Shape(format!(
            "{} predictions for {} labels",
            preds.len(),
            labels.len()
        )));
    }
    if c == 0 {
        return Err(Error::UndefinedMetric("macro F1 over zero classes".into()));
    }
    let mut tp = vec![0usize; c];
    let mut fp = vec![0usize; c];
    let mut fn_ = vec![0usize; c];
    for (&p, &y) in preds.iter().zip(labels) {
        if p >= c || y >= c {
            return Err(Error::Shape(format!(
                "class index out of range for {c} classes"
            )));
        }
        if p == y {
            tp[p] += 1;
        } else {
            fp[p] += 1;
            fn_[y] += 1;
        }
    }
    let total: f64 = (0..c)
        .map(|k| {
            if tp[k] == 0 {
                0.0
            } else {
                2.0 * tp[k] as f64 / (2 * tp[k] + fp[k] + fn_[k]) as f64
            }
        })
        .sum();
    Ok(total / c as f64)
}

/// First 1-based round whose value reaches `x`, or `None` if none does.
pub fn rounds_to_reach(series: &[f64], x: f64) -> Option<usize> {
    series.iter().position(|&v| v >= x).map(|i| i + 1)
}

/// Master-cluster rounds plus the longest slave-cluster run.
pub fn total_required_rounds(master_rounds: usize, slave_rounds: &[usize]) -> usize {
    master_rounds + slave_rounds.iter().copied().max().unwrap_or(0)
}

/// Per-round values of one metric for each cluster.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricSeries {
    pub metric: String,
    pub clusters: Vec<Vec<f64>>,
    pub threshold: Option<f64>,
}

impl MetricSeries {
    pub fn new(
        metric: impl Into<String>,
        clusters: Vec<Vec<f64>>,
        threshold: Option<f64>,
    ) -> Result<Self> {
        if clusters.iter().flatten().any(|v| !(0.0..=1.0).contains(v)) {
            return Err(Error::UndefinedMetric(
                "metric values must lie in [0, 1]".into(),
            ));
        }
        Ok(Self {
            metric: metric.into(),
            clusters,
            threshold,
        })
    }

    /// Rounds each cluster needs to reach the series threshold.
    pub fn rounds_to_threshold(&self) -> Vec<Option<usize>> {
        match self.threshold {
            Some(x) => self
                .clusters
                .iter()
                .map(|s| rounds_to_reach(s, x))
                .collect(),
            None => vec![None; self.clusters.len()],
        }
    }

    pub fn final_values(&self) -> Vec<Option<f64>> {
        self.clusters.iter().map(|s| s.last().copied()).collect()
    }
}

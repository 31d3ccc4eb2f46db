//! Threshold metrics, rank-based AUROC and ROC curves.

use serde::{Deserialize, Serialize};

use crate::domain::{LabelSpace, LabelVector};
use crate::error::{Error, Result};

/// Decision threshold applied to sigmoid outputs.
pub const DEFAULT_THRESHOLD: f64 = 0.5;

fn class_sizes(labels: &[bool]) -> (usize, usize) {
    let pos = labels.iter().filter(|&&l| l).count();
    (pos, labels.len() - pos)
}

fn check_inputs(scores: &[f64], labels: &[bool]) -> Result<(usize, usize)> {
    if scores.len() != labels.len() {
        return Err(Error::Dimension(format!(
            "{} scores for {} labels",
            scores.len(),
            labels.len()
        )));
    }
    if scores.iter().any(|s| s.is_nan()) {
        return Err(Error::Undefined("NaN score".into()));
    }
    let (pos, neg) = class_sizes(labels);
    if pos == 0 || neg == 0 {
        return Err(Error::Undefined(format!(
            "AUROC needs both classes, got {pos} positives and {neg} negatives"
        )));
    }
    Ok((pos, neg))
}

/// Area under the ROC curve as the normalized Mann-Whitney U statistic.
/// Ties between a positive and a negative count one half.
pub fn auroc(scores: &[f64], labels: &[bool]) -> Result<f64> {
    let (pos, neg) = check_inputs(scores, labels)?;
    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_by(|&a, &b| scores[a].total_cmp(&scores[b]));
    let mut rank_sum = 0.0f64;
    let mut i = 0;
    while i < order.len() {
        let mut j = i + 1;
        while j < order.len() && scores[order[j]] == scores[order[i]] {
            j += 1;
        }
        let mid_rank = (i + 1 + j) as f64 / 2.0;
        rank_sum += mid_rank * order[i..j].iter().filter(|&&k| labels[k]).count() as f64;
        i = j;
    }
    let u = rank_sum - (pos * (pos + 1)) as f64 / 2.0;
    Ok(u / (pos as f64 * neg as f64))
}

/// ROC curve as `(fpr, tpr)` points, one per distinct score threshold,
/// starting at `(0, 0)` and ending at `(1, 1)`.
pub fn roc_points(scores: &[f64], labels: &[bool]) -> Result<Vec<(f64, f64)>> {
    let (pos, neg) = check_inputs(scores, labels)?;
    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_by(|&a, &b| scores[b].total_cmp(&scores[a]));
    let mut points = vec![(0.0, 0.0)];
    let (mut tp, mut fp) = (0usize, 0usize);
    let mut i = 0;
    while i < order.len() {
        let mut j = i;
        while j < order.len() && scores[order[j]] == scores[order[i]] {
            if labels[order[j]] {
                tp += 1;
            } else {
                fp += 1;
            }
            j += 1;
        }
        points.push((fp as f64 / neg as f64, tp as f64 / pos as f64));
        i = j;
    }
    Ok(points)
}

/// Trapezoidal area under a polyline.
pub fn trapezoid_area(points: &[(f64, f64)]) -> f64 {
    points
        .windows(2)
        .map(|w| (w[1].0 - w[0].0) * (w[0].1 + w[1].1) / 2.0)
        .sum()
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct Confusion {
    pub tp: usize,
    pub fp: usize,
    pub tn: usize,
    pub fn_: usize,
}

impl Confusion {
    pub fn from_predictions(predicted: &[bool], labels: &[bool]) -> Self {
        let mut c = Self::default();
        for (&p, &l) in predicted.iter().zip(labels) {
            match (p, l) {
                (true, true) => c.tp += 1,
                (true, false) => c.fp += 1,
                (false, false) => c.tn += 1,
                (false, true) => c.fn_ += 1,
            }
        }
        c
    }

    pub fn total(&self) -> usize {
        self.tp + self.fp + self.tn + self.fn_
    }

    pub fn accuracy(&self) -> f64 {
        if self.total() == 0 {
            return 0.0;
        }
        (self.tp + self.tn) as f64 / self.total() as f64
    }

    /// `None` when nothing was predicted positive.
    pub fn precision(&self) -> Option<f64> {
        let d = self.tp + self.fp;
        (d > 0).then(|| self.tp as f64 / d as f64)
    }

    /// `None` when there are no positives.
    pub fn recall(&self) -> Option<f64> {
        let d = self.tp + self.fn_;
        (d > 0).then(|| self.tp as f64 / d as f64)
    }

    /// F1 with undefined precision or recall counted as 0.
    pub fn f1(&self) -> f64 {
        let p = self.precision().unwrap_or(0.0);
        let r = self.recall().unwrap_or(0.0);
        if p + r == 0.0 {
            0.0
        } else {
            2.0 * p * r / (p + r)
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClassMetrics {
    pub code: String,
    pub accuracy: f64,
    pub f1: f64,
    pub precision: f64,
    pub recall: f64,
    /// `None` when the class has only positives or only negatives.
    pub auroc: Option<f64>,
    pub roc: Vec<(f64, f64)>,
    pub confusion: Confusion,
    /// No positive predictions; precision reported as 0.
    pub precision_undefined: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MacroMetrics {
    pub accuracy: f64,
    pub f1: f64,
    pub precision: f64,
    pub recall: f64,
    /// Mean over the classes with a defined AUROC.
    pub auroc: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    pub threshold: f64,
    pub per_class: Vec<ClassMetrics>,
    #[serde(rename = "macro")]
    pub macro_avg: MacroMetrics,
    /// Classes left out of the macro AUROC.
    pub auroc_excluded: Vec<String>,
}

impl MetricsReport {
    /// Per-class AUROCs in label-space order; undefined classes are `None`.
    pub fn class_aurocs(&self) -> Vec<Option<f64>> {
        self.per_class.iter().map(|c| c.auroc).collect()
    }
}

fn mean(v: impl IntoIterator<Item = f64>) -> Option<f64> {
    let (mut s, mut n) = (0.0, 0usize);
    for x in v {
        s += x;
        n += 1;
    }
    (n > 0).then(|| s / n as f64)
}

/// Metrics for class-wise probabilities `probs[sample][class]`.
pub fn metrics_from_probabilities(
    probs: &[Vec<f64>],
    labels: &[LabelVector],
    ls: &LabelSpace,
    threshold: f64,
) -> Result<MetricsReport> {
    if probs.len() != labels.len() {
        return Err(Error::Dimension(format!(
            "{} predictions for {} samples",
            probs.len(),
            labels.len()
        )));
    }
    if probs.is_empty() {
        return Err(Error::Undefined("no samples to evaluate".into()));
    }
    let k = ls.len();
    if let Some(bad) = probs
        .iter()
        .map(Vec::len)
        .chain(labels.iter().map(LabelVector::len))
        .find(|&l| l != k)
    {
        return Err(Error::Dimension(format!("vector of length {bad}, label space has {k}")));
    }
    let mut per_class = Vec::with_capacity(k);
    let mut excluded = Vec::new();
    for class in 0..k {
        let scores: Vec<f64> = probs.iter().map(|p| p[class]).collect();
        let truth: Vec<bool> = labels.iter().map(|l| l.get(class)).collect();
        let predicted: Vec<bool> = scores.iter().map(|&s| s >= threshold).collect();
        let confusion = Confusion::from_predictions(&predicted, &truth);
        let (auc, roc) = match (auroc(&scores, &truth), roc_points(&scores, &truth)) {
            (Ok(a), Ok(r)) => (Some(a), r),
            (Err(Error::Undefined(_)), _) | (_, Err(Error::Undefined(_))) => {
                excluded.push(ls.code(class).to_string());
                (None, Vec::new())
            }
            (Err(e), _) | (_, Err(e)) => return Err(e),
        };
        per_class.push(ClassMetrics {
            code: ls.code(class).to_string(),
            accuracy: confusion.accuracy(),
            f1: confusion.f1(),
            precision: confusion.precision().unwrap_or(0.0),
            recall: confusion.recall().unwrap_or(0.0),
            auroc: auc,
            roc,
            confusion,
            precision_undefined: confusion.precision().is_none(),
        });
    }
    let macro_avg = MacroMetrics {
        accuracy: mean(per_class.iter().map(|c| c.accuracy)).unwrap_or(0.0),
        f1: mean(per_class.iter().map(|c| c.f1)).unwrap_or(0.0),
        precision: mean(per_class.iter().map(|c| c.precision)).unwrap_or(0.0),
        recall: mean(per_class.iter().map(|c| c.recall)).unwrap_or(0.0),
        auroc: mean(per_class.iter().filter_map(|c| c.auroc)),
    };
    Ok(MetricsReport {
        threshold,
        per_class,
        macro_avg,
        auroc_excluded: excluded,
    })
}

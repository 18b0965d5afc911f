//! Evaluation metrics and the structured records written per run.

use serde::Serialize;

use crate::detection::{Group, GroupAssignment};
use crate::error::{invalid, Result};
use crate::noise::NoisePlan;
use crate::numerics::argmax;

/// Rows are true classes, columns predicted classes.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct ConfusionMatrix {
    m: usize,
    counts: Vec<u64>,
}

impl ConfusionMatrix {
    pub fn new(m: usize) -> Self {
        Self {
            m,
            counts: vec![0; m * m],
        }
    }

    pub fn from_rows(rows: &[Vec<u64>]) -> Result<Self> {
        let m = rows.len();
        if rows.iter().any(|r| r.len() != m) {
            return Err(invalid("confusion matrix must be square"));
        }
        Ok(Self {
            m,
            counts: rows.iter().flatten().copied().collect(),
        })
    }

    pub fn record(&mut self, truth: usize, predicted: usize) {
        self.counts[truth * self.m + predicted] += 1;
    }

    pub fn get(&self, truth: usize, predicted: usize) -> u64 {
        self.counts[truth * self.m + predicted]
    }

    pub fn total(&self) -> u64 {
        self.counts.iter().sum()
    }

    pub fn classes(&self) -> usize {
        self.m
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize)]
pub struct ClassificationMetrics {
    pub macro_precision: f64,
    pub macro_recall: f64,
    pub macro_f1: f64,
    pub accuracy: f64,
}

fn ratio(num: f64, den: f64) -> f64 {
    if den == 0.0 {
        0.0
    } else {
        num / den
    }
}

/// Per-class F1 alongside precision and recall; `0/0` is `0`.
pub fn per_class_scores(cm: &ConfusionMatrix) -> Vec<(f64, f64, f64)> {
    (0..cm.m)
        .map(|c| {
            let tp = cm.get(c, c) as f64;
            let predicted: f64 = (0..cm.m).map(|t| cm.get(t, c) as f64).sum();
            let actual: f64 = (0..cm.m).map(|p| cm.get(c, p) as f64).sum();
            let precision = ratio(tp, predicted);
            let recall = ratio(tp, actual);
            let f1 = ratio(2.0 * precision * recall, precision + recall);
            (precision, recall, f1)
        })
        .collect()
}

pub fn classification_metrics(cm: &ConfusionMatrix) -> ClassificationMetrics {
    let scores = per_class_scores(cm);
    let m = cm.m.max(1) as f64;
    let trace: f64 = (0..cm.m).map(|c| cm.get(c, c) as f64).sum();
    ClassificationMetrics {
        macro_precision: scores.iter().map(|s| s.0).sum::<f64>() / m,
        macro_recall: scores.iter().map(|s| s.1).sum::<f64>() / m,
        macro_f1: scores.iter().map(|s| s.2).sum::<f64>() / m,
        accuracy: ratio(trace, cm.total() as f64),
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize)]
pub struct DetectionMetrics {
    pub precision: f64,
    pub recall: f64,
    pub clean_mean_rate: f64,
    pub noisy_mean_rate: f64,
    pub threshold: f64,
}

/// Scores the noisy tag against "planned rate ≥ threshold".
pub fn detection_metrics(assign: &GroupAssignment, plan: &NoisePlan, threshold: f64) -> Result<DetectionMetrics> {
    let mut tp = 0.0;
    let mut fp = 0.0;
    let mut fn_ = 0.0;
    let (mut clean_sum, mut clean_n, mut noisy_sum, mut noisy_n) = (0.0, 0.0, 0.0, 0.0);
    for (client, group) in assign.groups.iter().enumerate() {
        let rate = plan
            .rate(client)
            .ok_or_else(|| invalid(format!("noise plan has no entry for client {client}")))?;
        let truly_noisy = rate >= threshold;
        match group {
            Group::Noisy => {
                noisy_sum += rate;
                noisy_n += 1.0;
                if truly_noisy {
                    tp += 1.0;
                } else {
                    fp += 1.0;
                }
            }
            Group::Clean => {
                clean_sum += rate;
                clean_n += 1.0;
                if truly_noisy {
                    fn_ += 1.0;
                }
            }
        }
    }
    Ok(DetectionMetrics {
        precision: ratio(tp, tp + fp),
        recall: ratio(tp, tp + fn_),
        clean_mean_rate: ratio(clean_sum, clean_n),
        noisy_mean_rate: ratio(noisy_sum, noisy_n),
        threshold,
    })
}

/// Fraction of estimates whose argmax (lowest index on ties) hits the truth.
pub fn correction_accuracy<E: AsRef<[f64]>>(estimates: &[E], true_labels: &[usize]) -> Result<f64> {
    if estimates.len() != true_labels.len() {
        return Err(invalid(format!(
            "{} estimates for {} labels",
            estimates.len(),
            true_labels.len()
        )));
    }
    if estimates.is_empty() {
        return Ok(0.0);
    }
    let hits = estimates
        .iter()
        .zip(true_labels)
        .filter(|(e, t)| argmax(e.as_ref()) == **t)
        .count();
    Ok(hits as f64 / estimates.len() as f64)
}

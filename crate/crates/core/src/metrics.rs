//! Binary classification metrics: confusion counts, ROC AUC, average
//! precision, and the combined report.
//!
//! Label 1 is the positive (referable) class. AUC is computed by trapezoidal
//! integration over score thresholds, which equals the pairwise concordance
//! statistic with ties counted 0.5. AP uses the pessimistic tie order
//! (positives ranked after negatives at equal score) for determinism.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct ConfusionCounts {
    pub tp: u64,
    pub fp: u64,
    pub tn: u64,
    #[serde(rename = "fn")]
    pub fn_: u64,
}

impl ConfusionCounts {
    pub fn total(&self) -> u64 {
        self.tp + self.fp + self.tn + self.fn_
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    pub ap: Option<f64>,
    pub auc: Option<f64>,
    pub acc: f64,
    pub f1: f64,
    pub sen: f64,
    pub spe: f64,
    pub counts: ConfusionCounts,
    pub threshold: f64,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub warnings: Vec<String>,
}

fn validate_inputs(labels: &[u8], scores: &[f64]) -> Result<()> {
    if labels.is_empty() {
        return Err(Error::invalid_argument("labels must be non-empty"));
    }
    if labels.len() != scores.len() {
        return Err(Error::invalid_argument(format!(
            "labels ({}) and scores ({}) differ in length",
            labels.len(),
            scores.len()
        )));
    }
    if let Some(l) = labels.iter().find(|l| **l > 1) {
        return Err(Error::invalid_argument(format!("label {l} is not binary")));
    }
    if scores.iter().any(|s| !s.is_finite()) {
        return Err(Error::invalid_argument("scores must be finite"));
    }
    Ok(())
}

/// Tallies predictions (`score >= threshold` predicts 1) against labels.
pub fn confusion_counts(labels: &[u8], scores: &[f64], threshold: f64) -> Result<ConfusionCounts> {
    validate_inputs(labels, scores)?;
    let mut c = ConfusionCounts { tp: 0, fp: 0, tn: 0, fn_: 0 };
    for (&label, &score) in labels.iter().zip(scores) {
        match (label == 1, score >= threshold) {
            (true, true) => c.tp += 1,
            (true, false) => c.fn_ += 1,
            (false, true) => c.fp += 1,
            (false, false) => c.tn += 1,
        }
    }
    Ok(c)
}

/// Area under the ROC curve via trapezoidal integration over thresholds.
pub fn roc_auc(labels: &[u8], scores: &[f64]) -> Result<f64> {
    validate_inputs(labels, scores)?;
    let pos = labels.iter().filter(|l| **l == 1).count() as f64;
    let neg = labels.len() as f64 - pos;
    if pos == 0.0 || neg == 0.0 {
        return Err(Error::UndefinedMetric(
            "roc_auc needs at least one positive and one negative".into(),
        ));
    }

    let mut order: Vec<usize> = (0..labels.len()).collect();
    order.sort_by(|&a, &b| scores[b].partial_cmp(&scores[a]).unwrap());

    // Sweep thresholds; samples with equal scores enter as one group so tied
    // positive/negative pairs contribute half a concordance each.
    let mut area = 0.0;
    let (mut tp, mut fp) = (0.0f64, 0.0f64);
    let mut i = 0;
    while i < order.len() {
        let mut j = i;
        let (mut dtp, mut dfp) = (0.0, 0.0);
        while j < order.len() && scores[order[j]] == scores[order[i]] {
            if labels[order[j]] == 1 {
                dtp += 1.0;
            } else {
                dfp += 1.0;
            }
            j += 1;
        }
        area += dfp * (tp + (tp + dtp)) / 2.0;
        tp += dtp;
        fp += dfp;
        i = j;
    }
    let _ = fp;
    Ok(area / (pos * neg))
}

/// Average precision over the ranked list, positives after negatives on ties.
pub fn average_precision(labels: &[u8], scores: &[f64]) -> Result<f64> {
    validate_inputs(labels, scores)?;
    let pos = labels.iter().filter(|l| **l == 1).count() as f64;
    if pos == 0.0 {
        return Err(Error::UndefinedMetric(
            "average_precision needs at least one positive".into(),
        ));
    }
    let mut order: Vec<usize> = (0..labels.len()).collect();
    order.sort_by(|&a, &b| {
        scores[b]
            .partial_cmp(&scores[a])
            .unwrap()
            .then(labels[a].cmp(&labels[b]))
    });
    let mut ap = 0.0;
    let mut seen_pos = 0.0;
    for (rank0, &idx) in order.iter().enumerate() {
        if labels[idx] == 1 {
            seen_pos += 1.0;
            ap += seen_pos / (rank0 + 1) as f64;
        }
    }
    Ok(ap / pos)
}

/// Assembles the full report at the given decision threshold.
pub fn metrics_summary(labels: &[u8], scores: &[f64], threshold: f64) -> Result<MetricsReport> {
    let counts = confusion_counts(labels, scores, threshold)?;
    let total = counts.total() as f64;
    let acc = (counts.tp + counts.tn) as f64 / total;
    let sen = ratio(counts.tp, counts.tp + counts.fn_);
    let spe = ratio(counts.tn, counts.tn + counts.fp);
    let prec = ratio(counts.tp, counts.tp + counts.fp);
    let f1 = if prec + sen == 0.0 {
        0.0
    } else {
        2.0 * prec * sen / (prec + sen)
    };

    let mut warnings = Vec::new();
    let auc = match roc_auc(labels, scores) {
        Ok(v) => Some(v),
        Err(Error::UndefinedMetric(msg)) => {
            warnings.push(format!("auc undefined: {msg}"));
            None
        }
        Err(e) => return Err(e),
    };
    let ap = match average_precision(labels, scores) {
        Ok(v) => Some(v),
        Err(Error::UndefinedMetric(msg)) => {
            warnings.push(format!("ap undefined: {msg}"));
            None
        }
        Err(e) => return Err(e),
    };

    Ok(MetricsReport { ap, auc, acc, f1, sen, spe, counts, threshold, warnings })
}

fn ratio(num: u64, den: u64) -> f64 {
    if den == 0 {
        0.0
    } else {
        num as f64 / den as f64
    }
}

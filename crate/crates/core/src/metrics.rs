//! Classification and regression metrics.
//!
//! Classes absent from both gold and predictions are left out of macro-F1 and
//! UAR; a class with no gold support has no recall and is left out of UAR.
//! F1 is 0 whenever its denominator is 0.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricReport {
    /// `confusion[gold][pred]`.
    pub confusion: Vec<Vec<usize>>,
    pub per_class_f1: Vec<f64>,
    pub weighted_f1: f64,
    pub macro_f1: f64,
    pub uar: f64,
    pub n_samples: usize,
}

pub fn classification_report(gold: &[usize], pred: &[usize], num_classes: usize) -> Result<MetricReport> {
    if gold.len() != pred.len() {
        return Err(Error::shape("classification_report", gold.len(), pred.len()));
    }
    if gold.is_empty() {
        return Err(Error::InvalidArgument("classification report over no samples".into()));
    }
    if let Some(&bad) = gold.iter().chain(pred).find(|&&c| c >= num_classes) {
        return Err(Error::InvalidArgument(format!(
            "class index {bad} out of range for {num_classes} classes"
        )));
    }
    let mut confusion = vec![vec![0usize; num_classes]; num_classes];
    for (&g, &p) in gold.iter().zip(pred) {
        confusion[g][p] += 1;
    }
    let mut per_class_f1 = vec![0.0; num_classes];
    let mut weighted = 0.0;
    let mut macro_sum = 0.0;
    let mut macro_n = 0usize;
    let mut recall_sum = 0.0;
    let mut recall_n = 0usize;
    for c in 0..num_classes {
        let tp = confusion[c][c];
        let support: usize = confusion[c].iter().sum();
        let predicted: usize = confusion.iter().map(|row| row[c]).sum();
        let denom = support + predicted;
        // F1 = 2TP / (2TP + FP + FN) = 2TP / (support + predicted)
        let f1 = if denom == 0 { 0.0 } else { 2.0 * tp as f64 / denom as f64 };
        per_class_f1[c] = f1;
        weighted += support as f64 * f1;
        if denom > 0 {
            macro_sum += f1;
            macro_n += 1;
        }
        if support > 0 {
            recall_sum += tp as f64 / support as f64;
            recall_n += 1;
        }
    }
    let n = gold.len();
    Ok(MetricReport {
        confusion,
        per_class_f1,
        weighted_f1: weighted / n as f64,
        macro_f1: macro_sum / macro_n as f64,
        uar: recall_sum / recall_n as f64,
        n_samples: n,
    })
}

/// Concordance correlation coefficient with population moments.
///
/// Returns 0 when either series is constant.
pub fn ccc(gold: &[f64], pred: &[f64]) -> Result<f64> {
    if gold.len() != pred.len() {
        return Err(Error::shape("ccc", gold.len(), pred.len()));
    }
    if gold.len() < 2 {
        return Err(Error::InvalidArgument("CCC needs at least 2 samples".into()));
    }
    let n = gold.len() as f64;
    let mg = gold.iter().sum::<f64>() / n;
    let mp = pred.iter().sum::<f64>() / n;
    let vg = gold.iter().map(|x| (x - mg).powi(2)).sum::<f64>() / n;
    let vp = pred.iter().map(|x| (x - mp).powi(2)).sum::<f64>() / n;
    if vg == 0.0 || vp == 0.0 {
        return Ok(0.0);
    }
    let cov = gold.iter().zip(pred).map(|(g, p)| (g - mg) * (p - mp)).sum::<f64>() / n;
    Ok(2.0 * cov / (vg + vp + (mg - mp).powi(2)))
}

/// Metric used to pick the best checkpoint on the validation split.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SelectionMetric {
    WeightedF1,
    MacroF1,
    Uar,
}

impl SelectionMetric {
    pub fn of(self, r: &MetricReport) -> f64 {
        match self {
            Self::WeightedF1 => r.weighted_f1,
            Self::MacroF1 => r.macro_f1,
            Self::Uar => r.uar,
        }
    }
}

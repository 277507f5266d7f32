use alloc::vec::Vec;

use serde::{Deserialize, Serialize};

use crate::{Error, Result};

mod nan_as_null {
    use serde::{Deserialize, Deserializer, Serializer};

    pub fn serialize<S: Serializer>(v: &f64, s: S) -> Result<S::Ok, S::Error> {
        if v.is_nan() {
            s.serialize_none()
        } else {
            s.serialize_some(v)
        }
    }

    pub fn deserialize<'de, D: Deserializer<'de>>(d: D) -> Result<f64, D::Error> {
        Ok(Option::<f64>::deserialize(d)?.unwrap_or(f64::NAN))
    }
}

/// Pixel classification metrics. Undefined rates are NaN (`null` in JSON)
/// with the matching `*_defined` flag cleared.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    pub pixels: usize,
    pub positives: usize,
    pub accuracy: f64,
    #[serde(with = "nan_as_null")]
    pub sensitivity: f64,
    pub sensitivity_defined: bool,
    #[serde(with = "nan_as_null")]
    pub specificity: f64,
    pub specificity_defined: bool,
    /// `(fpr, tpr)` from `(0, 0)` to `(1, 1)`.
    pub roc: Vec<(f64, f64)>,
    #[serde(with = "nan_as_null")]
    pub roc_auc: f64,
    /// `(recall, precision)`.
    pub pr: Vec<(f64, f64)>,
    #[serde(with = "nan_as_null")]
    pub pr_auc: f64,
    /// Mean per-subject AHA segment agreement, when segments were scored.
    pub segment_accuracy: Option<f64>,
}

fn ratio(num: usize, den: usize) -> f64 {
    if den == 0 {
        f64::NAN
    } else {
        num as f64 / den as f64
    }
}

fn trapezoid(points: &[(f64, f64)]) -> f64 {
    points.windows(2).map(|w| (w[1].0 - w[0].0) * (w[1].1 + w[0].1) / 2.0).sum()
}

/// ROC and PR curves by sweeping a threshold over every distinct score.
pub fn curves(scores: &[f64], truth: &[bool]) -> (Vec<(f64, f64)>, Vec<(f64, f64)>) {
    let p = truth.iter().filter(|&&t| t).count();
    let n = truth.len() - p;
    if p == 0 || n == 0 {
        return (Vec::new(), Vec::new());
    }
    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_by(|&a, &b| scores[b].total_cmp(&scores[a]));
    let mut roc = Vec::with_capacity(order.len() + 1);
    let mut pr = Vec::with_capacity(order.len() + 1);
    roc.push((0.0, 0.0));
    pr.push((0.0, 1.0));
    let (mut tp, mut fp) = (0usize, 0usize);
    let mut i = 0;
    while i < order.len() {
        let s = scores[order[i]];
        while i < order.len() && scores[order[i]] == s {
            if truth[order[i]] {
                tp += 1;
            } else {
                fp += 1;
            }
            i += 1;
        }
        roc.push((fp as f64 / n as f64, tp as f64 / p as f64));
        pr.push((tp as f64 / p as f64, tp as f64 / (tp + fp) as f64));
    }
    (roc, pr)
}

/// Metrics of thresholded `scores` (label 1 iff `score >= threshold`).
pub fn evaluate(scores: &[f64], truth: &[bool], threshold: f64) -> Result<MetricsReport> {
    if scores.len() != truth.len() {
        return Err(Error::invalid("scores and labels are not aligned"));
    }
    if scores.is_empty() {
        return Err(Error::invalid("nothing to evaluate"));
    }
    if scores.iter().any(|s| !s.is_finite()) {
        return Err(Error::invalid("scores must be finite"));
    }
    let (mut tp, mut tn, mut fp, mut fneg) = (0, 0, 0, 0);
    for (&s, &t) in scores.iter().zip(truth) {
        match (s >= threshold, t) {
            (true, true) => tp += 1,
            (false, false) => tn += 1,
            (true, false) => fp += 1,
            (false, true) => fneg += 1,
        }
    }
    let (roc, pr) = curves(scores, truth);
    let (roc_auc, pr_auc) = if roc.is_empty() { (f64::NAN, f64::NAN) } else { (trapezoid(&roc), trapezoid(&pr)) };
    Ok(MetricsReport {
        pixels: scores.len(),
        positives: tp + fneg,
        accuracy: (tp + tn) as f64 / scores.len() as f64,
        sensitivity: ratio(tp, tp + fneg),
        sensitivity_defined: tp + fneg > 0,
        specificity: ratio(tn, tn + fp),
        specificity_defined: tn + fp > 0,
        roc,
        roc_auc,
        pr,
        pr_auc,
        segment_accuracy: None,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn perfect_scores() {
        let r = evaluate(&[1.0, 0.0, 1.0, 0.0], &[true, false, true, false], 0.5).unwrap();
        assert_eq!((r.accuracy, r.roc_auc, r.pr_auc), (1.0, 1.0, 1.0));
        assert_eq!(r.roc.first(), Some(&(0.0, 0.0)));
        assert_eq!(r.roc.last(), Some(&(1.0, 1.0)));
    }

    #[test]
    fn missing_positives_are_flagged() {
        let r = evaluate(&[0.2, 0.7], &[false, false], 0.5).unwrap();
        assert!(r.sensitivity.is_nan() && !r.sensitivity_defined);
        assert_eq!(r.specificity, 0.5);
        assert!(r.roc_auc.is_nan());
    }
}

//! Coefficient error, F1 scores and rank AUC.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::gcr::{CoefficientMatrix, Labels};

/// A single named measurement from one replicate of an experiment.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricRecord {
    pub name: String,
    pub value: f64,
    pub replicate: usize,
    pub params: Vec<(String, String)>,
}

/// Mean squared coefficient error averaged over the `d × (C-1)` entries.
pub fn coef_mse(estimate: &CoefficientMatrix, truth: &CoefficientMatrix) -> Result<f64> {
    estimate.check_same_shape(truth)?;
    let count = estimate.values().len();
    if count == 0 {
        return Ok(0.0);
    }
    let sq: f64 = estimate
        .values()
        .iter()
        .zip(truth.values())
        .map(|(a, b)| (a - b) * (a - b))
        .sum();
    Ok(sq / count as f64)
}

/// Squared Euclidean distance `||estimate - truth||²` over all entries.
pub fn squared_error(estimate: &CoefficientMatrix, truth: &CoefficientMatrix) -> Result<f64> {
    estimate.check_same_shape(truth)?;
    Ok(estimate
        .values()
        .iter()
        .zip(truth.values())
        .map(|(a, b)| (a - b) * (a - b))
        .sum())
}

/// Per-class true positive, false positive and false negative counts.
fn class_counts(predicted: &Labels, truth: &Labels, nodes: &[usize]) -> Result<Vec<[usize; 3]>> {
    if predicted.num_classes() != truth.num_classes() {
        return Err(Error::DimensionMismatch {
            context: "predicted vs true class count",
            expected: truth.num_classes(),
            found: predicted.num_classes(),
        });
    }
    if nodes.is_empty() {
        return Err(Error::InvalidArgument("F1 over an empty node set".into()));
    }
    let mut counts = vec![[0usize; 3]; truth.num_classes()];
    for &i in nodes {
        let (p, t) = (predicted.get(i), truth.get(i));
        if p == t {
            counts[t][0] += 1;
        } else {
            counts[p][1] += 1;
            counts[t][2] += 1;
        }
    }
    Ok(counts)
}

fn f1(tp: usize, fp: usize, fn_: usize) -> f64 {
    let denom = 2 * tp + fp + fn_;
    if denom == 0 {
        0.0
    } else {
        2.0 * tp as f64 / denom as f64
    }
}

/// F1 from pooled counts over all classes.
pub fn micro_f1(predicted: &Labels, truth: &Labels, nodes: &[usize]) -> Result<f64> {
    let counts = class_counts(predicted, truth, nodes)?;
    let (tp, fp, fn_) = counts
        .iter()
        .fold((0, 0, 0), |acc, c| (acc.0 + c[0], acc.1 + c[1], acc.2 + c[2]));
    Ok(f1(tp, fp, fn_))
}

/// Unweighted mean of per-class F1; a class that is neither present nor
/// predicted scores zero.
pub fn macro_f1(predicted: &Labels, truth: &Labels, nodes: &[usize]) -> Result<f64> {
    let counts = class_counts(predicted, truth, nodes)?;
    Ok(counts.iter().map(|c| f1(c[0], c[1], c[2])).sum::<f64>() / counts.len() as f64)
}

/// Area under the ROC curve as the Mann-Whitney statistic, ties counted
/// one half. Higher scores mean "more likely positive".
pub fn auc(scores: &[f64], labels: &[bool]) -> Result<f64> {
    if scores.len() != labels.len() {
        return Err(Error::DimensionMismatch {
            context: "AUC scores vs labels",
            expected: labels.len(),
            found: scores.len(),
        });
    }
    if scores.iter().any(|s| s.is_nan()) {
        return Err(Error::NonFinite("AUC scores"));
    }
    let positives = labels.iter().filter(|&&l| l).count();
    let negatives = labels.len() - positives;
    if positives == 0 || negatives == 0 {
        return Err(Error::DegenerateLabels(format!(
            "AUC needs both classes, got {positives} positive and {negatives} negative"
        )));
    }
    // Midranks over the sorted scores.
    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_by(|&a, &b| scores[a].total_cmp(&scores[b]));
    let mut ranks = vec![0.0; scores.len()];
    let mut start = 0;
    while start < order.len() {
        let mut end = start + 1;
        while end < order.len() && scores[order[end]] == scores[order[start]] {
            end += 1;
        }
        let midrank = (start + end + 1) as f64 / 2.0;
        for &k in &order[start..end] {
            ranks[k] = midrank;
        }
        start = end;
    }
    let rank_sum: f64 = ranks.iter().zip(labels).filter(|(_, &l)| l).map(|(r, _)| r).sum();
    let p = positives as f64;
    let u = rank_sum - p * (p + 1.0) / 2.0;
    Ok(u / (p * negatives as f64))
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::Array2;

    #[test]
    fn mse_examples() {
        let t = CoefficientMatrix::new(Array2::from_elem((4, 2), 0.3), 3).unwrap();
        assert_eq!(coef_mse(&t, &t).unwrap(), 0.0);
        let mut e = t.values().clone();
        e[[1, 0]] += 2.0;
        let e = CoefficientMatrix::new(e, 3).unwrap();
        assert!((coef_mse(&e, &t).unwrap() - 0.5).abs() < 1e-15);
        assert!(coef_mse(&CoefficientMatrix::zeros(3, 3), &t).is_err());
    }

    #[test]
    fn f1_examples() {
        let t = Labels::new(vec![0, 1, 0, 1], 2).unwrap();
        let all: Vec<usize> = (0..4).collect();
        assert_eq!(micro_f1(&t, &t, &all).unwrap(), 1.0);
        assert_eq!(macro_f1(&t, &t, &all).unwrap(), 1.0);
        let wrong = Labels::new(vec![1, 0, 1, 0], 2).unwrap();
        assert_eq!(micro_f1(&wrong, &t, &all).unwrap(), 0.0);
        assert!(micro_f1(&t, &t, &[]).is_err());
    }

    #[test]
    fn hand_counted_three_class_case() {
        // truth:     0 0 0 1 1 2
        // predicted: 0 0 1 1 2 2
        // class 0: tp 2 fp 0 fn 1 -> 4/5
        // class 1: tp 1 fp 1 fn 1 -> 1/2
        // class 2: tp 1 fp 1 fn 0 -> 2/3
        let t = Labels::new(vec![0, 0, 0, 1, 1, 2], 3).unwrap();
        let p = Labels::new(vec![0, 0, 1, 1, 2, 2], 3).unwrap();
        let all: Vec<usize> = (0..6).collect();
        assert!((micro_f1(&p, &t, &all).unwrap() - 4.0 / 6.0).abs() < 1e-12);
        let want = (0.8 + 0.5 + 2.0 / 3.0) / 3.0;
        assert!((macro_f1(&p, &t, &all).unwrap() - want).abs() < 1e-12);
    }

    #[test]
    fn absent_class_scores_zero_in_macro() {
        let t = Labels::new(vec![0, 0], 3).unwrap();
        assert!((macro_f1(&t, &t, &[0, 1]).unwrap() - 1.0 / 3.0).abs() < 1e-15);
    }

    #[test]
    fn auc_examples() {
        assert_eq!(auc(&[0.9, 0.4, 0.6], &[true, false, true]).unwrap(), 1.0);
        assert_eq!(auc(&[1.0, 1.0, 1.0, 1.0], &[true, false, true, false]).unwrap(), 0.5);
        assert_eq!(auc(&[0.1, 0.2], &[true, false]).unwrap(), 0.0);
        assert!(matches!(auc(&[0.1, 0.2], &[true, true]), Err(Error::DegenerateLabels(_))));
    }
}

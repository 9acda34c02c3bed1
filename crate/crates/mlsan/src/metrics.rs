//! Classification metrics: confusion matrix, weighted/macro F1, and
//! seed aggregation with the sample standard deviation.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// E x E count matrix, rows = true class, columns = predicted class.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ConfusionMatrix {
    pub classes: usize,
    pub counts: Vec<u64>,
}

impl ConfusionMatrix {
    pub fn new(classes: usize) -> ConfusionMatrix {
        ConfusionMatrix {
            classes,
            counts: vec![0; classes * classes],
        }
    }

    pub fn from_predictions(
        predictions: &[usize],
        labels: &[usize],
        classes: usize,
    ) -> Result<ConfusionMatrix> {
        if predictions.len() != labels.len() {
            return Err(Error::Contract(format!(
                "{} predictions vs {} labels",
                predictions.len(),
                labels.len()
            )));
        }
        let mut cm = ConfusionMatrix::new(classes);
        for (&p, &t) in predictions.iter().zip(labels) {
            if p >= classes || t >= classes {
                return Err(Error::Index(format!(
                    "class {} out of range for {classes} classes",
                    p.max(t)
                )));
            }
            cm.counts[t * classes + p] += 1;
        }
        Ok(cm)
    }

    pub fn get(&self, true_class: usize, predicted: usize) -> u64 {
        self.counts[true_class * self.classes + predicted]
    }

    pub fn total(&self) -> u64 {
        self.counts.iter().sum()
    }

    /// Per-true-class counts (row sums).
    pub fn supports(&self) -> Vec<u64> {
        (0..self.classes)
            .map(|t| (0..self.classes).map(|p| self.get(t, p)).sum())
            .collect()
    }

    pub fn accuracy(&self) -> f64 {
        let total = self.total();
        if total == 0 {
            return 0.0;
        }
        let diag: u64 = (0..self.classes).map(|c| self.get(c, c)).sum();
        diag as f64 / total as f64
    }

    /// Per-class F1 = 2PR/(P+R), with the 0 convention when P+R = 0.
    pub fn per_class_f1(&self) -> Vec<f64> {
        (0..self.classes)
            .map(|c| {
                let tp = self.get(c, c) as f64;
                let pred: f64 = (0..self.classes).map(|t| self.get(t, c)).sum::<u64>() as f64;
                let truth: f64 = (0..self.classes).map(|p| self.get(c, p)).sum::<u64>() as f64;
                let precision = if pred > 0.0 { tp / pred } else { 0.0 };
                let recall = if truth > 0.0 { tp / truth } else { 0.0 };
                if precision + recall > 0.0 {
                    2.0 * precision * recall / (precision + recall)
                } else {
                    0.0
                }
            })
            .collect()
    }
}

/// Support-weighted mean of per-class F1 scores, in [0,1].
pub fn weighted_f1(cm: &ConfusionMatrix) -> Result<f64> {
    let total = cm.total();
    if total == 0 {
        return Err(Error::Contract(
            "weighted F1 undefined on an all-zero confusion matrix".into(),
        ));
    }
    let f1 = cm.per_class_f1();
    let supports = cm.supports();
    Ok(f1
        .iter()
        .zip(&supports)
        .map(|(&f, &s)| f * s as f64)
        .sum::<f64>()
        / total as f64)
}

/// Unweighted mean of per-class F1 over classes with nonzero support.
pub fn macro_f1(cm: &ConfusionMatrix) -> Result<f64> {
    let total = cm.total();
    if total == 0 {
        return Err(Error::Contract(
            "macro F1 undefined on an all-zero confusion matrix".into(),
        ));
    }
    let f1 = cm.per_class_f1();
    let supports = cm.supports();
    let present: Vec<f64> = f1
        .iter()
        .zip(&supports)
        .filter(|(_, &s)| s > 0)
        .map(|(&f, _)| f)
        .collect();
    Ok(present.iter().sum::<f64>() / present.len() as f64)
}

/// Mean, sample (n-1) standard deviation, and per-seed paired deltas.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Aggregate {
    pub n: usize,
    pub mean: f64,
    /// Absent for a single seed.
    pub std: Option<f64>,
}

pub fn aggregate_seeds(values: &[f64]) -> Result<Aggregate> {
    if values.is_empty() {
        return Err(Error::Contract("aggregate of zero seeds".into()));
    }
    let n = values.len();
    let mean = values.iter().sum::<f64>() / n as f64;
    let std = if n > 1 {
        let var = values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1) as f64;
        Some(var.sqrt())
    } else {
        None
    };
    Ok(Aggregate { n, mean, std })
}

/// Per-seed differences a_i - b_i and the count of positive signs.
pub fn paired_deltas(a: &[f64], b: &[f64]) -> Result<(Vec<f64>, usize)> {
    if a.len() != b.len() {
        return Err(Error::Contract(format!(
            "paired series of lengths {} and {}",
            a.len(),
            b.len()
        )));
    }
    let deltas: Vec<f64> = a.iter().zip(b).map(|(x, y)| x - y).collect();
    let positives = deltas.iter().filter(|&&d| d > 0.0).count();
    Ok((deltas, positives))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn perfect_predictions_diagonal() {
        let cm = ConfusionMatrix::from_predictions(&[0, 1, 2, 1], &[0, 1, 2, 1], 3).unwrap();
        assert_eq!(cm.get(1, 1), 2);
        assert_eq!(weighted_f1(&cm).unwrap(), 1.0);
        assert_eq!(macro_f1(&cm).unwrap(), 1.0);
    }

    #[test]
    fn empty_input_zero_matrix() {
        let cm = ConfusionMatrix::from_predictions(&[], &[], 3).unwrap();
        assert_eq!(cm.total(), 0);
        assert!(weighted_f1(&cm).is_err());
    }

    #[test]
    fn direct_count_example() {
        let cm = ConfusionMatrix::from_predictions(&[0, 1, 1], &[0, 0, 1], 2).unwrap();
        assert_eq!(cm.counts, vec![1, 1, 0, 1]);
    }

    #[test]
    fn length_mismatch_rejected() {
        assert!(ConfusionMatrix::from_predictions(&[0], &[0, 1], 2).is_err());
    }

    #[test]
    fn symmetric_half_matrix() {
        let cm = ConfusionMatrix {
            classes: 2,
            counts: vec![5, 5, 5, 5],
        };
        assert!((weighted_f1(&cm).unwrap() - 0.5).abs() < 1e-15);
    }

    #[test]
    fn three_class_hand_oracle() {
        let cm = ConfusionMatrix {
            classes: 3,
            counts: vec![8, 2, 0, 1, 6, 3, 0, 4, 6],
        };
        // Hand computation: P0=8/9, R0=8/10; P1=6/12, R1=6/10; P2=6/9, R2=6/10.
        let f = |p: f64, r: f64| 2.0 * p * r / (p + r);
        let f0 = f(8.0 / 9.0, 0.8);
        let f1 = f(0.5, 0.6);
        let f2 = f(6.0 / 9.0, 0.6);
        let expect = (f0 * 10.0 + f1 * 10.0 + f2 * 10.0) / 30.0;
        assert!((weighted_f1(&cm).unwrap() - expect).abs() < 1e-15);
        let expect_macro = (f0 + f1 + f2) / 3.0;
        assert!((macro_f1(&cm).unwrap() - expect_macro).abs() < 1e-15);
    }

    #[test]
    fn single_class_macro_equals_that_class() {
        let cm = ConfusionMatrix {
            classes: 3,
            counts: vec![0, 0, 0, 2, 6, 2, 0, 0, 0],
        };
        let f1 = cm.per_class_f1();
        assert!((macro_f1(&cm).unwrap() - f1[1]).abs() < 1e-15);
    }

    #[test]
    fn aggregate_two_values() {
        let a = aggregate_seeds(&[67.70, 67.76]).unwrap();
        assert!((a.mean - 67.73).abs() < 1e-12);
        assert!(a.std.is_some());
        let single = aggregate_seeds(&[5.0]).unwrap();
        assert!(single.std.is_none());
    }

    #[test]
    fn aggregate_three_hand_oracle() {
        let vals = [1.0, 2.0, 4.0];
        let a = aggregate_seeds(&vals).unwrap();
        let mean: f64 = 7.0 / 3.0;
        let var = ((1.0 - mean).powi(2) + (2.0 - mean).powi(2) + (4.0 - mean).powi(2)) / 2.0;
        assert!((a.mean - mean).abs() < 1e-15);
        assert!((a.std.unwrap() - var.sqrt()).abs() < 1e-15);
    }

    #[test]
    fn paired_delta_signs() {
        let (deltas, pos) = paired_deltas(&[1.0, 2.0, 3.0], &[0.5, 2.5, 2.0]).unwrap();
        assert_eq!(deltas, vec![0.5, -0.5, 1.0]);
        assert_eq!(pos, 2);
    }
}

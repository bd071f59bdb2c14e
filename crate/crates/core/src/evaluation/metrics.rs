use serde::Serialize;

use crate::error::{Error, Result};

/// Confusion counts for a binary problem with derived scores.
///
/// The positive class is the minority class.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct ClassificationMetrics {
    pub true_positive: u64,
    pub false_positive: u64,
    pub false_negative: u64,
    pub true_negative: u64,
    /// Misclassified fraction.
    pub err: f64,
    pub precision: f64,
    pub recall: f64,
    pub f_score: f64,
    pub beta: f64,
}

impl ClassificationMetrics {
    pub fn from_counts(tp: u64, fp: u64, fn_: u64, tn: u64, beta: f64) -> Result<Self> {
        if !(beta > 0.0) || !beta.is_finite() {
            return Err(Error::InvalidArgument(format!("beta must be > 0, got {beta}")));
        }
        let n = tp + fp + fn_ + tn;
        let err = if n == 0 { 0.0 } else { (fp + fn_) as f64 / n as f64 };
        let (precision, recall, f_score) = prf(tp, fp, fn_, beta);
        Ok(Self {
            true_positive: tp,
            false_positive: fp,
            false_negative: fn_,
            true_negative: tn,
            err,
            precision,
            recall,
            f_score,
            beta,
        })
    }

    /// Counts `predicted` against `truth`, treating `positive` as the positive label.
    pub fn from_labels(truth: &[u8], predicted: &[u8], positive: u8, beta: f64) -> Result<Self> {
        if truth.len() != predicted.len() {
            return Err(Error::dims("predicted labels", truth.len(), predicted.len()));
        }
        let (mut tp, mut fp, mut fn_, mut tn) = (0, 0, 0, 0);
        for (&t, &p) in truth.iter().zip(predicted) {
            match (t == positive, p == positive) {
                (true, true) => tp += 1,
                (false, true) => fp += 1,
                (true, false) => fn_ += 1,
                (false, false) => tn += 1,
            }
        }
        Self::from_counts(tp, fp, fn_, tn, beta)
    }

    pub fn total(&self) -> u64 {
        self.true_positive + self.false_positive + self.false_negative + self.true_negative
    }

    pub fn accuracy(&self) -> f64 {
        1.0 - self.err
    }

    /// Sums confusion counts and recomputes the scores.
    pub fn merge(&self, other: &Self) -> Result<Self> {
        Self::from_counts(
            self.true_positive + other.true_positive,
            self.false_positive + other.false_positive,
            self.false_negative + other.false_negative,
            self.true_negative + other.true_negative,
            self.beta,
        )
    }
}

fn ratio(num: f64, den: f64) -> f64 {
    if den == 0.0 {
        0.0
    } else {
        num / den
    }
}

/// Precision, recall and F-beta from confusion counts; `0/0` gives 0.
///
/// F is evaluated as `(1+b^2) TP / ((1+b^2) TP + b^2 FN + FP)`, which equals
/// `(1+b^2) Pr Re / (b^2 Pr + Re)` without the intermediate rounding.
pub fn prf(tp: u64, fp: u64, fn_: u64, beta: f64) -> (f64, f64, f64) {
    let (tp, fp, fn_) = (tp as f64, fp as f64, fn_ as f64);
    let b2 = beta * beta;
    let precision = ratio(tp, tp + fp);
    let recall = ratio(tp, tp + fn_);
    let f = ratio((1.0 + b2) * tp, (1.0 + b2) * tp + b2 * fn_ + fp);
    (precision, recall, f)
}

/// F-beta from precision and recall; `0/0` gives 0.
pub fn f_score(precision: f64, recall: f64, beta: f64) -> f64 {
    let b2 = beta * beta;
    ratio((1.0 + b2) * precision * recall, b2 * precision + recall)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn hand_examples() {
        let (p, r, f) = prf(3, 1, 2, 1.0);
        assert_eq!((p, r), (0.75, 0.6));
        assert_eq!(f, 2.0 / 3.0);
        assert_eq!(prf(0, 0, 5, 1.0), (0.0, 0.0, 0.0));
        assert_eq!(prf(0, 0, 0, 2.0), (0.0, 0.0, 0.0));
        assert!((f_score(0.4, 0.4, 1.0) - 0.4).abs() <= f64::EPSILON);
    }

    #[test]
    fn from_labels_counts() {
        let truth = [1, 1, 1, 0, 0, 1, 0, 1];
        let pred = [1, 0, 1, 1, 0, 1, 0, 0];
        let m = ClassificationMetrics::from_labels(&truth, &pred, 1, 1.0).unwrap();
        assert_eq!((m.true_positive, m.false_positive, m.false_negative, m.true_negative), (3, 1, 2, 2));
        assert_eq!(m.err, 3.0 / 8.0);
        assert_eq!(m.f_score, 2.0 / 3.0);
        assert!(ClassificationMetrics::from_labels(&truth, &pred[..3], 1, 1.0).is_err());
    }

    proptest! {
        #[test]
        fn err_complements_accuracy(tp in 0u64..10_000, fp in 0u64..10_000, fn_ in 0u64..10_000, tn in 0u64..10_000) {
            let m = ClassificationMetrics::from_counts(tp, fp, fn_, tn, 1.0).unwrap();
            prop_assert_eq!(m.err + m.accuracy(), 1.0);
            prop_assert!((0.0..=1.0).contains(&m.err) && (0.0..=1.0).contains(&m.f_score));
            let n = (tp + fp + fn_ + tn) as f64;
            if n > 0.0 {
                prop_assert!((m.accuracy() - (tp + tn) as f64 / n).abs() <= 2.0 * f64::EPSILON);
            }
        }

        #[test]
        fn f1_symmetric_and_matches_ratio_form(p in 0.0f64..=1.0, r in 0.0f64..=1.0) {
            prop_assert_eq!(f_score(p, r, 1.0), f_score(r, p, 1.0));
            prop_assert!((f_score(p, p, 1.0) - p).abs() <= 4.0 * f64::EPSILON);
        }

        #[test]
        fn count_form_matches_ratio_form(tp in 1u64..1000, fp in 0u64..1000, fn_ in 0u64..1000, beta in 0.1f64..4.0) {
            let (p, r, f) = prf(tp, fp, fn_, beta);
            prop_assert!((f - f_score(p, r, beta)).abs() <= 1e-12);
        }
    }
}

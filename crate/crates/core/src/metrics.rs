//! Discretised sentiment metrics: binary and 7-class precision, recall and
//! F1, plus the mean absolute error of the raw scores.

use serde::{Deserialize, Serialize};

#[derive(Debug, thiserror::Error, PartialEq)]
pub enum MetricsError {
    #[error("non-finite score {0}")]
    NonFinite(f64),
    #[error("length mismatch: {predictions} predictions vs {actuals} actuals")]
    LengthMismatch { predictions: usize, actuals: usize },
    #[error("nothing to evaluate")]
    Empty,
    #[error("class {0} is not in the class set")]
    UnknownClass(i64),
}

pub const BINARY_CLASSES: [i64; 2] = [0, 1];
pub const SEVEN_CLASSES: [i64; 7] = [-3, -2, -1, 0, 1, 2, 3];

/// 1 (positive) when `score >= 0`, else 0 (negative).
pub fn score_to_binary(score: f64) -> Result<i64, MetricsError> {
    if !score.is_finite() {
        return Err(MetricsError::NonFinite(score));
    }
    Ok(i64::from(score >= 0.0))
}

/// Nearest integer (halves away from zero), clamped to `[-3, 3]`.
pub fn score_to_7class(score: f64) -> Result<i64, MetricsError> {
    if !score.is_finite() {
        return Err(MetricsError::NonFinite(score));
    }
    Ok(score.round().clamp(-3.0, 3.0) as i64)
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ConfusionMatrix {
    pub classes: Vec<i64>,
    /// `counts[predicted][actual]`
    pub counts: Vec<Vec<u64>>,
}

impl ConfusionMatrix {
    pub fn total(&self) -> u64 {
        self.counts.iter().flatten().sum()
    }

    /// Number of predictions of each class.
    pub fn row_totals(&self) -> Vec<u64> {
        self.counts.iter().map(|r| r.iter().sum()).collect()
    }

    /// Number of actual instances of each class.
    pub fn column_totals(&self) -> Vec<u64> {
        (0..self.classes.len())
            .map(|a| self.counts.iter().map(|r| r[a]).sum())
            .collect()
    }
}

pub fn confusion(preds: &[i64], actuals: &[i64], classes: &[i64]) -> Result<ConfusionMatrix, MetricsError> {
    if preds.len() != actuals.len() {
        return Err(MetricsError::LengthMismatch {
            predictions: preds.len(),
            actuals: actuals.len(),
        });
    }
    if preds.is_empty() {
        return Err(MetricsError::Empty);
    }
    let index = |c: i64| classes.iter().position(|&k| k == c).ok_or(MetricsError::UnknownClass(c));
    let mut counts = vec![vec![0u64; classes.len()]; classes.len()];
    for (&p, &a) in preds.iter().zip(actuals) {
        counts[index(p)?][index(a)?] += 1;
    }
    Ok(ConfusionMatrix {
        classes: classes.to_vec(),
        counts,
    })
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct ClassScores {
    pub class: i64,
    pub precision: f64,
    pub recall: f64,
    pub f1: f64,
    pub support: u64,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Averages {
    pub precision: f64,
    pub recall: f64,
    pub f1: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Prf1 {
    pub per_class: Vec<ClassScores>,
    /// Averages weighted by class support.
    pub weighted: Averages,
    /// Plain mean over classes.
    pub unweighted: Averages,
}

fn ratio(num: u64, den: u64) -> f64 {
    if den == 0 {
        0.0
    } else {
        num as f64 / den as f64
    }
}

/// Per-class precision, recall and F1 with both averages; zero denominators yield 0.
pub fn prf1(m: &ConfusionMatrix) -> Prf1 {
    let predicted = m.row_totals();
    let actual = m.column_totals();
    let per_class: Vec<ClassScores> = m
        .classes
        .iter()
        .enumerate()
        .map(|(i, &class)| {
            let tp = m.counts[i][i];
            let precision = ratio(tp, predicted[i]);
            let recall = ratio(tp, actual[i]);
            let f1 = if precision + recall > 0.0 {
                2.0 * precision * recall / (precision + recall)
            } else {
                0.0
            };
            ClassScores {
                class,
                precision,
                recall,
                f1,
                support: actual[i],
            }
        })
        .collect();
    let total: u64 = actual.iter().sum();
    let avg = |weight: &dyn Fn(&ClassScores) -> f64, norm: f64| {
        let f = |get: fn(&ClassScores) -> f64| -> f64 {
            if norm == 0.0 {
                0.0
            } else {
                per_class.iter().map(|c| weight(c) * get(c)).sum::<f64>() / norm
            }
        };
        Averages {
            precision: f(|c| c.precision),
            recall: f(|c| c.recall),
            f1: f(|c| c.f1),
        }
    };
    let weighted = avg(&|c| c.support as f64, total as f64);
    let unweighted = avg(&|_| 1.0, per_class.len() as f64);
    Prf1 {
        per_class,
        weighted,
        unweighted,
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ClassificationBlock {
    pub confusion: ConfusionMatrix,
    pub scores: Prf1,
}

/// Test-split evaluation of a regressor.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvaluationReport {
    pub n: usize,
    pub mae: f64,
    pub binary: ClassificationBlock,
    pub seven_class: ClassificationBlock,
}

pub fn evaluate(predictions: &[f64], labels: &[f64]) -> Result<EvaluationReport, MetricsError> {
    if predictions.len() != labels.len() {
        return Err(MetricsError::LengthMismatch {
            predictions: predictions.len(),
            actuals: labels.len(),
        });
    }
    if labels.is_empty() {
        return Err(MetricsError::Empty);
    }
    let block = |f: fn(f64) -> Result<i64, MetricsError>, classes: &[i64]| -> Result<ClassificationBlock, MetricsError> {
        let p = predictions.iter().map(|&s| f(s)).collect::<Result<Vec<_>, _>>()?;
        let a = labels.iter().map(|&s| f(s)).collect::<Result<Vec<_>, _>>()?;
        let confusion = confusion(&p, &a, classes)?;
        let scores = prf1(&confusion);
        Ok(ClassificationBlock { confusion, scores })
    };
    let mae = predictions.iter().zip(labels).map(|(p, y)| (p - y).abs()).sum::<f64>() / labels.len() as f64;
    Ok(EvaluationReport {
        n: labels.len(),
        mae,
        binary: block(score_to_binary, &BINARY_CLASSES)?,
        seven_class: block(score_to_7class, &SEVEN_CLASSES)?,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn binary_rule() {
        assert_eq!(score_to_binary(2.3), Ok(1));
        assert_eq!(score_to_binary(-0.01), Ok(0));
        assert_eq!(score_to_binary(0.0), Ok(1));
        assert_eq!(score_to_binary(-0.0), Ok(1));
        assert!(score_to_binary(f64::NAN).is_err());
    }

    #[test]
    fn seven_class_rule() {
        assert_eq!(score_to_7class(2.6), Ok(3));
        assert_eq!(score_to_7class(-3.4), Ok(-3));
        assert_eq!(score_to_7class(0.5), Ok(1));
        assert_eq!(score_to_7class(-0.5), Ok(-1));
        assert_eq!(score_to_7class(9.0), Ok(3));
        assert!(score_to_7class(f64::INFINITY).is_err());
    }

    #[test]
    fn confusion_cases() {
        let m = confusion(&[1, 0, 1], &[1, 0, 1], &BINARY_CLASSES).unwrap();
        assert_eq!(m.counts, vec![vec![1, 0], vec![0, 2]]);
        let m = confusion(&[1, 1, 0, 0], &[1, 0, 1, 0], &BINARY_CLASSES).unwrap();
        assert_eq!(m.counts, vec![vec![1, 1], vec![1, 1]]);
        assert_eq!(confusion(&[1], &[1, 0], &BINARY_CLASSES), Err(MetricsError::LengthMismatch { predictions: 1, actuals: 2 }));
        assert_eq!(confusion(&[], &[], &BINARY_CLASSES), Err(MetricsError::Empty));
        assert_eq!(confusion(&[5], &[1], &BINARY_CLASSES), Err(MetricsError::UnknownClass(5)));
    }

    #[test]
    fn perfect_predictions() {
        let m = confusion(&[-3, 0, 2, 2], &[-3, 0, 2, 2], &SEVEN_CLASSES).unwrap();
        for c in prf1(&m).per_class.iter().filter(|c| c.support > 0) {
            assert_eq!((c.precision, c.recall, c.f1), (1.0, 1.0, 1.0));
        }
    }

    #[test]
    fn hand_counted_binary() {
        // tp=3, fp=1, fn=2 for the positive class; one true negative.
        let m = ConfusionMatrix {
            classes: BINARY_CLASSES.to_vec(),
            counts: vec![vec![1, 2], vec![1, 3]],
        };
        let pos = prf1(&m).per_class[1];
        assert_eq!(pos.precision, 0.75);
        assert!((pos.recall - 0.6).abs() < 1e-15);
        assert!((pos.f1 - 2.0 * 0.45 / 1.35).abs() < 1e-15);
    }

    #[test]
    fn never_predicted_class_has_zero_precision() {
        let m = confusion(&[1, 1, 1], &[0, 1, 0], &BINARY_CLASSES).unwrap();
        let s = prf1(&m);
        assert_eq!(s.per_class[0].precision, 0.0);
        assert_eq!(s.per_class[0].f1, 0.0);
    }

    #[test]
    fn weighted_versus_unweighted() {
        // class 0: P=1, R=0.5 (support 2); class 1: P=0.5, R=1 (support 1)
        let m = confusion(&[0, 1, 1], &[0, 0, 1], &BINARY_CLASSES).unwrap();
        let s = prf1(&m);
        assert!((s.weighted.precision - (2.0 * 1.0 + 0.5) / 3.0).abs() < 1e-15);
        assert!((s.unweighted.precision - 0.75).abs() < 1e-15);
    }

    #[test]
    fn evaluation_report_counts() {
        let r = evaluate(&[0.4, -1.6, 2.5, -0.2], &[1.0, -2.0, 3.0, 0.0]).unwrap();
        assert_eq!(r.n, 4);
        assert!((r.mae - (0.6 + 0.4 + 0.5 + 0.2) / 4.0).abs() < 1e-15);
        assert_eq!(r.binary.confusion.total(), 4);
        assert_eq!(r.seven_class.confusion.total(), 4);
        let support: u64 = r.seven_class.scores.per_class.iter().map(|c| c.support).sum();
        assert_eq!(support, 4);
    }

    /// Straightforward re-derivation of per-class scores from raw pairs.
    fn naive(preds: &[i64], actuals: &[i64], classes: &[i64]) -> Vec<(f64, f64, f64)> {
        classes
            .iter()
            .map(|&c| {
                let mut tp = 0u64;
                let mut fp = 0u64;
                let mut fneg = 0u64;
                for (&p, &a) in preds.iter().zip(actuals) {
                    match (p == c, a == c) {
                        (true, true) => tp += 1,
                        (true, false) => fp += 1,
                        (false, true) => fneg += 1,
                        _ => {}
                    }
                }
                let p = if tp + fp == 0 { 0.0 } else { tp as f64 / (tp + fp) as f64 };
                let r = if tp + fneg == 0 { 0.0 } else { tp as f64 / (tp + fneg) as f64 };
                let f = if p + r == 0.0 { 0.0 } else { 2.0 * p * r / (p + r) };
                (p, r, f)
            })
            .collect()
    }

    proptest! {
        #[test]
        fn prf1_matches_naive(pairs in prop::collection::vec((-3i64..=3, -3i64..=3), 1..200)) {
            let (p, a): (Vec<i64>, Vec<i64>) = pairs.into_iter().unzip();
            let m = confusion(&p, &a, &SEVEN_CLASSES).unwrap();
            let got = prf1(&m);
            for (c, want) in got.per_class.iter().zip(naive(&p, &a, &SEVEN_CLASSES)) {
                prop_assert_eq!((c.precision, c.recall, c.f1), want);
            }
        }

        #[test]
        fn marginals_conserve_count(pairs in prop::collection::vec((0i64..=1, 0i64..=1), 1..100)) {
            let n = pairs.len() as u64;
            let (p, a): (Vec<i64>, Vec<i64>) = pairs.into_iter().unzip();
            let m = confusion(&p, &a, &BINARY_CLASSES).unwrap();
            prop_assert_eq!(m.row_totals().iter().sum::<u64>(), n);
            prop_assert_eq!(m.column_totals().iter().sum::<u64>(), n);
        }

        #[test]
        fn f1_between_precision_and_recall(pairs in prop::collection::vec((-3i64..=3, -3i64..=3), 1..100)) {
            let (p, a): (Vec<i64>, Vec<i64>) = pairs.into_iter().unzip();
            for c in prf1(&confusion(&p, &a, &SEVEN_CLASSES).unwrap()).per_class {
                if c.precision > 0.0 && c.recall > 0.0 {
                    prop_assert!(c.f1 >= c.precision.min(c.recall) - 1e-15);
                    prop_assert!(c.f1 <= c.precision.max(c.recall) + 1e-15);
                } else {
                    prop_assert_eq!(c.f1, 0.0);
                }
            }
        }

        #[test]
        fn seven_class_idempotent(x in -10.0f64..10.0) {
            let c = score_to_7class(x).unwrap();
            prop_assert_eq!(score_to_7class(c as f64).unwrap(), c);
            prop_assert!((-3..=3).contains(&c));
        }
    }
}

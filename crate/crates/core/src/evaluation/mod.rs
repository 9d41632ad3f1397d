//! Metrics, probability-averaging ensembles, cross-domain matrices and the
//! leakage verification experiments.

mod crossdomain;
mod ensemble;
mod verify;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub use crossdomain::{cross_domain_eval, CrossDomainMatrix};
pub use ensemble::{ensemble_predict, ensemble_predict_set};
pub use verify::{verify_no_leakage, ExperimentA, ExperimentB, VerificationReport};

/// Accuracy plus macro-averaged precision, recall and F1.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    pub domain_tag: String,
    pub n: usize,
    pub accuracy: f64,
    pub precision: f64,
    pub recall: f64,
    pub f1: f64,
    /// `confusion[truth][prediction]`.
    pub confusion: Vec<Vec<usize>>,
    /// Classes whose precision was 0/0 and therefore reported as 0.
    pub undefined_precision: usize,
}

fn ratio(num: usize, den: usize) -> f64 {
    if den == 0 {
        0.0
    } else {
        num as f64 / den as f64
    }
}

/// Metrics of `pred` against `truth` over `classes` classes.
pub fn compute_metrics(pred: &[usize], truth: &[usize], classes: usize) -> Result<MetricsReport> {
    if pred.len() != truth.len() {
        return Err(Error::Shape(format!("{} predictions for {} labels", pred.len(), truth.len())));
    }
    if pred.is_empty() {
        return Err(Error::EmptyDataset("no predictions to score".into()));
    }
    let mut confusion = vec![vec![0usize; classes]; classes];
    for (row, (&p, &t)) in pred.iter().zip(truth).enumerate() {
        if let Some(&label) = [t, p].iter().find(|&&l| l >= classes) {
            return Err(Error::LabelOutOfRange { row, label, classes });
        }
        confusion[t][p] += 1;
    }
    Ok(MetricsReport::from_confusion(confusion, ""))
}

impl MetricsReport {
    pub fn from_confusion(confusion: Vec<Vec<usize>>, domain_tag: &str) -> Self {
        let c = confusion.len();
        let n: usize = confusion.iter().flatten().sum();
        let trace: usize = (0..c).map(|k| confusion[k][k]).sum();
        let (mut p_sum, mut r_sum, mut f_sum, mut undefined) = (0.0, 0.0, 0.0, 0);
        for k in 0..c {
            let predicted: usize = confusion.iter().map(|row| row[k]).sum();
            let actual: usize = confusion[k].iter().sum();
            if predicted == 0 {
                undefined += 1;
            }
            let p = ratio(confusion[k][k], predicted);
            let r = ratio(confusion[k][k], actual);
            p_sum += p;
            r_sum += r;
            f_sum += if p + r == 0.0 { 0.0 } else { 2.0 * p * r / (p + r) };
        }
        MetricsReport {
            domain_tag: domain_tag.to_string(),
            n,
            accuracy: ratio(trace, n),
            precision: p_sum / c as f64,
            recall: r_sum / c as f64,
            f1: f_sum / c as f64,
            confusion,
            undefined_precision: undefined,
        }
    }

    pub fn with_tag(mut self, tag: impl Into<String>) -> Self {
        self.domain_tag = tag.into();
        self
    }

    pub const CSV_HEADER: [&'static str; 6] = ["domain", "n", "accuracy", "precision", "recall", "f1"];

    pub fn csv_row(&self) -> [String; 6] {
        [
            self.domain_tag.clone(),
            self.n.to_string(),
            self.accuracy.to_string(),
            self.precision.to_string(),
            self.recall.to_string(),
            self.f1.to_string(),
        ]
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn perfect_predictions() {
        let t: Vec<usize> = (0..100).map(|i| i % 2).collect();
        let m = compute_metrics(&t, &t, 2).unwrap();
        assert_eq!((m.accuracy, m.precision, m.recall, m.f1), (1.0, 1.0, 1.0, 1.0));
    }

    #[test]
    fn all_positive_predictor() {
        let t: Vec<usize> = (0..100).map(|i| i % 2).collect();
        let m = compute_metrics(&[1; 100], &t, 2).unwrap();
        assert_eq!(m.accuracy, 0.5);
        assert_eq!(m.precision, 0.25);
        assert_eq!(m.recall, 0.5);
        assert_eq!(m.undefined_precision, 1);
    }

    #[test]
    fn length_mismatch() {
        assert!(compute_metrics(&[0, 1], &[0], 2).is_err());
        assert!(compute_metrics(&[2], &[0], 2).is_err());
    }
}

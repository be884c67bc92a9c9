use serde::{Deserialize, Serialize};

use crate::metrics::{tukey_filter, TUKEY_K};

/// One run's value of a metric.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct RunValue {
    pub seed: u64,
    pub accuracy: f64,
    pub auc: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Removed {
    pub seed: u64,
    pub value: f64,
}

/// Tukey-filtered summary of one metric across runs.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Summary {
    pub mean: f64,
    /// Sample standard deviation of the kept values (0 for one value).
    pub std: f64,
    pub n_kept: usize,
    pub n_removed: usize,
    /// Largest kept value.
    pub best: f64,
    /// Mean AUC over kept runs, when every kept run has one.
    pub auc_mean: Option<f64>,
    /// AUC of the best run.
    pub auc_best: Option<f64>,
    pub removed: Vec<Removed>,
}

pub fn mean_std(values: &[f64]) -> (f64, f64) {
    let n = values.len() as f64;
    let mean = values.iter().sum::<f64>() / n;
    if values.len() < 2 {
        return (mean, 0.0);
    }
    let var = values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1.0);
    (mean, var.sqrt())
}

/// Removes Tukey outliers from the accuracies and summarizes the rest.
/// The best run is the first kept run with the highest accuracy.
pub fn aggregate(values: &[RunValue]) -> Option<Summary> {
    if values.is_empty() {
        return None;
    }
    let acc: Vec<f64> = values.iter().map(|v| v.accuracy).collect();
    let split = tukey_filter(&acc, TUKEY_K);
    let kept: Vec<&RunValue> = split.kept.iter().map(|&i| &values[i]).collect();
    let (mean, std) = mean_std(&split.kept_values(&acc));
    let best_run = kept
        .iter()
        .fold(None::<&RunValue>, |b, v| match b {
            Some(b) if b.accuracy >= v.accuracy => Some(b),
            _ => Some(v),
        })
        .unwrap();
    let aucs: Option<Vec<f64>> = kept.iter().map(|v| v.auc).collect();
    Some(Summary {
        mean,
        std,
        n_kept: kept.len(),
        n_removed: split.removed.len(),
        best: best_run.accuracy,
        auc_mean: aucs.map(|a| mean_std(&a).0),
        auc_best: best_run.auc,
        removed: split
            .removed
            .iter()
            .map(|&i| Removed {
                seed: values[i].seed,
                value: values[i].accuracy,
            })
            .collect(),
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn runs(acc: &[f64]) -> Vec<RunValue> {
        acc.iter()
            .enumerate()
            .map(|(i, &a)| RunValue {
                seed: i as u64,
                accuracy: a,
                auc: None,
            })
            .collect()
    }

    #[test]
    fn constant_values() {
        let s = aggregate(&runs(&[0.9, 0.9, 0.9])).unwrap();
        assert_eq!((s.mean, s.std, s.n_removed), (0.9, 0.0, 0));
    }

    #[test]
    fn outlier_excluded() {
        let mut acc: Vec<f64> = (0..99).map(|i| 0.9 + 0.001 * (i % 7) as f64).collect();
        acc.push(0.1);
        let s = aggregate(&runs(&acc)).unwrap();
        assert_eq!(s.n_removed, 1);
        assert_eq!(s.removed[0].seed, 99);
        assert!(s.mean > 0.9 && s.best >= s.mean);
    }

    #[test]
    fn empty_is_none() {
        assert!(aggregate(&[]).is_none());
    }
}

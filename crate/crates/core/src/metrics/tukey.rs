//! Tukey-fence outlier filtering.
//!
//! Quartiles use linear interpolation between order statistics
//! (`pos = p·(n−1)`); the choice changes keep/drop decisions at small `n`.

use serde::{Deserialize, Serialize};

pub const TUKEY_K: f64 = 1.5;

/// Quantile of sorted data by linear interpolation between order statistics.
pub fn quantile_sorted(sorted: &[f64], p: f64) -> f64 {
    assert!(!sorted.is_empty());
    let pos = p.clamp(0.0, 1.0) * (sorted.len() - 1) as f64;
    let lo = pos.floor() as usize;
    let hi = pos.ceil() as usize;
    let frac = pos - lo as f64;
    sorted[lo] + frac * (sorted[hi] - sorted[lo])
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TukeySplit {
    /// Indices into the input, in input order.
    pub kept: Vec<usize>,
    pub removed: Vec<usize>,
    /// `None` when too few values to filter.
    pub fences: Option<(f64, f64)>,
}

impl TukeySplit {
    pub fn kept_values(&self, values: &[f64]) -> Vec<f64> {
        self.kept.iter().map(|&i| values[i]).collect()
    }

    pub fn removed_values(&self, values: &[f64]) -> Vec<f64> {
        self.removed.iter().map(|&i| values[i]).collect()
    }
}

/// Keeps values inside `[Q1 − k·IQR, Q3 + k·IQR]`. With fewer than four
/// values everything is kept.
pub fn tukey_filter(values: &[f64], k: f64) -> TukeySplit {
    if values.len() < 4 {
        if !values.is_empty() {
            log::warn!(
                "tukey_filter: {} values, passing through unfiltered",
                values.len()
            );
        }
        return TukeySplit {
            kept: (0..values.len()).collect(),
            removed: Vec::new(),
            fences: None,
        };
    }
    let mut sorted = values.to_vec();
    sorted.sort_by(f64::total_cmp);
    let q1 = quantile_sorted(&sorted, 0.25);
    let q3 = quantile_sorted(&sorted, 0.75);
    let iqr = q3 - q1;
    let (lo, hi) = (q1 - k * iqr, q3 + k * iqr);
    let (kept, removed) = (0..values.len()).partition(|&i| values[i] >= lo && values[i] <= hi);
    TukeySplit {
        kept,
        removed,
        fences: Some((lo, hi)),
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn examples() {
        let v = [1.0, 2.0, 3.0, 4.0, 100.0];
        let s = tukey_filter(&v, TUKEY_K);
        assert_eq!(s.removed_values(&v), vec![100.0]);
        assert_eq!(s.fences, Some((-1.0, 7.0)));

        let same = [0.9; 6];
        assert!(tukey_filter(&same, TUKEY_K).removed.is_empty());

        let few = [1.0, 50.0, 1000.0];
        let s = tukey_filter(&few, TUKEY_K);
        assert_eq!(s.kept, vec![0, 1, 2]);
        assert!(s.fences.is_none());
    }

    #[test]
    fn quantiles() {
        let s = [1.0, 2.0, 3.0, 4.0];
        assert_eq!(quantile_sorted(&s, 0.25), 1.75);
        assert_eq!(quantile_sorted(&s, 0.5), 2.5);
        assert_eq!(quantile_sorted(&s, 1.0), 4.0);
    }
}

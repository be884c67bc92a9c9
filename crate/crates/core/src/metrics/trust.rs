//! Softmax-based trust quantification.
//!
//! Question-answer trust rewards the confidence of a correct prediction and
//! penalizes the confidence of a wrong one. Conditional trust scores the
//! members of a condition (for example "correct predictions of class c")
//! without the penalty branch. A condition's trust spectrum is a Gaussian
//! KDE over its scores with bandwidth `γ/√N`, and its score (NTS) is the
//! mean of its conditional trust values.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PredictionRecord {
    pub softmax: Vec<f64>,
    pub predicted: usize,
    pub actual: usize,
}

impl PredictionRecord {
    /// Builds a record, predicting the arg-max class (lowest index on ties).
    pub fn from_softmax(softmax: Vec<f64>, actual: usize) -> Self {
        let predicted = argmax(&softmax);
        Self {
            softmax,
            predicted,
            actual,
        }
    }

    /// `C(y|x)`: the probability assigned to the predicted class.
    pub fn confidence(&self) -> f64 {
        self.softmax[self.predicted]
    }

    pub fn correct(&self) -> bool {
        self.predicted == self.actual
    }

    pub fn validate(&self) -> Result<()> {
        let s: f64 = self.softmax.iter().sum();
        if (s - 1.0).abs() > 1e-9 || self.softmax.iter().any(|p| !(0.0..=1.0).contains(p)) {
            return Err(Error::invalid(format!(
                "softmax {:?} is not a distribution",
                self.softmax
            )));
        }
        if self.actual >= self.softmax.len() {
            return Err(Error::invalid(format!(
                "actual class {} outside {} classes",
                self.actual,
                self.softmax.len()
            )));
        }
        if self.predicted != argmax(&self.softmax) {
            return Err(Error::invalid("predicted class is not the softmax arg-max"));
        }
        Ok(())
    }
}

pub(crate) fn argmax(v: &[f64]) -> usize {
    v.iter()
        .enumerate()
        .fold((0, f64::NEG_INFINITY), |(bi, bv), (i, &x)| {
            if x > bv {
                (i, x)
            } else {
                (bi, bv)
            }
        })
        .0
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TrustConfig {
    /// Reward exponent.
    pub alpha: f64,
    /// Penalty exponent.
    pub beta: f64,
    /// KDE bandwidth factor; the bandwidth is `gamma / sqrt(N)`.
    pub gamma: f64,
}

impl Default for TrustConfig {
    fn default() -> Self {
        Self {
            alpha: 1.0,
            beta: 1.0,
            gamma: 0.5,
        }
    }
}

impl TrustConfig {
    pub fn validate(&self) -> Result<()> {
        if self.alpha > 0.0 && self.beta > 0.0 && self.gamma > 0.0 {
            Ok(())
        } else {
            Err(Error::invalid("trust exponents and gamma must be positive"))
        }
    }
}

pub fn qa_trust(record: &PredictionRecord, cfg: &TrustConfig) -> f64 {
    let c = record.confidence();
    if record.correct() {
        c.powf(cfg.alpha)
    } else {
        (1.0 - c).powf(cfg.beta)
    }
}

/// `C(y|x)^α` for each member of a condition.
pub fn conditional_trust<'a>(
    records: impl IntoIterator<Item = &'a PredictionRecord>,
    cfg: &TrustConfig,
) -> Vec<f64> {
    let out: Vec<f64> = records
        .into_iter()
        .map(|r| r.confidence().powf(cfg.alpha))
        .collect();
    if out.is_empty() {
        log::debug!("conditional_trust: empty condition");
    }
    out
}

/// Mean of a condition's trust values, clipped to `[0, 1]`; `None` for an
/// empty condition.
pub fn nts(values: &[f64]) -> Option<f64> {
    if values.is_empty() {
        return None;
    }
    Some((values.iter().sum::<f64>() / values.len() as f64).clamp(0.0, 1.0))
}

pub const DENSITY_POINTS: usize = 512;
pub const DENSITY_LO: f64 = -0.5;
pub const DENSITY_HI: f64 = 1.5;

/// Gaussian KDE sampled on a uniform grid.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrustDensity {
    pub bandwidth: f64,
    pub grid: Vec<f64>,
    pub density: Vec<f64>,
}

impl TrustDensity {
    /// Trapezoidal integral of `g(q) · f(q)` over the grid.
    fn trapz(&self, g: impl Fn(f64) -> f64) -> f64 {
        self.grid
            .windows(2)
            .zip(self.density.windows(2))
            .map(|(x, f)| 0.5 * (x[1] - x[0]) * (g(x[0]) * f[0] + g(x[1]) * f[1]))
            .sum()
    }

    pub fn integral(&self) -> f64 {
        self.trapz(|_| 1.0)
    }

    /// First moment of the density, clipped to `[0, 1]`.
    pub fn mean(&self) -> f64 {
        self.trapz(|q| q).clamp(0.0, 1.0)
    }
}

/// KDE of trust values with bandwidth `γ/√N`, evaluated at
/// [`DENSITY_POINTS`] points spanning `[-0.5, 1.5]`. The span is widened to
/// six bandwidths beyond the data when the kernels would otherwise spill
/// mass past it (small `N`).
pub fn trust_density(values: &[f64], cfg: &TrustConfig) -> Result<TrustDensity> {
    if values.is_empty() {
        return Err(Error::invalid("trust density needs at least one value"));
    }
    let n = values.len() as f64;
    let h = cfg.gamma / n.sqrt();
    let (vmin, vmax) = values
        .iter()
        .fold((f64::INFINITY, f64::NEG_INFINITY), |(a, b), &v| {
            (a.min(v), b.max(v))
        });
    let lo = DENSITY_LO.min(vmin - 6.0 * h);
    let hi = DENSITY_HI.max(vmax + 6.0 * h);
    let step = (hi - lo) / (DENSITY_POINTS - 1) as f64;
    let norm = 1.0 / (n * h * (2.0 * std::f64::consts::PI).sqrt());
    let grid: Vec<f64> = (0..DENSITY_POINTS).map(|i| lo + i as f64 * step).collect();
    let density = grid
        .iter()
        .map(|&x| {
            norm * values
                .iter()
                .map(|&v| (-0.5 * ((x - v) / h).powi(2)).exp())
                .sum::<f64>()
        })
        .collect();
    Ok(TrustDensity {
        bandwidth: h,
        grid,
        density,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ConditionTrust {
    pub values: Vec<f64>,
    pub nts: Option<f64>,
    /// Density-smoothed score, kept when it differs from `nts` by > 1e-3.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub nts_kde: Option<f64>,
    #[serde(skip)]
    pub density: Option<TrustDensity>,
}

/// Per-condition trust, keyed by condition name (`true_<class>` and
/// `false_<class>`).
#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct TrustReport {
    pub conditions: BTreeMap<String, ConditionTrust>,
}

pub fn condition_name(correct: bool, class: &str) -> String {
    format!(
        "{}_{}",
        if correct { "true" } else { "false" },
        sanitize(class)
    )
}

pub(crate) fn sanitize(s: &str) -> String {
    s.chars()
        .map(|c| {
            if c.is_ascii_alphanumeric() || c == '-' || c == '_' {
                c
            } else {
                '_'
            }
        })
        .collect()
}

/// Splits records into correct/incorrect predictions per actual class and
/// scores each condition.
pub fn trust_report(
    records: &[PredictionRecord],
    class_names: &[String],
    cfg: &TrustConfig,
) -> Result<TrustReport> {
    cfg.validate()?;
    let mut conditions = BTreeMap::new();
    for (c, name) in class_names.iter().enumerate() {
        for correct in [true, false] {
            let members = records
                .iter()
                .filter(|r| r.actual == c && r.correct() == correct);
            let values = conditional_trust(members, cfg);
            let nts_mean = nts(&values);
            let density = if values.is_empty() {
                None
            } else {
                Some(trust_density(&values, cfg)?)
            };
            let nts_kde = match (&density, nts_mean) {
                (Some(d), Some(m)) if (d.mean() - m).abs() > 1e-3 => Some(d.mean()),
                _ => None,
            };
            conditions.insert(
                condition_name(correct, name),
                ConditionTrust {
                    values,
                    nts: nts_mean,
                    nts_kde,
                    density,
                },
            );
        }
    }
    Ok(TrustReport { conditions })
}

/// Writes `grid_point,density` rows.
pub fn write_spectrum_csv(path: impl AsRef<Path>, density: &TrustDensity) -> Result<()> {
    let path = path.as_ref();
    let mut out = String::from("grid_point,density\n");
    for (x, f) in density.grid.iter().zip(&density.density) {
        writeln!(out, "{x},{f}").unwrap();
    }
    fs::write(path, out).map_err(|e| Error::io(path, e))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn rec(p: f64, correct: bool) -> PredictionRecord {
        let softmax = vec![p, 1.0 - p];
        PredictionRecord::from_softmax(softmax, if correct { 0 } else { 1 })
    }

    #[test]
    fn qa_trust_examples() {
        let cfg = TrustConfig::default();
        assert!((qa_trust(&rec(0.9, true), &cfg) - 0.9).abs() < 1e-15);
        assert!((qa_trust(&rec(0.9, false), &cfg) - 0.1).abs() < 1e-15);
        assert_eq!(qa_trust(&rec(1.0, true), &cfg), 1.0);
    }

    #[test]
    fn conditional_trust_examples() {
        let cfg = TrustConfig::default();
        let rs = [rec(0.8, true), rec(1.0, true)];
        assert_eq!(conditional_trust(&rs, &cfg), vec![0.8, 1.0]);
        let sq = TrustConfig { alpha: 2.0, ..cfg };
        assert!((conditional_trust(&[rec(0.9, true)], &sq)[0] - 0.81).abs() < 1e-15);
        // wrong predictions use the same formula, no penalty
        assert_eq!(conditional_trust(&[rec(0.7, false)], &cfg), vec![0.7]);
        assert!(conditional_trust(&[], &cfg).is_empty());
    }

    #[test]
    fn nts_examples() {
        assert!((nts(&[0.8, 1.0]).unwrap() - 0.9).abs() < 1e-15);
        assert_eq!(nts(&[1.0, 1.0, 1.0]), Some(1.0));
        assert_eq!(nts(&[0.5]), Some(0.5));
        assert_eq!(nts(&[]), None);
    }

    #[test]
    fn density_examples() {
        let cfg = TrustConfig::default();
        let d = trust_density(&[0.1, 0.4, 0.6, 0.9], &cfg).unwrap();
        assert_eq!(d.bandwidth, 0.25);
        assert_eq!(d.grid.len(), DENSITY_POINTS);
        let single = trust_density(&[0.7], &cfg).unwrap();
        let peak = single.grid[argmax(&single.density)];
        assert!((peak - 0.7).abs() <= (single.grid[1] - single.grid[0]));
        for vals in [vec![1.0], vec![0.0, 1.0], vec![0.99; 50]] {
            let d = trust_density(&vals, &cfg).unwrap();
            assert!(
                (d.integral() - 1.0).abs() < 1e-3,
                "{vals:?}: {}",
                d.integral()
            );
        }
        assert!(trust_density(&[], &cfg).is_err());
    }

    #[test]
    fn report_conditions() {
        let rs = vec![rec(0.8, true), rec(1.0, true), rec(0.6, false)];
        let names = vec!["pass".to_string(), "fail".to_string()];
        let r = trust_report(&rs, &names, &TrustConfig::default()).unwrap();
        assert!((r.conditions["true_pass"].nts.unwrap() - 0.9).abs() < 1e-15);
        assert_eq!(r.conditions["false_pass"].nts, None);
        assert_eq!(r.conditions["false_fail"].values, vec![0.6]);
    }

    #[test]
    fn record_validation() {
        assert!(rec(0.3, true).validate().is_ok());
        let bad = PredictionRecord {
            softmax: vec![0.3, 0.3],
            predicted: 0,
            actual: 0,
        };
        assert!(bad.validate().is_err());
        let wrong_pred = PredictionRecord {
            softmax: vec![0.3, 0.7],
            predicted: 0,
            actual: 0,
        };
        assert!(wrong_pred.validate().is_err());
    }
}

//! Frame subsampling, channel pooling and per-split min-max scaling.
//!
//! The pipeline order is fixed: subsample, then pool, then normalize.

use super::types::Trial;
use crate::array::Array;
use crate::diffcore::kernels;
use crate::error::{Error, Result};

/// Keeps frames `0, s, 2s, ...` with `s = round(fps / target_fps)`.
pub fn subsample_fps(trial: &Trial, target_fps: f64) -> Result<Trial> {
    if target_fps.is_nan() || target_fps <= 0.0 {
        return Err(Error::invalid("target fps must be positive"));
    }
    if trial.fps < target_fps {
        return Err(Error::invalid(format!(
            "trial {:?} is recorded at {} fps, below the target {target_fps}",
            trial.id, trial.fps
        )));
    }
    let stride = (trial.fps / target_fps).round().max(1.0) as usize;
    if stride == 1 {
        return Ok(trial.clone());
    }
    let d = trial.width();
    let data: Vec<f64> = trial
        .sequence
        .rows()
        .step_by(stride)
        .flatten()
        .copied()
        .collect();
    let t = data.len() / d;
    Ok(Trial {
        sequence: Array::new(vec![t, d], data)?,
        fps: trial.fps / stride as f64,
        ..trial.clone()
    })
}

/// Channel-pools a `T x D` trial down to `T x target`.
pub fn pool_to_ssf(trial: &Trial, target: usize) -> Result<Trial> {
    Ok(Trial {
        sequence: kernels::avg_pool_channels(&trial.sequence, target)?,
        ..trial.clone()
    })
}

/// Per-dimension extrema over every frame of every trial in a split.
#[derive(Debug, Clone, PartialEq)]
pub struct MinMax {
    pub min: Vec<f64>,
    pub max: Vec<f64>,
}

impl MinMax {
    pub fn fit(split: &[Trial]) -> Result<Self> {
        let Some(first) = split.first() else {
            return Err(Error::invalid("cannot normalize an empty split"));
        };
        let d = first.width();
        let mut min = vec![f64::INFINITY; d];
        let mut max = vec![f64::NEG_INFINITY; d];
        for t in split {
            if t.width() != d {
                return Err(Error::shape("minmax_normalize", "mixed widths in split"));
            }
            for row in t.sequence.rows() {
                for (j, &v) in row.iter().enumerate() {
                    min[j] = min[j].min(v);
                    max[j] = max[j].max(v);
                }
            }
        }
        Ok(Self { min, max })
    }

    /// `(x − min) / (max − min)`; constant dimensions map to 0.
    pub fn apply(&self, trial: &Trial) -> Trial {
        let d = self.min.len();
        let mut seq = trial.sequence.clone();
        for row in seq.data_mut().chunks_mut(d) {
            for (j, v) in row.iter_mut().enumerate() {
                let range = self.max[j] - self.min[j];
                *v = if range > 0.0 {
                    ((*v - self.min[j]) / range).clamp(0.0, 1.0)
                } else {
                    0.0
                };
            }
        }
        Trial {
            sequence: seq,
            ..trial.clone()
        }
    }
}

/// Min-max scales a split using statistics from that split alone.
pub fn minmax_normalize(split: &[Trial]) -> Result<Vec<Trial>> {
    let stats = MinMax::fit(split)?;
    Ok(split.iter().map(|t| stats.apply(t)).collect())
}

use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use super::types::{Episode, Sample, TaskDataset};
use crate::error::{Error, Result};
use crate::rng::rng;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SamplerConfig {
    pub n_train: usize,
    pub n_val: usize,
    pub k: usize,
    pub seed: u64,
}

impl SamplerConfig {
    pub fn validate(&self) -> Result<()> {
        if self.n_train == 0 || self.n_val == 0 || self.k == 0 {
            return Err(Error::invalid("sampler counts must be >= 1"));
        }
        Ok(())
    }
}

/// Number of support samples per class when `n` are drawn; the support set
/// takes the extra sample on odd counts at a 50/50 split.
pub fn support_count(n: usize, support_fraction: f64) -> usize {
    ((n as f64 * support_fraction).ceil() as usize).clamp(1, n.max(1))
}

/// Draws exactly `n` trials per class without replacement and splits each
/// class into support and query.
pub fn sample_episode(
    task: &TaskDataset,
    n: usize,
    support_fraction: f64,
    seed: u64,
) -> Result<Episode> {
    if n == 0 {
        return Err(Error::invalid("episode needs at least one trial per class"));
    }
    if !(0.0..=1.0).contains(&support_fraction) {
        return Err(Error::invalid("support fraction must lie in [0, 1]"));
    }
    let by_class = task.indices_by_class();
    if let Some((c, idx)) = by_class.iter().enumerate().find(|(_, idx)| idx.len() < n) {
        return Err(Error::invalid(format!(
            "task {:?}: class {:?} has {} trials, fewer than {n}",
            task.name,
            task.classes[c],
            idx.len()
        )));
    }
    let n_support = support_count(n, support_fraction);
    let mut r = rng(seed);
    let mut support = Vec::new();
    let mut query = Vec::new();
    for (label, idx) in by_class.iter().enumerate() {
        let mut idx = idx.clone();
        idx.shuffle(&mut r);
        for (j, &i) in idx[..n].iter().enumerate() {
            let s = Sample {
                sequence: task.trials[i].sequence.clone(),
                label,
            };
            if j < n_support {
                support.push(s);
            } else {
                query.push(s);
            }
        }
    }
    Ok(Episode {
        task: task.name.clone(),
        classes: task.num_classes(),
        support,
        query,
    })
}

//! Synthetic task families for desk-scale verification.
//!
//! Each task draws its own class-conditional mean sequences: a shared smooth
//! temporal profile plus a class offset of norm `separation`, gently
//! modulated in time. The whole feature space of a task is then rotated by a
//! random orthogonal matrix, so tasks share structure but not coordinates.
//! Frames carry isotropic Gaussian noise.

use std::f64::consts::TAU;

use rand::Rng as _;
use rand_distr::{Distribution, Normal, StandardNormal};
use serde::{Deserialize, Serialize};

use super::types::{Metaset, Role, TaskDataset, Trial};
use crate::array::Array;
use crate::error::{Error, Result};
use crate::rng::{derive_seed, rng, Rng};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SynthConfig {
    pub tasks: usize,
    pub classes: usize,
    pub dims: usize,
    pub trials_per_class: usize,
    pub min_len: usize,
    pub max_len: usize,
    pub separation: f64,
    pub noise: f64,
    pub seed: u64,
}

impl Default for SynthConfig {
    fn default() -> Self {
        Self {
            tasks: 4,
            classes: 3,
            dims: 4,
            trials_per_class: 12,
            min_len: 20,
            max_len: 60,
            separation: 2.0,
            noise: 1.0,
            seed: 0,
        }
    }
}

fn gaussian(r: &mut Rng) -> f64 {
    <StandardNormal as Distribution<f64>>::sample(&StandardNormal, r)
}

/// Rows of a random orthogonal `n x n` matrix (Gram-Schmidt on Gaussians).
fn random_orthogonal(r: &mut Rng, n: usize) -> Vec<Vec<f64>> {
    let mut rows: Vec<Vec<f64>> = Vec::with_capacity(n);
    while rows.len() < n {
        let mut v: Vec<f64> = (0..n).map(|_| gaussian(r)).collect();
        for q in &rows {
            let d: f64 = v.iter().zip(q).map(|(a, b)| a * b).sum();
            v.iter_mut().zip(q).for_each(|(a, b)| *a -= d * b);
        }
        let norm = v.iter().map(|x| x * x).sum::<f64>().sqrt();
        if norm > 1e-8 {
            rows.push(v.into_iter().map(|x| x / norm).collect());
        }
    }
    rows
}

fn unit(r: &mut Rng, n: usize) -> Vec<f64> {
    loop {
        let v: Vec<f64> = (0..n).map(|_| gaussian(r)).collect();
        let norm = v.iter().map(|x| x * x).sum::<f64>().sqrt();
        if norm > 1e-8 {
            return v.into_iter().map(|x| x / norm).collect();
        }
    }
}

struct Wave {
    amp: f64,
    period: f64,
    phase: f64,
}

impl Wave {
    fn random(r: &mut Rng, amp: f64) -> Self {
        Self {
            amp,
            period: r.random_range(10.0..40.0),
            phase: r.random_range(0.0..TAU),
        }
    }

    fn at(&self, t: f64) -> f64 {
        self.amp * (TAU * t / self.period + self.phase).sin()
    }
}

pub fn synth_metaset(cfg: &SynthConfig) -> Result<Metaset> {
    if !cfg.separation.is_finite() || cfg.separation < 0.0 {
        return Err(Error::invalid("separation must be finite and >= 0"));
    }
    if cfg.tasks == 0 || cfg.classes < 2 || cfg.dims == 0 || cfg.trials_per_class == 0 {
        return Err(Error::invalid(
            "synthetic metaset needs >= 1 task, >= 2 classes, >= 1 dim and >= 1 trial per class",
        ));
    }
    if cfg.min_len == 0 || cfg.min_len > cfg.max_len {
        return Err(Error::invalid("length range must satisfy 1 <= min <= max"));
    }
    let noise =
        Normal::new(0.0, cfg.noise.max(0.0)).map_err(|e| Error::invalid(format!("noise: {e}")))?;
    let d = cfg.dims;
    let mut tasks = Vec::with_capacity(cfg.tasks);
    for ti in 0..cfg.tasks {
        let mut r = rng(derive_seed(cfg.seed, &[ti as u64]));
        let rotation = random_orthogonal(&mut r, d);
        let shared: Vec<Wave> = (0..d).map(|_| Wave::random(&mut r, 0.5)).collect();
        let directions: Vec<Vec<f64>> = if cfg.classes <= d {
            random_orthogonal(&mut r, d)
                .into_iter()
                .take(cfg.classes)
                .collect()
        } else {
            (0..cfg.classes).map(|_| unit(&mut r, d)).collect()
        };
        let modulation: Vec<Wave> = (0..cfg.classes)
            .map(|_| Wave::random(&mut r, 0.3))
            .collect();

        let mut trials = Vec::with_capacity(cfg.classes * cfg.trials_per_class);
        for c in 0..cfg.classes {
            for i in 0..cfg.trials_per_class {
                let t_len = r.random_range(cfg.min_len..=cfg.max_len);
                let mut data = Vec::with_capacity(t_len * d);
                let mut mean = vec![0.0; d];
                for t in 0..t_len {
                    let tf = t as f64;
                    let gain = cfg.separation * (1.0 + modulation[c].at(tf));
                    for j in 0..d {
                        mean[j] = shared[j].at(tf) + gain * directions[c][j];
                    }
                    for row in &rotation {
                        let v: f64 = row.iter().zip(&mean).map(|(a, b)| a * b).sum();
                        data.push(v + noise.sample(&mut r));
                    }
                }
                trials.push(Trial {
                    id: format!("task{ti}_c{c}_{i:03}"),
                    sequence: Array::new(vec![t_len, d], data)?,
                    label: c,
                    fps: 1.0,
                });
            }
        }
        tasks.push(TaskDataset {
            name: format!("task_{ti}"),
            classes: (0..cfg.classes).map(|c| format!("c{c}")).collect(),
            trials,
            role: Role::Source,
        });
    }
    Metaset::new(tasks)
}

use std::collections::BTreeSet;

use rand::Rng as _;
use serde::{Deserialize, Serialize};

use super::adapt::outer_step;
use super::evaluate::adapt_and_evaluate;
use super::learner::{InnerLoopConfig, LearnerKind, MetaModel};
use super::optim::{AdamConfig, AdamState};
use crate::episodes::{sample_episode, Episode, TaskDataset};
use crate::error::{Error, Result};
use crate::rng::{derive_seed, rng};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct OuterLoopConfig {
    pub outer_lr: f64,
    pub adam: AdamConfig,
    /// Learning-rate multiplier applied after `lr_patience` epochs without
    /// validation improvement.
    pub lr_factor: f64,
    pub lr_patience: usize,
    pub min_epochs: usize,
    pub early_stop_patience: usize,
    pub early_stop: bool,
    /// Hard cap on epochs; overrides `min_epochs` when smaller.
    pub max_epochs: Option<usize>,
    /// Episodes per outer update.
    pub meta_batch: usize,
}

impl Default for OuterLoopConfig {
    fn default() -> Self {
        Self {
            outer_lr: 0.01,
            adam: AdamConfig::default(),
            lr_factor: 0.6,
            lr_patience: 10,
            min_epochs: 40,
            early_stop_patience: 10,
            early_stop: true,
            max_epochs: None,
            meta_batch: 8,
        }
    }
}

impl OuterLoopConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.outer_lr > 0.0 && self.lr_factor > 0.0) {
            return Err(Error::invalid(
                "outer learning rate and factor must be positive",
            ));
        }
        if self.meta_batch == 0 {
            return Err(Error::invalid("meta-batch must hold at least one episode"));
        }
        if self.max_epochs == Some(0) {
            return Err(Error::invalid("max epochs must be at least 1"));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub kind: LearnerKind,
    pub inner: InnerLoopConfig,
    pub outer: OuterLoopConfig,
    /// Fraction of each class's episode draw that goes to the support set.
    pub support_fraction: f64,
    /// Seeded k = 1 draws averaged into the validation accuracy.
    pub validation_draws: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            kind: LearnerKind::ProtoMaml,
            inner: InnerLoopConfig::train(),
            outer: OuterLoopConfig::default(),
            support_fraction: 0.5,
            validation_draws: 5,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    pub lr: f64,
    pub train_loss: f64,
    pub val_accuracy: f64,
    pub improved: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainHistory {
    pub epochs: Vec<EpochRecord>,
    pub best_epoch: usize,
    pub best_val_accuracy: f64,
    /// Tasks that episodes were drawn from.
    pub trained_tasks: Vec<String>,
}

/// Outer updates per epoch: enough episodes to see the source trials
/// about once.
pub fn batches_per_epoch(sources: &[TaskDataset], meta_batch: usize) -> usize {
    let trials: usize = sources.iter().map(|t| t.trials.len()).sum();
    let episode: f64 = sources
        .iter()
        .map(|t| (t.min_class_size() * t.num_classes()) as f64)
        .sum::<f64>()
        / sources.len() as f64;
    ((trials as f64 / (episode * meta_batch as f64)).ceil() as usize).max(1)
}

/// Epoch-level bookkeeping of the learning-rate schedule and early stopping.
#[derive(Debug, Clone, PartialEq)]
pub struct Schedule {
    pub lr: f64,
    pub best: f64,
    pub since_best: usize,
    since_lr_change: usize,
}

impl Schedule {
    pub fn new(lr: f64) -> Self {
        Self {
            lr,
            best: f64::NEG_INFINITY,
            since_best: 0,
            since_lr_change: 0,
        }
    }

    /// Records an epoch's validation score; returns whether it improved.
    pub fn observe(&mut self, score: f64, cfg: &OuterLoopConfig) -> bool {
        let improved = score > self.best;
        if improved {
            self.best = score;
            self.since_best = 0;
            self.since_lr_change = 0;
        } else {
            self.since_best += 1;
            self.since_lr_change += 1;
            if self.since_lr_change >= cfg.lr_patience {
                self.lr *= cfg.lr_factor;
                self.since_lr_change = 0;
            }
        }
        improved
    }

    pub fn should_stop(&self, epochs_done: usize, cfg: &OuterLoopConfig) -> bool {
        if let Some(max) = cfg.max_epochs {
            if epochs_done >= max {
                return true;
            }
        }
        if !cfg.early_stop {
            return cfg.max_epochs.is_none() && epochs_done >= cfg.min_epochs;
        }
        epochs_done >= cfg.min_epochs && self.since_best >= cfg.early_stop_patience
    }
}

fn draw_batch(sources: &[TaskDataset], cfg: &TrainConfig, seed: u64) -> Result<Vec<Episode>> {
    (0..cfg.outer.meta_batch)
        .map(|e| {
            let s = derive_seed(seed, &[e as u64]);
            let task = &sources[rng(s).random_range(0..sources.len())];
            sample_episode(
                task,
                task.min_class_size(),
                cfg.support_fraction,
                derive_seed(s, &[1]),
            )
        })
        .collect()
}

/// Episodic meta-training on `sources`, selecting the parameters with the
/// best k = 1 accuracy on `validation`.
pub fn meta_train(
    sources: &[TaskDataset],
    validation: &TaskDataset,
    cfg: &TrainConfig,
    seed: u64,
) -> Result<(MetaModel, TrainHistory)> {
    cfg.outer.validate()?;
    cfg.inner.validate()?;
    if sources.is_empty() {
        return Err(Error::invalid(
            "meta-training needs at least one source task",
        ));
    }
    if sources.iter().any(|t| t.name == validation.name) {
        return Err(Error::invalid(format!(
            "validation task {:?} is also a source",
            validation.name
        )));
    }
    let d_in = validation.trials[0].width();
    for t in sources.iter().chain([validation]) {
        t.validate()?;
        if t.trials.iter().any(|tr| tr.width() != d_in) {
            return Err(Error::invalid(format!(
                "task {:?} has mixed feature widths",
                t.name
            )));
        }
    }
    for t in sources {
        if t.min_class_size() < 2 {
            return Err(Error::invalid(format!(
                "source task {:?} needs at least 2 trials per class for support and query",
                t.name
            )));
        }
    }
    let n_way = sources[0].num_classes();
    if cfg.kind == LearnerKind::FoMaml
        && sources
            .iter()
            .chain([validation])
            .any(|t| t.num_classes() != n_way)
    {
        return Err(Error::invalid(
            "fo-MAML needs the same number of classes in every task",
        ));
    }

    let mut model = MetaModel::init(cfg.kind, d_in, n_way, derive_seed(seed, &[0]))?;
    let mut adam = AdamState::new(&model.params);
    let mut schedule = Schedule::new(cfg.outer.outer_lr);
    let mut best_params = model.params.clone();
    let mut best_epoch = 0;
    let mut epochs = Vec::new();
    let mut trained = BTreeSet::new();
    let batches = batches_per_epoch(sources, cfg.outer.meta_batch);

    let mut epoch = 0;
    loop {
        let mut loss = 0.0;
        for b in 0..batches {
            let episodes = draw_batch(
                sources,
                cfg,
                derive_seed(seed, &[1, epoch as u64, b as u64]),
            )?;
            trained.extend(episodes.iter().map(|e| e.task.clone()));
            loss += outer_step(
                &mut model,
                &mut adam,
                &episodes,
                &cfg.inner,
                schedule.lr,
                &cfg.outer.adam,
            )?;
        }
        let draws = cfg.validation_draws.max(1);
        let mut val = 0.0;
        for j in 0..draws {
            val += adapt_and_evaluate(
                &model,
                validation,
                1,
                &cfg.inner,
                derive_seed(seed, &[2, j as u64]),
            )?
            .accuracy;
        }
        val /= draws as f64;
        let lr = schedule.lr;
        let improved = schedule.observe(val, &cfg.outer);
        if improved {
            best_params = model.params.clone();
            best_epoch = epoch;
        }
        log::debug!(
            "epoch {epoch}: loss {:.4} val {val:.4} lr {lr}",
            loss / batches as f64
        );
        epochs.push(EpochRecord {
            epoch,
            lr,
            train_loss: loss / batches as f64,
            val_accuracy: val,
            improved,
        });
        epoch += 1;
        if schedule.should_stop(epoch, &cfg.outer) {
            break;
        }
    }
    model.params = best_params;
    Ok((
        model,
        TrainHistory {
            epochs,
            best_epoch,
            best_val_accuracy: schedule.best,
            trained_tasks: trained.into_iter().collect(),
        },
    ))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn schedule_resets_on_improvement() {
        let cfg = OuterLoopConfig::default();
        let mut s = Schedule::new(0.01);
        assert!(s.observe(0.5, &cfg));
        for _ in 0..9 {
            assert!(!s.observe(0.5, &cfg));
        }
        assert_eq!(s.since_best, 9);
        assert!(s.observe(0.51, &cfg));
        assert_eq!(s.since_best, 0);
        assert_eq!(s.lr, 0.01);
    }

    #[test]
    fn lr_decays_after_patience() {
        let cfg = OuterLoopConfig::default();
        let mut s = Schedule::new(0.01);
        s.observe(0.5, &cfg);
        for _ in 0..10 {
            s.observe(0.4, &cfg);
        }
        assert!((s.lr - 0.006).abs() < 1e-15);
        for _ in 0..10 {
            s.observe(0.4, &cfg);
        }
        assert!((s.lr - 0.0036).abs() < 1e-15);
    }

    #[test]
    fn stopping_rules() {
        let cfg = OuterLoopConfig::default();
        let mut s = Schedule::new(0.01);
        s.observe(1.0, &cfg);
        for _ in 0..20 {
            s.observe(0.0, &cfg);
        }
        assert!(!s.should_stop(39, &cfg));
        assert!(s.should_stop(40, &cfg));
        let no_es = OuterLoopConfig {
            early_stop: false,
            ..cfg
        };
        assert!(!s.should_stop(39, &no_es));
        assert!(s.should_stop(40, &no_es));
        let capped = OuterLoopConfig {
            max_epochs: Some(15),
            ..cfg
        };
        assert!(!s.should_stop(14, &capped));
        assert!(s.should_stop(15, &capped));
    }
}

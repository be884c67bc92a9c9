use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use super::adapt::{inner_adapt, Adapted};
use super::learner::{embed_sequences, protonet_posterior, InnerLoopConfig, MetaModel};
use crate::array::Array;
use crate::diffcore::kernels;
use crate::episodes::{Sample, TaskDataset};
use crate::error::{Error, Result};
use crate::metrics::{micro_accuracy, roc_auc, PredictionRecord};
use crate::rng::{derive_seed, rng};

/// Outcome of adapting to a target task with `k` shots per class.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Evaluation {
    pub task: String,
    pub k: usize,
    pub support_ids: Vec<String>,
    pub query_ids: Vec<String>,
    /// Predictions with a finite posterior.
    pub records: Vec<PredictionRecord>,
    /// Queries whose posterior was not finite because the inner loop
    /// diverged. They count as errors and carry no trust record.
    #[serde(default)]
    pub nonfinite_ids: Vec<String>,
    /// Correct predictions over all queries, non-finite ones included.
    pub accuracy: f64,
    /// ROC AUC of the class-1 probability; binary tasks with every
    /// posterior finite only.
    pub auc: Option<f64>,
}

/// Support and query trial indices for a `k`-shot draw. Each class is
/// permuted once per seed and the support takes its first `k` entries, so
/// supports for growing `k` are nested. Queries keep dataset order.
pub fn shot_split(task: &TaskDataset, k: usize, seed: u64) -> Result<(Vec<usize>, Vec<usize>)> {
    if k == 0 {
        return Err(Error::invalid("k must be at least 1"));
    }
    let by_class = task.indices_by_class();
    for (c, idx) in by_class.iter().enumerate() {
        if idx.len() <= k {
            return Err(Error::invalid(format!(
                "task {:?}: class {:?} has {} trials; k = {k} needs at least {}",
                task.name,
                task.classes[c],
                idx.len(),
                k + 1
            )));
        }
    }
    let mut support = Vec::new();
    let mut query = Vec::new();
    for (c, idx) in by_class.iter().enumerate() {
        let mut perm = idx.clone();
        perm.shuffle(&mut rng(derive_seed(seed, &[c as u64])));
        support.extend_from_slice(&perm[..k]);
        query.extend_from_slice(&perm[k..]);
    }
    query.sort_unstable();
    Ok((support, query))
}

/// Class posteriors of the adapted model, `B x C`.
pub fn predict(model: &MetaModel, adapted: &Adapted, sequences: &[&Array]) -> Result<Array> {
    let e = embed_sequences(model.backbone(), &adapted.params, sequences)?;
    match (adapted.head, &adapted.prototypes) {
        (Some((hw, hb)), _) => {
            let logits = kernels::dense(
                &e,
                &adapted.params.get(hw).value,
                &adapted.params.get(hb).value,
            )?;
            kernels::softmax(&logits)
        }
        (None, Some(p)) => protonet_posterior(&e, p),
        (None, None) => Err(Error::invalid("adapted model has no classifier")),
    }
}

/// Adapts on `k` seeded shots per class and scores every remaining trial.
pub fn adapt_and_evaluate(
    model: &MetaModel,
    task: &TaskDataset,
    k: usize,
    inner: &InnerLoopConfig,
    seed: u64,
) -> Result<Evaluation> {
    model.check_classes(task.num_classes())?;
    let (s_idx, q_idx) = shot_split(task, k, seed)?;
    let support: Vec<Sample> = s_idx
        .iter()
        .map(|&i| Sample {
            sequence: task.trials[i].sequence.clone(),
            label: task.trials[i].label,
        })
        .collect();
    let adapted = inner_adapt(model, &support, task.num_classes(), inner, false)?;
    let seqs: Vec<&Array> = q_idx.iter().map(|&i| &task.trials[i].sequence).collect();
    let post = predict(model, &adapted, &seqs)?;
    let mut records = Vec::with_capacity(q_idx.len());
    let mut nonfinite_ids = Vec::new();
    for (p, &i) in post.rows().zip(&q_idx) {
        if p.iter().all(|x| x.is_finite()) {
            records.push(PredictionRecord::from_softmax(
                p.to_vec(),
                task.trials[i].label,
            ));
        } else {
            nonfinite_ids.push(task.trials[i].id.clone());
        }
    }
    let accuracy = if nonfinite_ids.is_empty() {
        micro_accuracy(&records)?
    } else {
        log::warn!(
            "task {:?} k={k}: {} of {} query posteriors are not finite",
            task.name,
            nonfinite_ids.len(),
            q_idx.len()
        );
        records.iter().filter(|r| r.correct()).count() as f64 / q_idx.len() as f64
    };
    let auc = if task.num_classes() == 2 && nonfinite_ids.is_empty() {
        let scores: Vec<f64> = records.iter().map(|r| r.softmax[1]).collect();
        let pos: Vec<bool> = records.iter().map(|r| r.actual == 1).collect();
        Some(roc_auc(&scores, &pos)?)
    } else {
        None
    };
    Ok(Evaluation {
        task: task.name.clone(),
        k,
        support_ids: s_idx.iter().map(|&i| task.trials[i].id.clone()).collect(),
        query_ids: q_idx.iter().map(|&i| task.trials[i].id.clone()).collect(),
        records,
        nonfinite_ids,
        accuracy,
        auc,
    })
}

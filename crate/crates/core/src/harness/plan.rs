use serde::{Deserialize, Serialize};

use crate::episodes::{minmax_normalize, pool_to_ssf, subsample_fps, Metaset, Role, TaskDataset};
use crate::error::{Error, Result};

/// One round of the round-robin protocol.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct RoundPlan {
    pub validation: String,
    pub sources: Vec<String>,
    /// Held-out cohort evaluated in every round.
    pub test: Option<String>,
}

impl RoundPlan {
    pub fn validate(&self) -> Result<()> {
        if self.sources.is_empty() {
            return Err(Error::invalid("round has no source tasks"));
        }
        if self.sources.contains(&self.validation) {
            return Err(Error::invalid(format!(
                "validation task {:?} is a source",
                self.validation
            )));
        }
        if let Some(t) = &self.test {
            if self.sources.contains(t) || *t == self.validation {
                return Err(Error::invalid(format!(
                    "test task {t:?} overlaps the round"
                )));
            }
        }
        Ok(())
    }
}

/// The designated test task: `explicit` if given, else the single task with
/// role `test`.
pub fn test_task_name(metaset: &Metaset, explicit: Option<&str>) -> Result<Option<String>> {
    if let Some(name) = explicit {
        return match metaset.task(name) {
            Some(_) => Ok(Some(name.to_string())),
            None => Err(Error::invalid(format!(
                "test task {name:?} not in the metaset"
            ))),
        };
    }
    let tagged: Vec<&TaskDataset> = metaset
        .tasks
        .iter()
        .filter(|t| t.role == Role::Test)
        .collect();
    match tagged.as_slice() {
        [] => Ok(None),
        [t] => Ok(Some(t.name.clone())),
        _ => Err(Error::invalid("more than one task has role \"test\"")),
    }
}

/// One round per non-test task, in metaset order: that task validates and
/// all other non-test tasks are sources.
pub fn plan_round_robin(metaset: &Metaset, test: Option<&str>) -> Result<Vec<RoundPlan>> {
    let test = test_task_name(metaset, test)?;
    let pool: Vec<&str> = metaset
        .tasks
        .iter()
        .map(|t| t.name.as_str())
        .filter(|n| Some(*n) != test.as_deref())
        .collect();
    if pool.len() < 2 {
        return Err(Error::invalid(format!(
            "round-robin needs at least 2 non-test tasks, found {}",
            pool.len()
        )));
    }
    let plans: Vec<RoundPlan> = pool
        .iter()
        .map(|&v| RoundPlan {
            validation: v.to_string(),
            sources: pool
                .iter()
                .filter(|&&s| s != v)
                .map(|s| s.to_string())
                .collect(),
            test: test.clone(),
        })
        .collect();
    for p in &plans {
        p.validate()?;
    }
    Ok(plans)
}

/// Subsamples to `target_fps` and, when `ssf` is given and differs from
/// the feature width, channel-pools to `ssf` dimensions.
pub fn prepare_task(
    task: &TaskDataset,
    target_fps: f64,
    ssf: Option<usize>,
) -> Result<TaskDataset> {
    let trials = task
        .trials
        .iter()
        .map(|t| {
            let t = subsample_fps(t, target_fps)?;
            match ssf {
                Some(d) if d != t.width() => pool_to_ssf(&t, d),
                _ => Ok(t),
            }
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(TaskDataset {
        trials,
        ..task.clone()
    })
}

/// Normalizes a group of tasks as one split, with statistics pooled over
/// all of their trials.
pub fn normalize_split(tasks: &[&TaskDataset]) -> Result<Vec<TaskDataset>> {
    let all: Vec<_> = tasks
        .iter()
        .flat_map(|t| t.trials.iter().cloned())
        .collect();
    let mut normed = minmax_normalize(&all)?.into_iter();
    Ok(tasks
        .iter()
        .map(|t| TaskDataset {
            trials: normed.by_ref().take(t.trials.len()).collect(),
            ..(*t).clone()
        })
        .collect())
}

/// Normalized data of one round: sources form one split, the validation
/// and test tasks one split each.
#[derive(Debug, Clone)]
pub struct RoundData {
    pub sources: Vec<TaskDataset>,
    pub validation: TaskDataset,
    pub test: Option<TaskDataset>,
}

pub fn round_data(metaset: &Metaset, plan: &RoundPlan) -> Result<RoundData> {
    let get = |n: &str| {
        metaset
            .task(n)
            .ok_or_else(|| Error::invalid(format!("task {n:?} not in the metaset")))
    };
    let sources: Vec<&TaskDataset> = plan.sources.iter().map(|n| get(n)).collect::<Result<_>>()?;
    Ok(RoundData {
        sources: normalize_split(&sources)?,
        validation: normalize_split(&[get(&plan.validation)?])?.remove(0),
        test: match &plan.test {
            Some(t) => Some(normalize_split(&[get(t)?])?.remove(0)),
            None => None,
        },
    })
}

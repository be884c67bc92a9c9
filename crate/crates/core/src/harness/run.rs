use std::collections::BTreeMap;
use std::path::PathBuf;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::plan::{plan_round_robin, prepare_task, round_data, RoundData, RoundPlan};
use crate::episodes::{Metaset, TaskDataset};
use crate::error::{Error, Result};
use crate::metalearn::{
    adapt_and_evaluate, meta_train, save_checkpoint, Evaluation, InnerLoopConfig, MetaModel,
    TrainConfig, TrainHistory,
};
use crate::metrics::{trust_report, TrustConfig};
use crate::rng::derive_seed;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct HarnessConfig {
    pub train: TrainConfig,
    /// Inner loop used when adapting to validation and test tasks.
    pub eval_inner: InnerLoopConfig,
    pub trust: TrustConfig,
    pub reps: usize,
    /// Shots evaluated on each validation task; 1 is always included.
    pub ks: Vec<usize>,
    /// Shots used on the test task.
    pub test_k: usize,
    pub seed: u64,
    /// Feature widths to sweep; empty means the data's own width.
    pub ssf: Vec<usize>,
    pub target_fps: f64,
    pub test_task: Option<String>,
    /// Retrain the meta-learner for every repetition, or train once per
    /// round and vary only the evaluation draws.
    pub retrain_per_rep: bool,
    #[serde(skip)]
    pub checkpoint_dir: Option<PathBuf>,
}

impl Default for HarnessConfig {
    fn default() -> Self {
        Self {
            train: TrainConfig::default(),
            eval_inner: InnerLoopConfig::test(),
            trust: TrustConfig::default(),
            reps: 100,
            ks: vec![1],
            test_k: 1,
            seed: 0,
            ssf: Vec::new(),
            target_fps: 1.0,
            test_task: None,
            retrain_per_rep: true,
            checkpoint_dir: None,
        }
    }
}

impl HarnessConfig {
    /// Sorted, de-duplicated shot list including 1.
    pub fn k_list(&self) -> Vec<usize> {
        let mut ks: Vec<usize> = self
            .ks
            .iter()
            .copied()
            .chain([1])
            .filter(|&k| k > 0)
            .collect();
        ks.sort_unstable();
        ks.dedup();
        ks
    }

    pub fn validate(&self) -> Result<()> {
        if self.reps == 0 {
            return Err(Error::invalid("--reps must be at least 1"));
        }
        if self.ks.contains(&0) || self.test_k == 0 {
            return Err(Error::invalid("k must be at least 1"));
        }
        self.train.outer.validate()?;
        self.train.inner.validate()?;
        self.eval_inner.validate()?;
        self.trust.validate()
    }
}

/// Everything one repetition of one round produced.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunResult {
    pub round: usize,
    pub ssf: usize,
    pub validation_task: String,
    pub rep: usize,
    pub seed: u64,
    /// Per-k validation outcome; `None` when the task is too small for k.
    pub validation: BTreeMap<usize, Option<Evaluation>>,
    pub test: Option<Evaluation>,
    /// Per-condition NTS of the k = 1 validation predictions.
    pub nts: BTreeMap<String, Option<f64>>,
    pub trained_tasks: Vec<String>,
    pub epochs_run: usize,
    pub best_epoch: usize,
}

fn evaluate_k(
    model: &MetaModel,
    task: &TaskDataset,
    k: usize,
    cfg: &HarnessConfig,
    seed: u64,
) -> Result<Option<Evaluation>> {
    if task.min_class_size() <= k {
        log::warn!(
            "task {:?}: k = {k} needs more than {} trials per class; N/A",
            task.name,
            task.min_class_size()
        );
        return Ok(None);
    }
    adapt_and_evaluate(model, task, k, &cfg.eval_inner, seed).map(Some)
}

fn evaluate_rep(
    model: &MetaModel,
    history: &TrainHistory,
    data: &RoundData,
    cfg: &HarnessConfig,
    ids: (usize, usize, usize, u64),
) -> Result<RunResult> {
    let (round, ssf, rep, seed) = ids;
    // only source tasks may reach meta-training
    for t in &history.trained_tasks {
        if *t == data.validation.name || Some(t) == data.test.as_ref().map(|x| &x.name) {
            return Err(Error::invalid(format!(
                "held-out task {t:?} was used for meta-training"
            )));
        }
    }
    let mut validation = BTreeMap::new();
    for k in cfg.k_list() {
        validation.insert(
            k,
            evaluate_k(model, &data.validation, k, cfg, derive_seed(seed, &[3]))?,
        );
    }
    let test = match &data.test {
        Some(t) => evaluate_k(model, t, cfg.test_k, cfg, derive_seed(seed, &[4]))?,
        None => None,
    };
    let nts = match &validation[&1] {
        Some(e) => trust_report(&e.records, &data.validation.classes, &cfg.trust)?
            .conditions
            .into_iter()
            .map(|(c, t)| (c, t.nts))
            .collect(),
        None => BTreeMap::new(),
    };
    Ok(RunResult {
        round,
        ssf,
        validation_task: data.validation.name.clone(),
        rep,
        seed,
        validation,
        test,
        nts,
        trained_tasks: history.trained_tasks.clone(),
        epochs_run: history.epochs.len(),
        best_epoch: history.best_epoch,
    })
}

fn train(
    data: &RoundData,
    cfg: &HarnessConfig,
    seed: u64,
    tag: &str,
) -> Result<(MetaModel, TrainHistory)> {
    let (model, history) = meta_train(&data.sources, &data.validation, &cfg.train, seed)?;
    if let Some(dir) = &cfg.checkpoint_dir {
        save_checkpoint(dir.join(format!("{tag}.mskl")), &model)?;
    }
    Ok((model, history))
}

/// A round's prepared data and identity inside the sweep.
pub struct RoundJob<'a> {
    pub round: usize,
    pub ssf: usize,
    pub plan: &'a RoundPlan,
    pub data: RoundData,
}

fn rep_seed(cfg: &HarnessConfig, job: &RoundJob, rep: u64) -> u64 {
    derive_seed(cfg.seed, &[job.ssf as u64, job.round as u64, rep])
}

/// File-name stem of a round: `ssf<D>_r<i>_<validation task>`.
pub fn round_tag(ssf: usize, round: usize, validation: &str) -> String {
    format!(
        "ssf{ssf}_r{round}_{}",
        crate::metrics::trust::sanitize(validation)
    )
}

fn tag(job: &RoundJob, rep: Option<usize>) -> String {
    let base = round_tag(job.ssf, job.round, &job.plan.validation);
    match rep {
        Some(r) => format!("{base}_rep{r}"),
        None => base,
    }
}

/// Runs every repetition of the given rounds on the current rayon pool.
/// Results are ordered by round, then repetition.
pub fn run_rounds(jobs: &[RoundJob], cfg: &HarnessConfig) -> Result<Vec<RunResult>> {
    let pairs: Vec<(usize, usize)> = (0..jobs.len())
        .flat_map(|j| (0..cfg.reps).map(move |r| (j, r)))
        .collect();
    if cfg.retrain_per_rep {
        return pairs
            .par_iter()
            .map(|&(j, rep)| {
                let job = &jobs[j];
                let seed = rep_seed(cfg, job, rep as u64);
                let (model, history) = train(
                    &job.data,
                    cfg,
                    derive_seed(seed, &[0]),
                    &tag(job, Some(rep)),
                )?;
                evaluate_rep(
                    &model,
                    &history,
                    &job.data,
                    cfg,
                    (job.round, job.ssf, rep, seed),
                )
            })
            .collect();
    }
    let trained: Vec<(MetaModel, TrainHistory)> = jobs
        .par_iter()
        .map(|job| {
            train(
                &job.data,
                cfg,
                rep_seed(cfg, job, u64::MAX),
                &tag(job, None),
            )
        })
        .collect::<Result<_>>()?;
    pairs
        .par_iter()
        .map(|&(j, rep)| {
            let job = &jobs[j];
            let (model, history) = &trained[j];
            let seed = rep_seed(cfg, job, rep as u64);
            evaluate_rep(
                model,
                history,
                &job.data,
                cfg,
                (job.round, job.ssf, rep, seed),
            )
        })
        .collect()
}

/// Runs all repetitions of a single round.
pub fn run_round(
    metaset: &Metaset,
    plan: &RoundPlan,
    round: usize,
    ssf: usize,
    cfg: &HarnessConfig,
) -> Result<Vec<RunResult>> {
    let job = RoundJob {
        round,
        ssf,
        plan,
        data: round_data(metaset, plan)?,
    };
    run_rounds(std::slice::from_ref(&job), cfg)
}

/// Preprocessed metaset for one SSF width.
pub fn prepare_metaset(metaset: &Metaset, target_fps: f64, ssf: Option<usize>) -> Result<Metaset> {
    Metaset::new(
        metaset
            .tasks
            .iter()
            .map(|t| prepare_task(t, target_fps, ssf))
            .collect::<Result<_>>()?,
    )
}

/// Rounds and runs of the full protocol over every SSF width.
pub struct ProtocolRuns {
    pub plans: Vec<RoundPlan>,
    /// `(ssf, round index)` of each entry in `rounds`.
    pub rounds: Vec<(usize, usize)>,
    pub runs: Vec<RunResult>,
    pub class_names: BTreeMap<String, Vec<String>>,
}

/// The full round-robin protocol, parallel over `workers` threads.
pub fn run_protocol(
    metaset: &Metaset,
    cfg: &HarnessConfig,
    workers: usize,
) -> Result<ProtocolRuns> {
    cfg.validate()?;
    metaset.validate()?;
    let plans = plan_round_robin(metaset, cfg.test_task.as_deref())?;
    let widths: Vec<Option<usize>> = if cfg.ssf.is_empty() {
        vec![None]
    } else {
        cfg.ssf.iter().map(|&d| Some(d)).collect()
    };
    let mut prepared = Vec::new();
    for w in &widths {
        let ms = prepare_metaset(metaset, cfg.target_fps, *w)?;
        let d = ms.tasks[0].trials[0].width();
        prepared.push((d, ms));
    }
    let mut jobs = Vec::new();
    for (d, ms) in &prepared {
        for (r, plan) in plans.iter().enumerate() {
            jobs.push(RoundJob {
                round: r,
                ssf: *d,
                plan,
                data: round_data(ms, plan)?,
            });
        }
    }
    if let Some(dir) = &cfg.checkpoint_dir {
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(workers.max(1))
        .build()
        .map_err(|e| Error::invalid(format!("thread pool: {e}")))?;
    let runs = pool.install(|| run_rounds(&jobs, cfg))?;
    Ok(ProtocolRuns {
        rounds: jobs.iter().map(|j| (j.ssf, j.round)).collect(),
        plans,
        runs,
        class_names: metaset
            .tasks
            .iter()
            .map(|t| (t.name.clone(), t.classes.clone()))
            .collect(),
    })
}

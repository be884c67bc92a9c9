//! `mskl`: meta-learned skill assessment from feature sequences.

use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use mskl_core::episodes::{load_metaset, synth_metaset, write_metaset, SynthConfig};
use mskl_core::harness::{build_report, emit_report, prepare_task, run_protocol, HarnessConfig};
use mskl_core::metalearn::{adapt_and_evaluate, load_checkpoint, InnerLoopConfig, LearnerKind};
use mskl_core::metrics::{trust_report, write_spectrum_csv, PredictionRecord, TrustConfig};
use mskl_core::seqnet::gradient_suite;
use mskl_core::{Error, Result};
use serde_json::{json, Value};

#[derive(Parser, Debug)]
#[command(
    name = "mskl",
    version,
    about = "Few-shot skill assessment with meta-learned sequence encoders"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Full round-robin evaluation of a metaset.
    Run(RunArgs),
    /// Adapt a saved checkpoint to one task and score it.
    Adapt(AdaptArgs),
    /// Trust scores and spectra from a prediction log.
    Trust(TrustArgs),
    /// Write a synthetic metaset.
    Synth(SynthArgs),
    /// Finite-difference check of every differentiable op and the full model.
    Gradcheck(GradcheckArgs),
}

#[derive(Args, Debug)]
struct RunArgs {
    /// Metaset manifest (JSON).
    #[arg(long)]
    manifest: PathBuf,
    /// Feature widths to sweep, comma separated; default is the data width.
    #[arg(long, value_delimiter = ',')]
    ssf: Vec<usize>,
    /// Shots per class on the validation task, comma separated (1 is always run).
    #[arg(long, value_delimiter = ',')]
    k: Vec<usize>,
    #[arg(long, default_value_t = 100)]
    reps: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Output directory.
    #[arg(long)]
    out: PathBuf,
    #[arg(long, default_value = "protomaml")]
    learner: LearnerKind,
    /// Cap on meta-training epochs. Below 40 this cuts the standard schedule short.
    #[arg(long)]
    max_epochs: Option<usize>,
    /// Task evaluated in every round instead of taking part in the rotation.
    #[arg(long)]
    test_task: Option<String>,
    /// Shots per class on the test task.
    #[arg(long, default_value_t = 1)]
    test_k: usize,
    /// Retrain per repetition (true) or once per round (false).
    #[arg(long, default_value_t = true, action = clap::ArgAction::Set)]
    retrain_per_rep: bool,
    /// Save every trained model under <out>/checkpoints.
    #[arg(long)]
    save_checkpoints: bool,
    #[arg(long, default_value_t = 1.0)]
    target_fps: f64,
}

#[derive(Args, Debug)]
struct AdaptArgs {
    #[arg(long)]
    checkpoint: PathBuf,
    #[arg(long)]
    manifest: PathBuf,
    /// Target task name.
    #[arg(long)]
    task: String,
    #[arg(long, default_value_t = 1)]
    k: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Inner SGD steps.
    #[arg(long, default_value_t = 20)]
    steps: usize,
    #[arg(long, default_value_t = 0.1)]
    inner_lr: f64,
    #[arg(long, default_value_t = 1.0)]
    target_fps: f64,
    /// Prediction log to write (JSON).
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args, Debug)]
struct TrustArgs {
    /// Prediction log: a JSON array of records or an object with `records`
    /// and optional `classes`.
    #[arg(long)]
    predictions: PathBuf,
    #[arg(long)]
    out: PathBuf,
    #[arg(long, default_value_t = 1.0)]
    alpha: f64,
    #[arg(long, default_value_t = 1.0)]
    beta: f64,
    #[arg(long, default_value_t = 0.5)]
    gamma: f64,
}

#[derive(Args, Debug)]
struct SynthArgs {
    #[arg(long, default_value_t = 4)]
    tasks: usize,
    #[arg(long, default_value_t = 3)]
    classes: usize,
    #[arg(long, default_value_t = 4)]
    dims: usize,
    #[arg(long, default_value_t = 2.0)]
    sep: f64,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Trials per class.
    #[arg(long, default_value_t = 12)]
    trials: usize,
    #[arg(long, default_value_t = 20)]
    min_len: usize,
    #[arg(long, default_value_t = 60)]
    max_len: usize,
    #[arg(long, default_value_t = 1.0)]
    noise: f64,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args, Debug)]
struct GradcheckArgs {
    /// Random configurations per op group and for the full model.
    #[arg(long, default_value_t = 50)]
    configs: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
}

fn workers() -> Result<usize> {
    match std::env::var("MSKL_WORKERS") {
        Ok(v) => v
            .trim()
            .parse::<usize>()
            .ok()
            .filter(|&n| n > 0)
            .ok_or_else(|| {
                Error::Invalid(format!(
                    "MSKL_WORKERS must be a positive integer, got {v:?}"
                ))
            }),
        Err(_) => Ok(std::thread::available_parallelism().map_or(1, |n| n.get())),
    }
}

fn write_file(path: &Path, contents: String) -> Result<()> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir).map_err(|e| Error::Io {
            path: dir.to_path_buf(),
            source: e,
        })?;
    }
    fs::write(path, contents).map_err(|e| Error::Io {
        path: path.to_path_buf(),
        source: e,
    })
}

fn run(a: RunArgs) -> Result<()> {
    let metaset = load_metaset(&a.manifest)?;
    let mut cfg = HarnessConfig {
        reps: a.reps,
        ks: a.k,
        test_k: a.test_k,
        seed: a.seed,
        ssf: a.ssf,
        target_fps: a.target_fps,
        test_task: a.test_task,
        retrain_per_rep: a.retrain_per_rep,
        checkpoint_dir: a.save_checkpoints.then(|| a.out.join("checkpoints")),
        ..Default::default()
    };
    cfg.train.kind = a.learner;
    cfg.train.outer.max_epochs = a.max_epochs;
    if let Some(m) = a.max_epochs.filter(|&m| m < cfg.train.outer.min_epochs) {
        log::warn!(
            "--max-epochs {m} is below the {} epoch minimum",
            cfg.train.outer.min_epochs
        );
    }
    let runs = run_protocol(&metaset, &cfg, workers()?)?;
    let out = build_report(&runs, &cfg)?;
    emit_report(&out, &a.out)?;
    for line in out.log.iter().filter(|l| l.starts_with("overall")) {
        println!("{line}");
    }
    println!("report written to {}", a.out.join("report.json").display());
    Ok(())
}

fn adapt(a: AdaptArgs) -> Result<()> {
    let model = load_checkpoint(&a.checkpoint)?;
    let metaset = load_metaset(&a.manifest)?;
    let task = metaset
        .task(&a.task)
        .ok_or_else(|| Error::Invalid(format!("task {:?} not in the manifest", a.task)))?;
    let task = prepare_task(task, a.target_fps, Some(model.config.d_in))?;
    let task = mskl_core::harness::normalize_split(&[&task])?.remove(0);
    let inner = InnerLoopConfig {
        inner_lr: a.inner_lr,
        n_updates: a.steps,
    };
    let eval = adapt_and_evaluate(&model, &task, a.k, &inner, a.seed)?;
    println!("{}: k={} accuracy {:.4}", task.name, a.k, eval.accuracy);
    if let Some(auc) = eval.auc {
        println!("auc {auc:.4}");
    }
    let mut doc = serde_json::to_value(&eval)?;
    doc["classes"] = json!(task.classes);
    write_file(&a.out, serde_json::to_string_pretty(&doc)? + "\n")
}

fn read_prediction_log(path: &Path) -> Result<(Vec<PredictionRecord>, Option<Vec<String>>)> {
    let text = fs::read_to_string(path).map_err(|e| Error::Io {
        path: path.to_path_buf(),
        source: e,
    })?;
    let doc: Value = serde_json::from_str(&text).map_err(|e| Error::Parse {
        path: path.to_path_buf(),
        line: e.line(),
        detail: e.to_string(),
    })?;
    let (records, classes) = match doc {
        Value::Array(_) => (doc, None),
        Value::Object(mut m) => (
            m.remove("records")
                .ok_or_else(|| Error::Invalid("prediction log has no \"records\"".into()))?,
            m.remove("classes"),
        ),
        _ => {
            return Err(Error::Invalid(
                "prediction log must be an array or an object".into(),
            ))
        }
    };
    let records: Vec<PredictionRecord> = serde_json::from_value(records)
        .map_err(|e| Error::Invalid(format!("bad prediction record: {e}")))?;
    let classes = classes
        .map(serde_json::from_value)
        .transpose()
        .map_err(|e| Error::Invalid(format!("bad class list: {e}")))?;
    Ok((records, classes))
}

fn trust(a: TrustArgs) -> Result<()> {
    let cfg = TrustConfig {
        alpha: a.alpha,
        beta: a.beta,
        gamma: a.gamma,
    };
    let (records, classes) = read_prediction_log(&a.predictions)?;
    for (i, r) in records.iter().enumerate() {
        r.validate()
            .map_err(|e| Error::Invalid(format!("record {i}: {e}")))?;
    }
    let width = records.first().map_or(0, |r| r.softmax.len());
    let classes = classes.unwrap_or_else(|| (0..width).map(|c| c.to_string()).collect());
    if records.iter().any(|r| r.softmax.len() != classes.len()) {
        return Err(Error::Invalid(
            "records and class list disagree on the class count".into(),
        ));
    }
    let report = trust_report(&records, &classes, &cfg)?;
    let spectra = a.out.join("spectra");
    fs::create_dir_all(&spectra).map_err(|e| Error::Io {
        path: spectra.clone(),
        source: e,
    })?;
    let mut summary = serde_json::Map::new();
    for (cond, t) in &report.conditions {
        println!(
            "{cond}: {}",
            t.nts.map_or("N/A".into(), |v| format!("{v:.4}"))
        );
        let mut entry = json!({ "nts": t.nts, "n": t.values.len() });
        if let Some(k) = t.nts_kde {
            entry["nts_kde"] = json!(k);
        }
        summary.insert(cond.clone(), entry);
        if let Some(d) = &t.density {
            write_spectrum_csv(spectra.join(format!("trust_{cond}.csv")), d)?;
        }
    }
    let doc = json!({ "config": cfg, "conditions": summary });
    write_file(
        &a.out.join("trust.json"),
        serde_json::to_string_pretty(&doc)? + "\n",
    )
}

fn synth(a: SynthArgs) -> Result<()> {
    let cfg = SynthConfig {
        tasks: a.tasks,
        classes: a.classes,
        dims: a.dims,
        trials_per_class: a.trials,
        min_len: a.min_len,
        max_len: a.max_len,
        separation: a.sep,
        noise: a.noise,
        seed: a.seed,
    };
    let metaset = synth_metaset(&cfg)?;
    let manifest = write_metaset(&metaset, &a.out)?;
    println!("{}", manifest.display());
    Ok(())
}

fn gradcheck(a: GradcheckArgs) -> Result<()> {
    let suite = gradient_suite(a.configs, a.seed)?;
    for (name, r) in &suite.entries {
        println!(
            "{name:<24} {:>8} coords  max rel err {:.3e}  {}",
            r.coords_checked,
            r.max_rel_err,
            if r.passed() { "ok" } else { "FAIL" }
        );
    }
    if suite.passed() {
        Ok(())
    } else {
        Err(Error::Failed(format!(
            "gradient check failed: max relative error {:.3e}",
            suite.max_rel_err()
        )))
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() {
                ExitCode::from(1)
            } else {
                ExitCode::SUCCESS
            };
        }
    };
    let result = match cli.command {
        Command::Run(a) => run(a),
        Command::Adapt(a) => adapt(a),
        Command::Trust(a) => trust(a),
        Command::Synth(a) => synth(a),
        Command::Gradcheck(a) => gradcheck(a),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(if e.is_validation() { 1 } else { 2 })
        }
    }
}

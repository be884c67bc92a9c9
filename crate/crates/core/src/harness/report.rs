use std::collections::{BTreeMap, BTreeSet};
use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::aggregate::{aggregate, mean_std, RunValue, Summary};
use super::run::{round_tag, HarnessConfig, ProtocolRuns, RunResult};
use crate::error::{Error, Result};
use crate::metalearn::Evaluation;
use crate::metrics::{trust_report, write_spectrum_csv, PredictionRecord, TrustDensity};

pub const REPORT_SCHEMA: &str = "report_v1";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RoundReport {
    pub round: usize,
    pub ssf: usize,
    pub validation_task: String,
    pub sources: Vec<String>,
    pub test_task: Option<String>,
    /// `None` marks a k the validation task is too small for.
    pub per_k: BTreeMap<usize, Option<Summary>>,
    pub test: Option<Summary>,
    /// Per-condition NTS over the k = 1 validation predictions of the kept
    /// runs; `None` for empty conditions.
    pub nts: BTreeMap<String, Option<f64>>,
    /// Density-smoothed NTS, for conditions where it differs by > 1e-3.
    pub nts_kde: BTreeMap<String, f64>,
    pub test_nts: BTreeMap<String, Option<f64>>,
    pub test_nts_kde: BTreeMap<String, f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct OverallReport {
    /// Unweighted mean of the per-round means.
    pub per_k: BTreeMap<usize, Option<f64>>,
    pub test_mean: Option<f64>,
    pub test_best: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Report {
    pub schema: String,
    pub config: HarnessConfig,
    pub rounds: Vec<RoundReport>,
    /// Keyed by SSF width.
    pub overall: BTreeMap<usize, OverallReport>,
}

/// A trust spectrum destined for `spectra/<name>.csv`.
#[derive(Debug, Clone, PartialEq)]
pub struct Spectrum {
    pub name: String,
    pub density: TrustDensity,
}

pub struct HarnessOutput {
    pub report: Report,
    pub runs: Vec<RunResult>,
    pub spectra: Vec<Spectrum>,
    pub log: Vec<String>,
}

fn run_value(r: &RunResult, e: &Evaluation) -> RunValue {
    RunValue {
        seed: r.seed,
        accuracy: e.accuracy,
        auc: e.auc,
    }
}

type Trust = (
    BTreeMap<String, Option<f64>>,
    BTreeMap<String, f64>,
    Vec<(String, TrustDensity)>,
);

fn pooled_trust(
    records: Vec<PredictionRecord>,
    classes: &[String],
    cfg: &HarnessConfig,
) -> Result<Trust> {
    let mut nts = BTreeMap::new();
    let mut kde = BTreeMap::new();
    let mut dens = Vec::new();
    if records.is_empty() {
        return Ok((nts, kde, dens));
    }
    for (cond, t) in trust_report(&records, classes, &cfg.trust)?.conditions {
        nts.insert(cond.clone(), t.nts);
        if let Some(k) = t.nts_kde {
            kde.insert(cond.clone(), k);
        }
        if let Some(d) = t.density {
            dens.push((cond, d));
        }
    }
    Ok((nts, kde, dens))
}

fn fmt_opt(v: Option<f64>) -> String {
    v.map_or("N/A".into(), |x| format!("{x:.4}"))
}

/// Aggregates the runs into the report, spectra and log lines.
pub fn build_report(p: &ProtocolRuns, cfg: &HarnessConfig) -> Result<HarnessOutput> {
    let ks = cfg.k_list();
    let mut rounds = Vec::new();
    let mut spectra = Vec::new();
    let mut log = Vec::new();
    for &(ssf, r) in &p.rounds {
        let plan = &p.plans[r];
        let runs: Vec<&RunResult> = p
            .runs
            .iter()
            .filter(|x| x.ssf == ssf && x.round == r)
            .collect();
        let tag = round_tag(ssf, r, &plan.validation);
        log.push(format!(
            "round {tag}: validation {}, sources [{}], test {}",
            plan.validation,
            plan.sources.join(", "),
            plan.test.as_deref().unwrap_or("none")
        ));
        for run in &runs {
            let mut line = format!("  rep {} seed {}:", run.rep, run.seed);
            for (k, e) in &run.validation {
                write!(line, " k{k}={}", fmt_opt(e.as_ref().map(|e| e.accuracy))).unwrap();
            }
            if plan.test.is_some() {
                write!(
                    line,
                    " test={}",
                    fmt_opt(run.test.as_ref().map(|e| e.accuracy))
                )
                .unwrap();
            }
            write!(
                line,
                " epochs={} best_epoch={}",
                run.epochs_run, run.best_epoch
            )
            .unwrap();
            let nonfinite: usize = run
                .validation
                .values()
                .chain(std::iter::once(&run.test))
                .flatten()
                .map(|e| e.nonfinite_ids.len())
                .sum();
            if nonfinite > 0 {
                write!(line, " nonfinite={nonfinite}").unwrap();
            }
            log.push(line);
        }

        let mut per_k = BTreeMap::new();
        for &k in &ks {
            let vals: Vec<RunValue> = runs
                .iter()
                .filter_map(|x| {
                    x.validation
                        .get(&k)
                        .and_then(|e| e.as_ref())
                        .map(|e| run_value(x, e))
                })
                .collect();
            let s = aggregate(&vals);
            match &s {
                Some(s) => log.push(format!(
                    "  k={k}: {:.4} ± {:.4} (kept {}, removed {}{})",
                    s.mean,
                    s.std,
                    s.n_kept,
                    s.n_removed,
                    s.removed
                        .iter()
                        .map(|x| format!(" seed {}={:.4}", x.seed, x.value))
                        .collect::<String>()
                )),
                None => log.push(format!("  k={k}: N/A")),
            }
            per_k.insert(k, s);
        }
        let test_vals: Vec<RunValue> = runs
            .iter()
            .filter_map(|x| x.test.as_ref().map(|e| run_value(x, e)))
            .collect();
        let test = aggregate(&test_vals);
        if let Some(t) = &test {
            log.push(format!(
                "  test: {:.4} ± {:.4}, best {:.4} (kept {}, removed {}{})",
                t.mean,
                t.std,
                t.best,
                t.n_kept,
                t.n_removed,
                t.removed
                    .iter()
                    .map(|x| format!(" seed {}={:.4}", x.seed, x.value))
                    .collect::<String>()
            ));
        }

        let removed_k1: BTreeSet<u64> = per_k[&1]
            .iter()
            .flat_map(|s| s.removed.iter().map(|x| x.seed))
            .collect();
        let val_records: Vec<PredictionRecord> = runs
            .iter()
            .filter(|x| !removed_k1.contains(&x.seed))
            .filter_map(|x| x.validation.get(&1).and_then(|e| e.as_ref()))
            .flat_map(|e| e.records.iter().cloned())
            .collect();
        let (nts, nts_kde, dens) =
            pooled_trust(val_records, &p.class_names[&plan.validation], cfg)?;
        spectra.extend(dens.into_iter().map(|(c, d)| Spectrum {
            name: format!("{tag}_{c}"),
            density: d,
        }));
        let (test_nts, test_nts_kde) = match &plan.test {
            Some(tname) => {
                let removed: BTreeSet<u64> = test
                    .iter()
                    .flat_map(|s| s.removed.iter().map(|x| x.seed))
                    .collect();
                let recs: Vec<PredictionRecord> = runs
                    .iter()
                    .filter(|x| !removed.contains(&x.seed))
                    .filter_map(|x| x.test.as_ref())
                    .flat_map(|e| e.records.iter().cloned())
                    .collect();
                let (n, k, d) = pooled_trust(recs, &p.class_names[tname], cfg)?;
                spectra.extend(d.into_iter().map(|(c, d)| Spectrum {
                    name: format!("{tag}_test_{c}"),
                    density: d,
                }));
                (n, k)
            }
            None => Default::default(),
        };
        rounds.push(RoundReport {
            round: r,
            ssf,
            validation_task: plan.validation.clone(),
            sources: plan.sources.clone(),
            test_task: plan.test.clone(),
            per_k,
            test,
            nts,
            nts_kde,
            test_nts,
            test_nts_kde,
        });
    }

    let mut overall = BTreeMap::new();
    for ssf in rounds.iter().map(|r| r.ssf).collect::<BTreeSet<_>>() {
        let rs: Vec<&RoundReport> = rounds.iter().filter(|r| r.ssf == ssf).collect();
        let per_k = ks
            .iter()
            .map(|&k| {
                let means: Vec<f64> = rs
                    .iter()
                    .filter_map(|r| r.per_k[&k].as_ref().map(|s| s.mean))
                    .collect();
                (k, (!means.is_empty()).then(|| mean_std(&means).0))
            })
            .collect::<BTreeMap<_, _>>();
        let test_means: Vec<f64> = rs
            .iter()
            .filter_map(|r| r.test.as_ref().map(|t| t.mean))
            .collect();
        let test_best = rs
            .iter()
            .filter_map(|r| r.test.as_ref().map(|t| t.best))
            .reduce(f64::max);
        let o = OverallReport {
            per_k,
            test_mean: (!test_means.is_empty()).then(|| mean_std(&test_means).0),
            test_best,
        };
        log.push(format!(
            "overall ssf{ssf}:{}{}",
            o.per_k
                .iter()
                .map(|(k, v)| format!(" k{k}={}", fmt_opt(*v)))
                .collect::<String>(),
            if o.test_mean.is_some() {
                format!(
                    " test={} best={}",
                    fmt_opt(o.test_mean),
                    fmt_opt(o.test_best)
                )
            } else {
                String::new()
            }
        ));
        overall.insert(ssf, o);
    }
    Ok(HarnessOutput {
        report: Report {
            schema: REPORT_SCHEMA.into(),
            config: cfg.clone(),
            rounds,
            overall,
        },
        runs: p.runs.clone(),
        spectra,
        log,
    })
}

fn cell(s: Option<&Summary>) -> String {
    s.map_or("N/A".into(), |s| format!("{:.3}±{:.3}", s.mean, s.std))
}

/// Grid of mean ± std per task and k, one block per SSF width.
pub fn tables_csv(report: &Report) -> String {
    let mut ks = report.config.k_list();
    let has_test = report.rounds.iter().any(|r| r.test_task.is_some());
    if has_test && !ks.contains(&report.config.test_k) {
        ks.push(report.config.test_k);
        ks.sort_unstable();
    }
    let mut out = String::from("task,role,ssf");
    for k in &ks {
        write!(out, ",k={k}").unwrap();
    }
    out.push_str(",best\n");
    let row =
        |out: &mut String, task: &str, role: &str, ssf: usize, cells: Vec<String>, best: String| {
            writeln!(out, "{task},{role},{ssf},{},{best}", cells.join(",")).unwrap();
        };
    for r in &report.rounds {
        let cells = ks.iter().map(|k| match r.per_k.get(k) {
            Some(s) => cell(s.as_ref()),
            None => String::new(),
        });
        row(
            &mut out,
            &r.validation_task,
            "validation",
            r.ssf,
            cells.collect(),
            String::new(),
        );
        if let Some(t) = &r.test_task {
            let cells = ks
                .iter()
                .map(|&k| {
                    if k == report.config.test_k {
                        cell(r.test.as_ref())
                    } else {
                        String::new()
                    }
                })
                .collect();
            let best = r
                .test
                .as_ref()
                .map_or("N/A".into(), |s| format!("{:.3}", s.best));
            row(&mut out, t, "test", r.ssf, cells, best);
        }
    }
    for (ssf, o) in &report.overall {
        let cells = ks
            .iter()
            .map(|k| {
                o.per_k.get(k).map_or(String::new(), |v| {
                    v.map_or("N/A".into(), |x| format!("{x:.3}"))
                })
            })
            .collect();
        row(
            &mut out,
            "overall",
            "validation",
            *ssf,
            cells,
            String::new(),
        );
        if has_test {
            let cells = ks
                .iter()
                .map(|&k| {
                    if k == report.config.test_k {
                        o.test_mean.map_or("N/A".into(), |x| format!("{x:.3}"))
                    } else {
                        String::new()
                    }
                })
                .collect();
            row(
                &mut out,
                "overall",
                "test",
                *ssf,
                cells,
                o.test_best.map_or("N/A".into(), |x| format!("{x:.3}")),
            );
        }
    }
    out
}

pub fn report_json(report: &Report) -> Result<String> {
    Ok(serde_json::to_string_pretty(report)? + "\n")
}

fn write(path: &Path, contents: &str) -> Result<()> {
    fs::write(path, contents).map_err(|e| Error::io(path, e))
}

/// Writes `report.json`, `tables.csv`, `runs.json`, `run.log` and
/// `spectra/<round>_<condition>.csv` into `dir`.
pub fn emit_report(out: &HarnessOutput, dir: impl AsRef<Path>) -> Result<()> {
    let dir = dir.as_ref();
    let spectra = dir.join("spectra");
    fs::create_dir_all(&spectra).map_err(|e| Error::io(&spectra, e))?;
    write(&dir.join("report.json"), &report_json(&out.report)?)?;
    write(&dir.join("tables.csv"), &tables_csv(&out.report))?;
    write(
        &dir.join("runs.json"),
        &(serde_json::to_string(&out.runs)? + "\n"),
    )?;
    write(&dir.join("run.log"), &(out.log.join("\n") + "\n"))?;
    for s in &out.spectra {
        write_spectrum_csv(spectra.join(format!("{}.csv", s.name)), &s.density)?;
    }
    Ok(())
}

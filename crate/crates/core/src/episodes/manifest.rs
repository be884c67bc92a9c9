//! Manifest + CSV ingestion.
//!
//! A manifest is one JSON document:
//!
//! ```json
//! {"tasks": [{"name": "suturing", "classes": ["novice", "expert"], "fps": 30,
//!             "trials": [{"id": "s01", "label": "expert", "file": "suturing/s01.csv"}]}]}
//! ```
//!
//! Each feature file is headerless UTF-8 CSV, one frame per line, `D`
//! comma-separated floats. Paths are relative to the manifest's directory.

use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use super::types::{Metaset, Role, TaskDataset, Trial};
use crate::array::Array;
use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub tasks: Vec<TaskEntry>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TaskEntry {
    pub name: String,
    pub classes: Vec<String>,
    pub fps: f64,
    #[serde(default, skip_serializing_if = "is_source")]
    pub role: Role,
    pub trials: Vec<TrialEntry>,
}

fn is_source(r: &Role) -> bool {
    *r == Role::Source
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrialEntry {
    pub id: String,
    pub label: String,
    pub file: String,
}

fn line_of(text: &str, needle: &str) -> usize {
    text.find(needle)
        .map_or(1, |pos| text[..pos].matches('\n').count() + 1)
}

pub fn load_metaset(manifest_path: impl AsRef<Path>) -> Result<Metaset> {
    let path = manifest_path.as_ref();
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let manifest: Manifest = serde_json::from_str(&text).map_err(|e| Error::Parse {
        path: path.to_path_buf(),
        line: e.line(),
        detail: e.to_string(),
    })?;
    let base = path.parent().unwrap_or_else(|| Path::new("."));
    let bad = |needle: &str, detail: String| Error::Parse {
        path: path.to_path_buf(),
        line: line_of(&text, needle),
        detail,
    };

    if manifest.tasks.is_empty() {
        return Err(bad("tasks", "manifest lists no tasks".into()));
    }
    let mut tasks = Vec::with_capacity(manifest.tasks.len());
    for entry in &manifest.tasks {
        let name_key = format!("\"{}\"", entry.name);
        if !(entry.fps > 0.0 && entry.fps.is_finite()) {
            return Err(bad(
                &name_key,
                format!("task {:?}: fps must be positive", entry.name),
            ));
        }
        if entry.trials.is_empty() {
            return Err(bad(
                &name_key,
                format!("task {:?} has no trials", entry.name),
            ));
        }
        let mut trials = Vec::with_capacity(entry.trials.len());
        for t in &entry.trials {
            let id_key = format!("\"{}\"", t.id);
            let label = entry
                .classes
                .iter()
                .position(|c| *c == t.label)
                .ok_or_else(|| {
                    bad(
                        &id_key,
                        format!(
                            "trial {:?}: unknown label {:?} (classes {:?})",
                            t.id, t.label, entry.classes
                        ),
                    )
                })?;
            let sequence = read_feature_csv(base.join(&t.file))?;
            trials.push(Trial {
                id: t.id.clone(),
                sequence,
                label,
                fps: entry.fps,
            });
        }
        let task = TaskDataset {
            name: entry.name.clone(),
            classes: entry.classes.clone(),
            trials,
            role: entry.role,
        };
        task.validate().map_err(|e| bad(&name_key, e.to_string()))?;
        tasks.push(task);
    }
    let m = Metaset { tasks };
    m.validate().map_err(|e| bad("tasks", e.to_string()))?;
    Ok(m)
}

/// Parses one headerless feature CSV into a `T x D` array.
pub fn read_feature_csv(path: impl AsRef<Path>) -> Result<Array> {
    let path = path.as_ref();
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    parse_feature_csv(&text, path)
}

fn parse_feature_csv(text: &str, path: &Path) -> Result<Array> {
    let err = |line: usize, detail: String| Error::Parse {
        path: path.to_path_buf(),
        line,
        detail,
    };
    let mut data = Vec::new();
    let mut width = None;
    let mut rows = 0;
    for (i, line) in text.lines().enumerate() {
        let lineno = i + 1;
        if line.trim().is_empty() {
            continue;
        }
        let start = data.len();
        for field in line.split(',') {
            let v: f64 = field
                .trim()
                .parse()
                .map_err(|_| err(lineno, format!("not a number: {field:?}")))?;
            if !v.is_finite() {
                return Err(err(lineno, format!("non-finite value {field:?}")));
            }
            data.push(v);
        }
        let w = data.len() - start;
        match width {
            None => width = Some(w),
            Some(expected) if expected != w => {
                return Err(err(
                    lineno,
                    format!("row has {w} values, expected {expected}"),
                ))
            }
            _ => {}
        }
        rows += 1;
    }
    let Some(width) = width else {
        return Err(err(1, "feature file has no rows".into()));
    };
    Array::new(vec![rows, width], data)
}

pub fn write_feature_csv(path: impl AsRef<Path>, sequence: &Array) -> Result<()> {
    let path = path.as_ref();
    let mut out = String::with_capacity(sequence.len() * 12);
    for row in sequence.rows() {
        for (i, v) in row.iter().enumerate() {
            if i > 0 {
                out.push(',');
            }
            out.push_str(&v.to_string());
        }
        out.push('\n');
    }
    fs::write(path, out).map_err(|e| Error::io(path, e))
}

fn file_stem(s: &str) -> String {
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

/// Writes `manifest.json` plus one CSV per trial under `dir`, returning the
/// manifest path.
pub fn write_metaset(metaset: &Metaset, dir: impl AsRef<Path>) -> Result<PathBuf> {
    let dir = dir.as_ref();
    let mut entries = Vec::new();
    for task in &metaset.tasks {
        let task_dir = file_stem(&task.name);
        let abs = dir.join(&task_dir);
        fs::create_dir_all(&abs).map_err(|e| Error::io(&abs, e))?;
        let mut trials = Vec::new();
        for t in &task.trials {
            let file = format!("{task_dir}/{}.csv", file_stem(&t.id));
            write_feature_csv(dir.join(&file), &t.sequence)?;
            trials.push(TrialEntry {
                id: t.id.clone(),
                label: task.classes[t.label].clone(),
                file,
            });
        }
        entries.push(TaskEntry {
            name: task.name.clone(),
            classes: task.classes.clone(),
            fps: task.trials.first().map_or(1.0, |t| t.fps),
            role: task.role,
            trials,
        });
    }
    let path = dir.join("manifest.json");
    let text = serde_json::to_string_pretty(&Manifest { tasks: entries })?;
    fs::write(&path, text).map_err(|e| Error::io(&path, e))?;
    Ok(path)
}

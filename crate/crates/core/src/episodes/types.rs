use serde::{Deserialize, Serialize};

use crate::array::Array;
use crate::error::{Error, Result};

/// One recorded performance: a `T x D` feature sequence with its skill label.
#[derive(Debug, Clone, PartialEq)]
pub struct Trial {
    pub id: String,
    pub sequence: Array,
    pub label: usize,
    pub fps: f64,
}

impl Trial {
    pub fn len(&self) -> usize {
        self.sequence.shape()[0]
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn width(&self) -> usize {
        self.sequence.shape()[1]
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "lowercase")]
pub enum Role {
    #[default]
    Source,
    Validation,
    Test,
}

/// All trials of one task (one cohort).
#[derive(Debug, Clone, PartialEq)]
pub struct TaskDataset {
    pub name: String,
    pub classes: Vec<String>,
    pub trials: Vec<Trial>,
    pub role: Role,
}

impl TaskDataset {
    pub fn num_classes(&self) -> usize {
        self.classes.len()
    }

    pub fn class_counts(&self) -> Vec<usize> {
        let mut counts = vec![0; self.classes.len()];
        for t in &self.trials {
            counts[t.label] += 1;
        }
        counts
    }

    /// Size of the smallest class.
    pub fn min_class_size(&self) -> usize {
        self.class_counts().into_iter().min().unwrap_or(0)
    }

    /// Trial indices grouped by label.
    pub fn indices_by_class(&self) -> Vec<Vec<usize>> {
        let mut out = vec![Vec::new(); self.classes.len()];
        for (i, t) in self.trials.iter().enumerate() {
            out[t.label].push(i);
        }
        out
    }

    pub fn validate(&self) -> Result<()> {
        if self.classes.len() < 2 {
            return Err(Error::invalid(format!(
                "task {:?} needs at least 2 classes, has {}",
                self.name,
                self.classes.len()
            )));
        }
        if let Some(t) = self.trials.iter().find(|t| t.label >= self.classes.len()) {
            return Err(Error::invalid(format!(
                "task {:?}: trial {:?} has label {} outside {} classes",
                self.name,
                t.id,
                t.label,
                self.classes.len()
            )));
        }
        if let Some((c, _)) = self
            .class_counts()
            .iter()
            .enumerate()
            .find(|(_, &n)| n == 0)
        {
            return Err(Error::invalid(format!(
                "task {:?}: class {:?} has no trials",
                self.name, self.classes[c]
            )));
        }
        if let Some(t) = self.trials.iter().find(|t| t.is_empty()) {
            return Err(Error::invalid(format!(
                "task {:?}: trial {:?} has no frames",
                self.name, t.id
            )));
        }
        let width = self.trials[0].width();
        if let Some(t) = self.trials.iter().find(|t| t.width() != width) {
            return Err(Error::invalid(format!(
                "task {:?}: trial {:?} has width {} but the task uses {width}",
                self.name,
                t.id,
                t.width()
            )));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct Metaset {
    pub tasks: Vec<TaskDataset>,
}

impl Metaset {
    pub fn new(tasks: Vec<TaskDataset>) -> Result<Self> {
        let m = Self { tasks };
        m.validate()?;
        Ok(m)
    }

    pub fn validate(&self) -> Result<()> {
        if self.tasks.is_empty() {
            return Err(Error::invalid("metaset has no tasks"));
        }
        for (i, t) in self.tasks.iter().enumerate() {
            if self.tasks[..i].iter().any(|o| o.name == t.name) {
                return Err(Error::invalid(format!("duplicate task name {:?}", t.name)));
            }
            t.validate()?;
        }
        Ok(())
    }

    pub fn task(&self, name: &str) -> Option<&TaskDataset> {
        self.tasks.iter().find(|t| t.name == name)
    }
}

/// A labelled sequence inside an episode.
#[derive(Debug, Clone, PartialEq)]
pub struct Sample {
    pub sequence: Array,
    pub label: usize,
}

/// Support and query sets drawn from one task.
#[derive(Debug, Clone, PartialEq)]
pub struct Episode {
    pub task: String,
    pub classes: usize,
    pub support: Vec<Sample>,
    pub query: Vec<Sample>,
}

impl Episode {
    pub fn support_labels(&self) -> Vec<usize> {
        self.support.iter().map(|s| s.label).collect()
    }

    pub fn query_labels(&self) -> Vec<usize> {
        self.query.iter().map(|s| s.label).collect()
    }
}

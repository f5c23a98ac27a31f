//! Canonical dataset schema and loaders.
//!
//! Every corpus is converted to one JSON record per line:
//!
//! ```text
//! {"id":"pheme-0001","text":"...","task":"rumor","label":"false","event":"charliehebdo"}
//! ```
//!
//! with optional `event`, `bias_type` and `polarity` fields. Loading checks
//! every record against the task's [`TaskSpec`].

pub mod catalog;
mod folds;
mod split;
pub mod synthetic;

use std::collections::{BTreeMap, HashSet};
use std::fs::File;
use std::io::{BufRead, BufReader, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

pub use folds::{leave_one_event_folds, EventFold};
pub use split::{holdout_split, split, SplitDataset, DEFAULT_SPLIT_RATIOS};
pub use synthetic::{generate_synthetic_suite, SyntheticSpec, SyntheticTask};

use crate::error::{Error, Result};
use crate::multitask::TaskSpec;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum BiasType {
    Lexical,
    Informational,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Polarity {
    Positive,
    Negative,
    Neutral,
}

impl BiasType {
    pub fn as_str(&self) -> &'static str {
        match self {
            BiasType::Lexical => "lexical",
            BiasType::Informational => "informational",
        }
    }
}

impl Polarity {
    pub fn as_str(&self) -> &'static str {
        match self {
            Polarity::Positive => "positive",
            Polarity::Negative => "negative",
            Polarity::Neutral => "neutral",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Example {
    pub id: String,
    pub text: String,
    pub task: String,
    pub label: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub event: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub bias_type: Option<BiasType>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub polarity: Option<Polarity>,
}

impl Example {
    pub fn new(
        id: impl Into<String>,
        text: impl Into<String>,
        task: impl Into<String>,
        label: impl Into<String>,
    ) -> Self {
        Example {
            id: id.into(),
            text: text.into(),
            task: task.into(),
            label: label.into(),
            event: None,
            bias_type: None,
            polarity: None,
        }
    }

    pub fn with_event(mut self, event: impl Into<String>) -> Self {
        self.event = Some(event.into());
        self
    }

    fn check(&self, spec: &TaskSpec) -> std::result::Result<(), String> {
        if self.task != spec.name {
            return Err(format!("record task `{}` does not match `{}`", self.task, spec.name));
        }
        if spec.label_index(&self.label).is_none() {
            return Err(format!(
                "unknown label `{}` for task `{}` (expected one of {:?})",
                self.label, spec.name, spec.labels
            ));
        }
        if self.bias_type.is_some() || self.polarity.is_some() {
            let positive = spec.positive.as_deref() == Some(self.label.as_str());
            if spec.name != catalog::NEWSBIAS || !positive {
                return Err("bias_type/polarity are only allowed on biased news sentences".into());
            }
        }
        Ok(())
    }
}

/// Records dropped at load time, e.g. the rumor task's `unverified` class.
#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct FilterRules {
    pub drop_labels: Vec<String>,
}

impl FilterRules {
    pub fn none() -> Self {
        Self::default()
    }

    /// Standard rules for a known task name.
    pub fn for_task(task: &str) -> Self {
        match task {
            catalog::RUMOR => FilterRules { drop_labels: vec!["unverified".into()] },
            _ => Self::none(),
        }
    }

    fn keeps(&self, ex: &Example) -> bool {
        !self.drop_labels.contains(&ex.label)
    }
}

/// A validated set of examples for one task.
#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    spec: TaskSpec,
    examples: Vec<Example>,
}

impl Dataset {
    pub fn new(spec: TaskSpec, examples: Vec<Example>) -> Result<Self> {
        spec.validate()?;
        let mut ids = HashSet::new();
        for ex in &examples {
            ex.check(&spec).map_err(Error::Data)?;
            if !ids.insert(ex.id.as_str()) {
                return Err(Error::DuplicateId(ex.id.clone()));
            }
        }
        Ok(Dataset { spec, examples })
    }

    pub fn spec(&self) -> &TaskSpec {
        &self.spec
    }

    pub fn name(&self) -> &str {
        &self.spec.name
    }

    pub fn examples(&self) -> &[Example] {
        &self.examples
    }

    pub fn len(&self) -> usize {
        self.examples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.examples.is_empty()
    }

    pub fn texts(&self) -> Vec<&str> {
        self.examples.iter().map(|e| e.text.as_str()).collect()
    }

    /// Class index of every example.
    pub fn labels(&self) -> Vec<usize> {
        self.examples.iter().map(|e| self.spec.label_index(&e.label).expect("validated on construction")).collect()
    }

    /// Count per class, in label order.
    pub fn class_counts(&self) -> Vec<usize> {
        let mut counts = vec![0; self.spec.num_classes()];
        for l in self.labels() {
            counts[l] += 1;
        }
        counts
    }

    pub fn positive_count(&self) -> Option<usize> {
        self.spec.positive_index().map(|p| self.class_counts()[p])
    }

    /// Examples at the given indices (in that order), as a new dataset.
    pub fn subset(&self, indices: &[usize]) -> Result<Dataset> {
        let examples = indices.iter().map(|&i| self.examples[i].clone()).collect();
        Dataset::new(self.spec.clone(), examples)
    }

    pub fn filter<F: Fn(&Example) -> bool>(&self, keep: F) -> Dataset {
        Dataset { spec: self.spec.clone(), examples: self.examples.iter().filter(|e| keep(e)).cloned().collect() }
    }

    pub fn write_jsonl<W: Write>(&self, mut w: W) -> Result<()> {
        for ex in &self.examples {
            serde_json::to_writer(&mut w, ex)?;
            w.write_all(b"\n").map_err(|e| Error::Data(e.to_string()))?;
        }
        Ok(())
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let file = File::create(path).map_err(|e| Error::io(path, e))?;
        let mut w = std::io::BufWriter::new(file);
        self.write_jsonl(&mut w)?;
        w.flush().map_err(|e| Error::io(path, e))
    }
}

/// Reads a canonical dataset file, applying `filter` before validation.
pub fn load_dataset(path: &Path, spec: &TaskSpec, filter: &FilterRules) -> Result<Dataset> {
    let file = File::open(path).map_err(|e| Error::io(path, e))?;
    read_dataset(BufReader::new(file), path, spec, filter)
}

pub fn read_dataset<R: BufRead>(reader: R, path: &Path, spec: &TaskSpec, filter: &FilterRules) -> Result<Dataset> {
    spec.validate()?;
    let record_err = |line: usize, reason: String| Error::Record { path: path.to_path_buf(), line, reason };
    let mut examples = Vec::new();
    let mut ids = HashSet::new();
    for (i, line) in reader.lines().enumerate() {
        let line_no = i + 1;
        let line = line.map_err(|e| Error::io(path, e))?;
        if line.trim().is_empty() {
            continue;
        }
        let ex: Example = serde_json::from_str(&line).map_err(|e| record_err(line_no, e.to_string()))?;
        if !filter.keeps(&ex) {
            continue;
        }
        ex.check(spec).map_err(|r| record_err(line_no, r))?;
        if !ids.insert(ex.id.clone()) {
            return Err(record_err(line_no, Error::DuplicateId(ex.id).to_string()));
        }
        examples.push(ex);
    }
    if examples.is_empty() {
        return Err(Error::NoExamples);
    }
    Dataset::new(spec.clone(), examples)
}

/// Builds the bias-type and polarity datasets from the biased sentences of a
/// news-bias dataset. Sentences without the annotation are skipped.
pub fn derive_auxiliary(newsbias: &Dataset) -> Result<(Dataset, Dataset)> {
    if newsbias.name() != catalog::NEWSBIAS {
        return Err(Error::Data(format!(
            "auxiliary tasks derive from `{}`, got `{}`",
            catalog::NEWSBIAS,
            newsbias.name()
        )));
    }
    let mut bias = Vec::new();
    let mut polarity = Vec::new();
    for ex in newsbias.examples() {
        if let Some(b) = ex.bias_type {
            bias.push(Example::new(&ex.id, &ex.text, catalog::BIAS_TYPE, b.as_str()));
        }
        if let Some(p) = ex.polarity {
            polarity.push(Example::new(&ex.id, &ex.text, catalog::POLARITY, p.as_str()));
        }
    }
    Ok((
        Dataset::new(catalog::spec(catalog::BIAS_TYPE).expect("catalog"), bias)?,
        Dataset::new(catalog::spec(catalog::POLARITY).expect("catalog"), polarity)?,
    ))
}

/// Aligned class-count table: task, granularity, labels, size, positive size.
pub fn class_count_table(datasets: &[&Dataset]) -> String {
    let mut rows = vec![[
        "Task".to_string(),
        "Granularity".into(),
        "Labels (Positive/Negative)".into(),
        "Dataset Size".into(),
        "Positive Class Size".into(),
    ]];
    for d in datasets {
        let spec = d.spec();
        let labels = match spec.positive_index() {
            Some(p) if spec.num_classes() == 2 => format!("{}/{}", spec.labels[p], spec.labels[1 - p]),
            _ => spec.labels.join("/"),
        };
        let per_class: BTreeMap<&str, usize> = spec.labels.iter().map(String::as_str).zip(d.class_counts()).collect();
        let positive = match d.positive_count() {
            Some(n) => n.to_string(),
            None => format!("{per_class:?}"),
        };
        rows.push([spec.name.clone(), spec.granularity.to_string(), labels, d.len().to_string(), positive]);
    }
    let widths: Vec<usize> = (0..5).map(|c| rows.iter().map(|r| r[c].chars().count()).max().unwrap_or(0)).collect();
    let mut out = String::new();
    for r in &rows {
        let cells: Vec<String> = r.iter().zip(&widths).map(|(c, w)| format!("{c:<w$}")).collect();
        out.push_str(cells.join("  ").trim_end());
        out.push('\n');
    }
    out
}

//! Metrics and the three experimental protocols: task-combination
//! ablation, few-shot adaptation to an unseen task, and leave-one-event-out
//! cross-validation.

mod metrics;
mod report;

use std::collections::BTreeSet;

use rand::seq::index::sample;
use serde::{Deserialize, Serialize};

pub use metrics::{
    accuracy, confusion_matrix, macro_f1, seed_average, ClassMetrics, MeanStd, MetricsReport, SeedStats,
};
pub use report::{format_table, write_jsonl, TableRow};

use crate::data::{holdout_split, leave_one_event_folds, Dataset, SplitDataset};
use crate::encoder::TextEncoder;
use crate::error::{Error, Result};
use crate::multitask::{MultiTaskModel, TaskSpec};
use crate::par;
use crate::seed;
use crate::tokenization::Vocabulary;
use crate::training::{
    adapt_task, evaluate_split, finetune_task, train_multitask, Adaptation, EncodedSplit, TaskData, TrainConfig,
    TrainHistory,
};

/// Published numbers, for documentation; see the `note` field.
pub const REFERENCE_TARGETS: &str = include_str!("reference_targets.json");

pub const FEWSHOT_K: [usize; 3] = [10, 25, 50];

/// Share of each fold's training events held out for early stopping.
pub const LOOCV_VALIDATION_RATIO: f64 = 0.1;

/// Metrics of `model` on `split` for `task`.
pub fn evaluate_task<E: TextEncoder>(
    model: &MultiTaskModel<E>,
    task: &str,
    split: &EncodedSplit,
) -> Result<MetricsReport> {
    let (_, preds) = evaluate_split(model, task, split)?;
    MetricsReport::compute(&preds, &split.labels, &model.task_spec(task)?.labels)
}

/// A task's spec plus encoded train/validation/test splits.
#[derive(Debug, Clone, PartialEq)]
pub struct PreparedTask {
    pub spec: TaskSpec,
    pub data: TaskData,
    pub test: EncodedSplit,
}

impl PreparedTask {
    pub fn new(split: &SplitDataset, vocab: &Vocabulary, max_seq_len: usize) -> Result<Self> {
        Ok(PreparedTask {
            spec: split.train.spec().clone(),
            data: TaskData::from_datasets(&split.train, &split.validation, vocab, max_seq_len)?,
            test: EncodedSplit::encode(&split.test, vocab, max_seq_len)?,
        })
    }

    pub fn name(&self) -> &str {
        &self.spec.name
    }
}

fn find<'a>(tasks: &'a [PreparedTask], name: &str) -> Result<&'a PreparedTask> {
    tasks.iter().find(|t| t.name() == name).ok_or_else(|| Error::UnknownTask(name.to_string()))
}

/// Stage 1 on `subset` starting from `base` (which must hold no heads for
/// those tasks). Head seeds come from `config.seed`.
pub fn stage1<E: TextEncoder>(
    base: &MultiTaskModel<E>,
    tasks: &[PreparedTask],
    subset: &[String],
    config: &TrainConfig,
) -> Result<(MultiTaskModel<E>, TrainHistory)> {
    let mut model = base.clone();
    let mut data = Vec::with_capacity(subset.len());
    for name in subset {
        let t = find(tasks, name)?;
        model.register_task(t.spec.clone(), config.seed)?;
        data.push(t.data.clone());
    }
    train_multitask(&model, &data, config)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AblationRow {
    pub subset: Vec<String>,
    pub eval_task: String,
    pub report: MetricsReport,
    pub stage1: TrainHistory,
    /// Absent when the subset is the evaluation task alone.
    pub stage2: Option<TrainHistory>,
}

/// Drops repeated subsets (compared as sets), warning for each.
pub fn dedup_subsets(subsets: &[Vec<String>]) -> Vec<Vec<String>> {
    let mut seen = BTreeSet::new();
    let mut out = Vec::new();
    for s in subsets {
        let key: BTreeSet<&String> = s.iter().collect();
        if seen.insert(key) {
            let mut uniq: Vec<String> = Vec::new();
            for t in s {
                if !uniq.contains(t) {
                    uniq.push(t.clone());
                }
            }
            out.push(uniq);
        } else {
            log::warn!("dropping duplicate task subset {s:?}");
        }
    }
    out
}

/// For each subset: stage-1 training on the subset, stage-2 fine-tuning on
/// `eval_task`, then test-split metrics for `eval_task`. A subset holding only
/// `eval_task` is plain single-task training.
pub fn ablation_run<E: TextEncoder>(
    base: &MultiTaskModel<E>,
    subsets: &[Vec<String>],
    eval_task: &str,
    tasks: &[PreparedTask],
    config: &TrainConfig,
) -> Result<Vec<AblationRow>> {
    if let Some(s) = subsets.iter().find(|s| !s.iter().any(|t| t == eval_task)) {
        return Err(Error::invalid(format!("subset {s:?} does not contain the evaluation task `{eval_task}`")));
    }
    let target = find(tasks, eval_task)?;
    let subsets = dedup_subsets(subsets);
    par::try_map_slice(&subsets, |subset| -> Result<AblationRow> {
        let (model, h1) = stage1(base, tasks, subset, config)?;
        let (model, h2) = if subset.len() == 1 {
            (model, None)
        } else {
            let (m, h) = finetune_task(&model, eval_task, &target.data, config)?;
            (m, Some(h))
        };
        Ok(AblationRow {
            subset: subset.clone(),
            eval_task: eval_task.to_string(),
            report: evaluate_task(&model, eval_task, &target.test)?,
            stage1: h1,
            stage2: h2,
        })
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct FewShotConfig {
    pub k: usize,
    pub seed: u64,
    pub adaptation: Adaptation,
}

/// Sorted `(shots, rest)`: `k` indices drawn without replacement from `0..n`
/// and the complement.
pub fn fewshot_partition(n: usize, k: usize, seed: u64) -> Result<(Vec<usize>, Vec<usize>)> {
    if k == 0 || k >= n {
        return Err(Error::invalid(format!("need 0 < k < dataset size, got k = {k} for {n} examples")));
    }
    let mut rng = seed::rng(seed, &[seed::hash_str("fewshot")]);
    let mut shots = sample(&mut rng, n, k).into_vec();
    shots.sort_unstable();
    let chosen: BTreeSet<usize> = shots.iter().copied().collect();
    let rest = (0..n).filter(|i| !chosen.contains(i)).collect();
    Ok((shots, rest))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FewShotOutcome {
    pub task: String,
    pub k: usize,
    pub train_size: usize,
    pub test_size: usize,
    pub shot_indices: Vec<usize>,
    pub report: MetricsReport,
    pub history: TrainHistory,
}

/// Registers a fresh head for `unseen` on `model`, trains it on `k` shots and
/// evaluates on the remaining examples.
///
/// No held-out data exists besides the shots, so the shots also serve as the
/// early-stopping signal. The training seed is `cfg.seed`.
pub fn fewshot_run<E: TextEncoder>(
    model: &MultiTaskModel<E>,
    unseen: &Dataset,
    vocab: &Vocabulary,
    cfg: &FewShotConfig,
    config: &TrainConfig,
) -> Result<FewShotOutcome> {
    let (shots, rest) = fewshot_partition(unseen.len(), cfg.k, cfg.seed)?;
    let all = EncodedSplit::encode(unseen, vocab, config.max_seq_len)?;
    let train = all.subset(&shots);
    let test = all.subset(&rest);
    let mut model = model.clone();
    model.register_task(unseen.spec().clone(), cfg.seed)?;
    let data = TaskData::new(unseen.name(), train.clone(), train);
    let config = config.clone().with_seed(cfg.seed);
    let (model, history) = adapt_task(&model, unseen.name(), &data, &config, cfg.adaptation)?;
    Ok(FewShotOutcome {
        task: unseen.name().to_string(),
        k: cfg.k,
        train_size: shots.len(),
        test_size: rest.len(),
        shot_indices: shots,
        report: evaluate_task(&model, unseen.name(), &test)?,
        history,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LoocvFold {
    pub event: String,
    pub train_events: Vec<String>,
    pub train_size: usize,
    pub validation_size: usize,
    pub test_size: usize,
    pub report: MetricsReport,
    pub history: TrainHistory,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LoocvResult {
    pub stage1_tasks: Vec<String>,
    pub stage1_history: TrainHistory,
    pub folds: Vec<LoocvFold>,
    pub average_accuracy: f64,
    pub average_macro_f1: f64,
}

fn events(d: &Dataset) -> Vec<String> {
    d.examples().iter().filter_map(|e| e.event.clone()).collect::<BTreeSet<_>>().into_iter().collect()
}

/// Stage-1 training on every task except the held-out one, then one
/// fine-tuned model per event of `heldout`, each tested on that event.
pub fn loocv_run<E: TextEncoder>(
    base: &MultiTaskModel<E>,
    tasks: &[PreparedTask],
    heldout: &Dataset,
    vocab: &Vocabulary,
    config: &TrainConfig,
) -> Result<LoocvResult> {
    let name = heldout.name();
    let stage1_tasks: Vec<String> = tasks.iter().map(|t| t.name().to_string()).filter(|t| t != name).collect();
    if stage1_tasks.len() < tasks.len() {
        log::info!("excluding `{name}` from stage-1 training");
    }
    if stage1_tasks.is_empty() {
        return Err(Error::invalid(format!("no tasks besides `{name}` to pre-train on")));
    }
    let folds = leave_one_event_folds(heldout)?;
    let (stage1_model, stage1_history) = stage1(base, tasks, &stage1_tasks, config)?;
    let folds = par::try_map_slice(&folds, |fold| -> Result<LoocvFold> {
        let fold_seed = seed::derive_seed(config.seed, &[seed::hash_str(&fold.event)]);
        let (train, val) = holdout_split(&fold.train, LOOCV_VALIDATION_RATIO, fold_seed)?;
        let data = TaskData::from_datasets(&train, &val, vocab, config.max_seq_len)?;
        let mut model = stage1_model.clone();
        model.register_task(heldout.spec().clone(), config.seed)?;
        let (model, history) = finetune_task(&model, name, &data, config)?;
        let test = EncodedSplit::encode(&fold.test, vocab, config.max_seq_len)?;
        Ok(LoocvFold {
            event: fold.event.clone(),
            train_events: events(&fold.train),
            train_size: train.len(),
            validation_size: val.len(),
            test_size: fold.test.len(),
            report: evaluate_task(&model, name, &test)?,
            history,
        })
    })?;
    let n = folds.len() as f64;
    Ok(LoocvResult {
        stage1_tasks,
        stage1_history,
        average_accuracy: folds.iter().map(|f| f.report.accuracy).sum::<f64>() / n,
        average_macro_f1: folds.iter().map(|f| f.report.macro_f1).sum::<f64>() / n,
        folds,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn partition_sizes() {
        let (a, b) = fewshot_partition(504, 50, 1).unwrap();
        assert_eq!((a.len(), b.len()), (50, 454));
        let mut all: Vec<usize> = a.iter().chain(&b).copied().collect();
        all.sort_unstable();
        assert_eq!(all, (0..504).collect::<Vec<_>>());
        assert_eq!(fewshot_partition(504, 50, 1).unwrap().0, a);
        assert!(fewshot_partition(10, 10, 1).is_err());
        assert!(fewshot_partition(10, 0, 1).is_err());
    }

    #[test]
    fn dedup_keeps_first() {
        let s = |v: &[&str]| v.iter().map(|x| x.to_string()).collect::<Vec<_>>();
        let out = dedup_subsets(&[s(&["r", "c"]), s(&["c", "r"]), s(&["r"]), s(&["r", "r"])]);
        assert_eq!(out, vec![s(&["r", "c"]), s(&["r"])]);
    }

    #[test]
    fn reference_targets_parse() {
        let v: serde_json::Value = serde_json::from_str(REFERENCE_TARGETS).unwrap();
        assert_eq!(v["reproducible"], false);
        assert_eq!(v["ablation_on_rumor"].as_array().unwrap().len(), 8);
    }
}

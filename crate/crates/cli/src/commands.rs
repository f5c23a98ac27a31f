use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use serde::Serialize;

use misinfo_mtl::checkpoint::{load_checkpoint, save_checkpoint};
use misinfo_mtl::data::synthetic::{synthetic_task_spec, NEGATIVE, POSITIVE};
use misinfo_mtl::data::{class_count_table, generate_synthetic_suite, split, SyntheticSpec, SyntheticTask};
use misinfo_mtl::evaluation::{
    ablation_run, evaluate_task, fewshot_run, loocv_run, seed_average, stage1, FewShotConfig, MetricsReport,
};
use misinfo_mtl::multitask::MultiTaskModel;
use misinfo_mtl::par;
use misinfo_mtl::tokenization::Vocabulary;
use misinfo_mtl::training::{finetune_task, Adaptation, EncodedSplit, TaskData};

use crate::run::{jsonl, write_file, write_summary, MetricsLine, RunDir};
use crate::setup::{load_stage1, load_task, prepare, split_all, train_texts, vocabulary, RunConfig};
use crate::{Common, UsageError};

pub const DEFAULT_SEEDS: [u64; 3] = [1, 2, 3];

type Rows = Vec<(String, MetricsReport)>;

impl Common {
    pub fn seeds(&self) -> Vec<u64> {
        if self.seeds.is_empty() {
            DEFAULT_SEEDS.to_vec()
        } else {
            let mut s = Vec::new();
            for x in &self.seeds {
                if !s.contains(x) {
                    s.push(*x);
                }
            }
            s
        }
    }

    fn config_path(&self) -> Result<&Path> {
        self.config.as_deref().ok_or_else(|| UsageError("--config is required for this command".into()).into())
    }

    fn load_config(&self) -> Result<RunConfig> {
        RunConfig::load(self.config_path()?)
    }

    fn start(
        &self,
        command: &str,
        config: &RunConfig,
        args: BTreeMap<String, String>,
        extra: &[PathBuf],
    ) -> Result<RunDir> {
        let mut inputs = vec![self.config_path()?.to_path_buf()];
        inputs.extend(config.input_files());
        inputs.extend(extra.iter().cloned());
        RunDir::create(&self.out, command, args, serde_json::to_value(config)?, &inputs, &self.seeds(), self.force)
    }
}

fn args(pairs: &[(&str, String)]) -> BTreeMap<String, String> {
    pairs.iter().map(|(k, v)| (k.to_string(), v.clone())).collect()
}

/// Runs `body`, recording success or failure in the manifest.
fn finish(run: RunDir, body: impl FnOnce(&RunDir) -> Result<()>) -> Result<()> {
    match body(&run) {
        Ok(()) => {
            let path = run.finish(true)?;
            println!("run directory: {}", path.display());
            Ok(())
        }
        Err(e) => {
            let _ = run.finish(false);
            Err(e)
        }
    }
}

/// `checkpoint` may be a run directory (per-seed checkpoints) or one file.
fn checkpoint_for(checkpoint: &Path, seed: u64) -> Result<PathBuf> {
    let p = if checkpoint.is_dir() {
        checkpoint.join(format!("seed-{seed}")).join("checkpoint.bin")
    } else {
        checkpoint.to_path_buf()
    };
    if !p.exists() {
        bail!(UsageError(format!("checkpoint {} does not exist", p.display())));
    }
    Ok(p)
}

fn checkpoint_inputs(checkpoint: &Path, seeds: &[u64]) -> Result<Vec<PathBuf>> {
    seeds.iter().map(|&s| checkpoint_for(checkpoint, s)).collect()
}

fn write_seed_metrics(dir: &Path, seed: u64, rows: &Rows) -> Result<()> {
    let lines: Vec<MetricsLine> =
        rows.iter().map(|(r, m)| MetricsLine { row: r, seed: Some(seed), report: m }).collect();
    write_file(&dir.join("metrics.jsonl"), &jsonl(&lines)?)
}

/// Seed-averages row `i` across all per-seed row lists.
fn average(seeds: &[u64], per_seed: &[Rows]) -> Result<Rows> {
    let first = per_seed.first().map(Vec::len).unwrap_or(0);
    (0..first)
        .map(|i| {
            let runs: Vec<(u64, MetricsReport)> =
                seeds.iter().zip(per_seed).map(|(&s, rows)| (s, rows[i].1.clone())).collect();
            Ok((per_seed[0][i].0.clone(), seed_average(&runs)?))
        })
        .collect()
}

fn plain_report(accuracy: f64, macro_f1: f64) -> MetricsReport {
    MetricsReport { accuracy, macro_f1, per_class: vec![], seeds: None }
}

pub fn train(common: &Common) -> Result<()> {
    let config = common.load_config()?;
    if config.tasks.is_empty() {
        bail!(UsageError("tasks: list at least one task to train".into()));
    }
    let datasets = load_stage1(&config, None)?;
    let seeds = common.seeds();
    let run = common.start("train", &config, BTreeMap::new(), &[])?;
    finish(run, |run| {
        let per_seed = par::try_map_slice(&seeds, |&s| -> Result<Rows> {
            let splits = split_all(&config, &datasets, s)?;
            let vocab = vocabulary(&config, &train_texts(&splits))?;
            let prepared = prepare(&config, &splits, &vocab)?;
            let names: Vec<String> = prepared.iter().map(|p| p.name().to_string()).collect();
            let base = config.fresh_model(vocab.size(), s)?;
            let (model, history) = stage1(&base, &prepared, &names, &config.train_config(s))?;
            let dir = run.seed_dir(s)?;
            save_checkpoint(&dir.join("checkpoint.bin"), &model, &vocab)?;
            let mut h = Vec::new();
            history.write_jsonl(&mut h)?;
            write_file(&dir.join("history.jsonl"), &h)?;
            let rows = prepared
                .iter()
                .map(|p| Ok((p.name().to_string(), evaluate_task(&model, p.name(), &p.test)?)))
                .collect::<Result<Rows>>()?;
            write_seed_metrics(&dir, s, &rows)?;
            Ok(rows)
        })?;
        write_summary(run, "Task", &average(&seeds, &per_seed)?, "")
    })
}

fn task_data(config: &RunConfig, task: &str, vocab: &Vocabulary, seed: u64) -> Result<(TaskData, EncodedSplit)> {
    let ds = load_task(config, task)?;
    let s = split(&ds, config.split_ratios, seed)?;
    let data = TaskData::from_datasets(&s.train, &s.validation, vocab, config.train.max_seq_len)?;
    Ok((data, EncodedSplit::encode(&s.test, vocab, config.train.max_seq_len)?))
}

fn require_head(model: &MultiTaskModel, task: &str, path: &Path) -> Result<()> {
    if !model.has_task(task) {
        bail!(UsageError(format!(
            "checkpoint {} has no head for `{task}` (it has: {})",
            path.display(),
            model.task_names().join(", ")
        )));
    }
    Ok(())
}

pub fn finetune(common: &Common, checkpoint: &Path, task: &str) -> Result<()> {
    let config = common.load_config()?;
    config.spec(task)?;
    let seeds = common.seeds();
    let ckpts = checkpoint_inputs(checkpoint, &seeds)?;
    let run = common.start("finetune", &config, args(&[("task", task.to_string())]), &ckpts)?;
    finish(run, |run| {
        let per_seed = par::try_map_slice(&seeds, |&s| -> Result<Rows> {
            let path = checkpoint_for(checkpoint, s)?;
            let (model, vocab) = load_checkpoint(&path)?;
            require_head(&model, task, &path)?;
            let (data, test) = task_data(&config, task, &vocab, s)?;
            let (model, history) = finetune_task(&model, task, &data, &config.train_config(s))?;
            let dir = run.seed_dir(s)?;
            save_checkpoint(&dir.join("checkpoint.bin"), &model, &vocab)?;
            let mut h = Vec::new();
            history.write_jsonl(&mut h)?;
            write_file(&dir.join("history.jsonl"), &h)?;
            let rows = vec![(task.to_string(), evaluate_task(&model, task, &test)?)];
            write_seed_metrics(&dir, s, &rows)?;
            Ok(rows)
        })?;
        write_summary(run, "Task", &average(&seeds, &per_seed)?, "")
    })
}

#[derive(Serialize)]
struct FewShotRecord<'a> {
    seed: u64,
    task: &'a str,
    k: usize,
    train_size: usize,
    test_size: usize,
    adaptation: Adaptation,
    fresh_encoder: bool,
    shot_indices: &'a [usize],
}

pub fn fewshot(
    common: &Common,
    checkpoint: Option<&Path>,
    task: &str,
    k: usize,
    adaptation: Adaptation,
    fresh: bool,
) -> Result<()> {
    let config = common.load_config()?;
    let dataset = load_task(&config, task)?;
    if k == 0 || k >= dataset.len() {
        bail!(UsageError(format!("--k {k}: must lie in 1..{} for `{task}`", dataset.len())));
    }
    if checkpoint.is_none() && !fresh {
        bail!(UsageError("--checkpoint is required unless --fresh is given".into()));
    }
    let seeds = common.seeds();
    let ckpts = match checkpoint {
        Some(c) => checkpoint_inputs(c, &seeds)?,
        None => vec![],
    };
    let stage1_data = if checkpoint.is_none() { load_stage1(&config, None)? } else { vec![] };
    let a = args(&[
        ("task", task.to_string()),
        ("k", k.to_string()),
        ("mode", adaptation.to_string()),
        ("fresh", fresh.to_string()),
    ]);
    let run = common.start("fewshot", &config, a, &ckpts)?;
    finish(run, |run| {
        let per_seed = par::try_map_slice(&seeds, |&s| -> Result<(Rows, usize, usize)> {
            let (model, vocab) = match checkpoint {
                Some(c) => {
                    let (m, v) = load_checkpoint(&checkpoint_for(c, s)?)?;
                    if fresh {
                        (config.fresh_model(v.size(), s)?, v)
                    } else {
                        (m, v)
                    }
                }
                None => {
                    let splits = split_all(&config, &stage1_data, s)?;
                    let v = vocabulary(&config, &train_texts(&splits))?;
                    (config.fresh_model(v.size(), s)?, v)
                }
            };
            if model.has_task(task) {
                bail!(UsageError(format!(
                    "`{task}` is already registered on the checkpoint; few-shot needs an unseen task"
                )));
            }
            let cfg = FewShotConfig { k, seed: s, adaptation };
            let out = fewshot_run(&model, &dataset, &vocab, &cfg, &config.train_config(s))?;
            let dir = run.seed_dir(s)?;
            let rec = FewShotRecord {
                seed: s,
                task,
                k,
                train_size: out.train_size,
                test_size: out.test_size,
                adaptation,
                fresh_encoder: fresh,
                shot_indices: &out.shot_indices,
            };
            write_file(&dir.join("fewshot.json"), &serde_json::to_vec_pretty(&rec)?)?;
            let mut h = Vec::new();
            out.history.write_jsonl(&mut h)?;
            write_file(&dir.join("history.jsonl"), &h)?;
            let rows = vec![(task.to_string(), out.report)];
            write_seed_metrics(&dir, s, &rows)?;
            Ok((rows, out.train_size, out.test_size))
        })?;
        let (train_n, test_n) = (per_seed[0].1, per_seed[0].2);
        let rows: Vec<Rows> = per_seed.into_iter().map(|r| r.0).collect();
        let extra = format!("train={train_n} test={test_n} mode={adaptation} fresh_encoder={fresh}\n");
        write_summary(run, "Task", &average(&seeds, &rows)?, &extra)
    })
}

pub fn loocv(common: &Common, task: &str) -> Result<()> {
    let config = common.load_config()?;
    let heldout = load_task(&config, task)?;
    let others = load_stage1(&config, Some(task))?;
    if others.is_empty() {
        bail!(UsageError(format!("tasks: need at least one task besides `{task}` for stage-1 training")));
    }
    let seeds = common.seeds();
    let run = common.start("loocv", &config, args(&[("task", task.to_string())]), &[])?;
    finish(run, |run| {
        let per_seed = par::try_map_slice(&seeds, |&s| -> Result<(Rows, Vec<String>)> {
            let splits = split_all(&config, &others, s)?;
            let vocab = vocabulary(&config, &train_texts(&splits))?;
            let prepared = prepare(&config, &splits, &vocab)?;
            let base = config.fresh_model(vocab.size(), s)?;
            let result = loocv_run(&base, &prepared, &heldout, &vocab, &config.train_config(s))?;
            let dir = run.seed_dir(s)?;
            write_file(&dir.join("folds.jsonl"), &jsonl(&result.folds)?)?;
            let mut h = Vec::new();
            result.stage1_history.write_jsonl(&mut h)?;
            write_file(&dir.join("stage1_history.jsonl"), &h)?;
            let mut rows: Rows = result.folds.iter().map(|f| (f.event.clone(), f.report.clone())).collect();
            rows.push(("Average".into(), plain_report(result.average_accuracy, result.average_macro_f1)));
            write_seed_metrics(&dir, s, &rows)?;
            Ok((rows, result.stage1_tasks))
        })?;
        let extra = format!("stage-1 tasks: {} (held out: {task})\n", per_seed[0].1.join(", "));
        let rows: Vec<Rows> = per_seed.into_iter().map(|r| r.0).collect();
        write_summary(run, "Event", &average(&seeds, &rows)?, &extra)
    })
}

pub fn ablation(common: &Common, eval_task: &str, subsets: &[String]) -> Result<()> {
    let config = common.load_config()?;
    if subsets.is_empty() {
        bail!(UsageError("--subset: give at least one comma-separated task subset".into()));
    }
    let subsets: Vec<Vec<String>> = subsets
        .iter()
        .map(|s| s.split(',').map(|t| t.trim().to_string()).filter(|t| !t.is_empty()).collect())
        .collect();
    let mut names: Vec<String> = Vec::new();
    for t in subsets.iter().flatten() {
        if !names.contains(t) {
            names.push(t.clone());
        }
    }
    if let Some(s) = subsets.iter().find(|s| !s.iter().any(|t| t == eval_task)) {
        bail!(UsageError(format!("--subset {}: does not contain the evaluation task `{eval_task}`", s.join(","))));
    }
    let datasets = names.iter().map(|t| load_task(&config, t)).collect::<Result<Vec<_>>>()?;
    let seeds = common.seeds();
    let a = args(&[("eval_task", eval_task.to_string()), ("subsets", format!("{subsets:?}"))]);
    let run = common.start("ablation", &config, a, &[])?;
    finish(run, |run| {
        let per_seed = par::try_map_slice(&seeds, |&s| -> Result<Rows> {
            let splits = split_all(&config, &datasets, s)?;
            let vocab = vocabulary(&config, &train_texts(&splits))?;
            let prepared = prepare(&config, &splits, &vocab)?;
            let base = config.fresh_model(vocab.size(), s)?;
            let result = ablation_run(&base, &subsets, eval_task, &prepared, &config.train_config(s))?;
            let dir = run.seed_dir(s)?;
            write_file(&dir.join("rows.jsonl"), &jsonl(&result)?)?;
            let rows: Rows = result.into_iter().map(|r| (format!("{{{}}}", r.subset.join(", ")), r.report)).collect();
            write_seed_metrics(&dir, s, &rows)?;
            Ok(rows)
        })?;
        write_summary(run, "Task combination", &average(&seeds, &per_seed)?, &format!("evaluated on: {eval_task}\n"))
    })
}

pub fn eval(common: &Common, checkpoint: &Path, task: &str, which: &str) -> Result<()> {
    let config = common.load_config()?;
    if !["train", "validation", "test", "all"].contains(&which) {
        bail!(UsageError(format!("--split {which}: expected train, validation, test or all")));
    }
    let dataset = load_task(&config, task)?;
    let seeds = common.seeds();
    let ckpts = checkpoint_inputs(checkpoint, &seeds)?;
    let run =
        common.start("eval", &config, args(&[("task", task.to_string()), ("split", which.to_string())]), &ckpts)?;
    finish(run, |run| {
        let per_seed = par::try_map_slice(&seeds, |&s| -> Result<Rows> {
            let path = checkpoint_for(checkpoint, s)?;
            let (model, vocab) = load_checkpoint(&path)?;
            require_head(&model, task, &path)?;
            let part = if which == "all" {
                dataset.clone()
            } else {
                let sp = split(&dataset, config.split_ratios, s)?;
                match which {
                    "train" => sp.train,
                    "validation" => sp.validation,
                    _ => sp.test,
                }
            };
            let enc = EncodedSplit::encode(&part, &vocab, config.train.max_seq_len)?;
            let rows = vec![(task.to_string(), evaluate_task(&model, task, &enc)?)];
            write_seed_metrics(&run.seed_dir(s)?, s, &rows)?;
            Ok(rows)
        })?;
        write_summary(run, "Task", &average(&seeds, &per_seed)?, &format!("split: {which}\n"))
    })
}

pub fn validate_data(common: &Common) -> Result<()> {
    let config = common.load_config()?;
    let mut datasets = Vec::new();
    for task in config.data.keys() {
        let d = load_task(&config, task).with_context(|| format!("validating `{task}`"))?;
        datasets.push(d);
    }
    if config.aux_tasks {
        let extra = load_stage1(&config, None)?;
        datasets.extend(extra.into_iter().filter(|d| !config.data.contains_key(d.name())));
    }
    let refs: Vec<_> = datasets.iter().collect();
    print!("{}", class_count_table(&refs));
    println!("{} dataset(s) valid", datasets.len());
    Ok(())
}

pub struct SyntheticOptions {
    pub tasks: usize,
    pub examples: usize,
    pub unseen_examples: usize,
    pub p_shared: f64,
    pub events: usize,
}

pub fn gen_synthetic(common: &Common, opts: &SyntheticOptions) -> Result<()> {
    if opts.tasks < 1 {
        bail!(UsageError("--tasks: need at least one training task".into()));
    }
    let seed = common.seeds()[0];
    let mut tasks: Vec<SyntheticTask> =
        (1..=opts.tasks).map(|i| SyntheticTask::new(format!("t{i}"), opts.examples)).collect();
    tasks[0].events = opts.events;
    tasks.push(SyntheticTask::new("unseen", opts.unseen_examples));
    let spec = SyntheticSpec::new(tasks, opts.p_shared);
    let suite = generate_synthetic_suite(seed, &spec).map_err(|e| UsageError(e.to_string()))?;
    let out = &common.out;
    fs::create_dir_all(out).with_context(|| format!("creating {}", out.display()))?;
    let mut cfg = format!(
        "# synthetic suite (seed {seed}, p_shared {})\n# unseen is held out of stage 1; use it with `fewshot --task unseen`\n",
        opts.p_shared
    );
    let train_names: Vec<String> = suite.iter().take(opts.tasks).map(|d| d.name().to_string()).collect();
    cfg.push_str(&format!("tasks = {}\n", train_names.join(", ")));
    for d in &suite {
        let file = format!("{}.jsonl", d.name());
        d.save(&out.join(&file))?;
        let s = synthetic_task_spec(d.name());
        debug_assert_eq!(s.labels, [NEGATIVE, POSITIVE]);
        cfg.push_str(&format!(
            "data.{n} = {file}\nlabels.{n} = {NEGATIVE}, {POSITIVE}\npositive.{n} = {POSITIVE}\n",
            n = d.name()
        ));
    }
    cfg.push_str(
        "vocab_extra = unseen.jsonl\n\
         embed_dim = 16\nnum_layers = 2\nnum_heads = 2\nffn_dim = 32\nmax_seq_len = 32\n\
         learning_rate = 3e-3\nbatch_size = 16\nmax_epochs = 30\npatience = 10\n",
    );
    write_file(&out.join("config.txt"), cfg.as_bytes())?;
    let refs: Vec<_> = suite.iter().collect();
    print!("{}", class_count_table(&refs));
    println!("wrote {} datasets and config.txt to {}", suite.len(), out.display());
    Ok(())
}

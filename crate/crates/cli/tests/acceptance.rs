//! Acceptance suite: one pass/fail line per criterion, non-zero exit if any fails.

// `ensure!(a <= b)` must fail on NaN, hence negated comparisons.
#![allow(clippy::neg_cmp_op_on_partial_ord, clippy::needless_range_loop)]

use std::collections::BTreeSet;
use std::fs;
use std::path::{Path, PathBuf};
use std::process::Command;
use std::time::{Duration, Instant};

use rand::Rng as _;

use misinfo_mtl::checkpoint::{load_checkpoint, save_checkpoint};
use misinfo_mtl::data::{
    generate_synthetic_suite, leave_one_event_folds, split, Dataset, SyntheticSpec, SyntheticTask, DEFAULT_SPLIT_RATIOS,
};
use misinfo_mtl::encoder::{finite_difference_check, EncoderConfig, Mode, TextEncoder, TransformerEncoder};
use misinfo_mtl::evaluation::{
    ablation_run, accuracy, evaluate_task, fewshot_partition, fewshot_run, loocv_run, macro_f1, stage1, FewShotConfig,
    MetricsReport, PreparedTask, FEWSHOT_K,
};
use misinfo_mtl::multitask::{MultiTaskModel, TaskParams};
use misinfo_mtl::params::ParamTree;
use misinfo_mtl::seed;
use misinfo_mtl::tokenization::{build_vocab, encode_texts, Vocabulary};
use misinfo_mtl::training::{
    adam_step, finetune_task, lr_at, make_epoch_schedule, train_multitask, train_step, AdamConfig, AdamState,
    EarlyStopping, OptimizerState, TrainConfig, Verdict,
};

type Outcome = Result<String, String>;
type Criterion = (&'static str, fn() -> Outcome);

macro_rules! ensure {
    ($cond:expr, $($msg:tt)+) => {
        if !$cond {
            return Err(format!($($msg)+));
        }
    };
}

fn e<T, E: std::fmt::Display>(r: Result<T, E>) -> Result<T, String> {
    r.map_err(|e| e.to_string())
}

const SEEDS: [u64; 3] = [1, 2, 3];

fn small_encoder(vocab_size: usize, seed: u64) -> EncoderConfig {
    EncoderConfig {
        embed_dim: 16,
        num_layers: 2,
        num_heads: 2,
        ffn_dim: 32,
        max_seq_len: 32,
        ..EncoderConfig::desk_scale(vocab_size, seed)
    }
}

fn small_model(vocab_size: usize, seed: u64) -> Result<MultiTaskModel, String> {
    Ok(MultiTaskModel::new(e(TransformerEncoder::new(small_encoder(vocab_size, seed)))?))
}

fn small_train(seed: u64, max_epochs: usize, patience: usize) -> TrainConfig {
    TrainConfig {
        learning_rate: 3e-3,
        batch_size: 16,
        max_epochs,
        patience,
        max_seq_len: 32,
        seed,
        ..Default::default()
    }
}

/// Synthetic datasets and a vocabulary over all of their texts.
fn suite(seed: u64, tasks: Vec<SyntheticTask>, p_shared: f64) -> Result<(Vec<Dataset>, Vocabulary), String> {
    let ds = e(generate_synthetic_suite(seed, &SyntheticSpec::new(tasks, p_shared)))?;
    let texts: Vec<&str> = ds.iter().flat_map(|d| d.texts()).collect();
    let vocab = e(build_vocab(&texts, 1, 10_000))?;
    Ok((ds, vocab))
}

fn prepare(ds: &[Dataset], vocab: &Vocabulary, seed: u64) -> Result<Vec<PreparedTask>, String> {
    ds.iter().map(|d| e(PreparedTask::new(&e(split(d, DEFAULT_SPLIT_RATIOS, seed))?, vocab, 32))).collect()
}

fn names(tasks: &[PreparedTask]) -> Vec<String> {
    tasks.iter().map(|t| t.name().to_string()).collect()
}

fn within(start: Instant, limit: Duration, what: &str) -> Result<Duration, String> {
    let t = start.elapsed();
    ensure!(t < limit, "{what} took {:.1}s, limit {}s", t.as_secs_f64(), limit.as_secs());
    Ok(t)
}

fn gradient_correctness() -> Outcome {
    let start = Instant::now();
    let (ds, vocab) = suite(7, vec![SyntheticTask::new("a", 20), SyntheticTask::new("b", 20)], 0.5)?;
    let mut model = small_model(vocab.size(), 7)?;
    e(model.register_task(ds[0].spec().clone(), 7))?;
    let texts: Vec<&str> = ds[0].texts().into_iter().take(8).collect();
    let labels: Vec<usize> = ds[0].labels().into_iter().take(8).collect();
    let batch = e(encode_texts(&texts, &vocab, 32))?;
    let g = e(model.task_step_gradients("a", &batch, &labels, Mode::Eval, true))?;
    let analytic = TaskParams { encoder: g.encoder.ok_or("no encoder gradient")?, head: g.head };
    let params = e(model.task_params("a"))?;
    let r = e(finite_difference_check(
        &params,
        &analytic,
        |p| {
            let mut m = model.clone();
            m.set_task_params("a", p.clone())?;
            m.task_loss("a", &batch, &labels)
        },
        1e-4,
        300,
        11,
    ))?;
    let t = within(start, Duration::from_secs(60), "gradient check")?;
    ensure!(r.checked >= 200, "only {} parameters sampled", r.checked);
    ensure!(r.max_relative_error <= 1e-4, "max relative error {:.3e} at {:?}", r.max_relative_error, r.worst);
    Ok(format!("max rel err {:.2e} over {} params ({:.1}s)", r.max_relative_error, r.checked, t.as_secs_f64()))
}

/// Confusion matrix by scanning every (label, pred) cell against all pairs.
fn brute_confusion(preds: &[usize], labels: &[usize], k: usize) -> Vec<Vec<usize>> {
    let mut m = vec![vec![0; k]; k];
    for (l, row) in m.iter_mut().enumerate() {
        for (p, cell) in row.iter_mut().enumerate() {
            *cell = preds.iter().zip(labels).filter(|&(&pp, &ll)| pp == p && ll == l).count();
        }
    }
    m
}

fn brute_scores(preds: &[usize], labels: &[usize], k: usize) -> (f64, f64) {
    let m = brute_confusion(preds, labels, k);
    let correct: usize = (0..k).map(|c| m[c][c]).sum();
    let acc = correct as f64 / preds.len() as f64;
    let mut total = 0.0;
    for c in 0..k {
        let tp = m[c][c];
        let col: usize = (0..k).map(|l| m[l][c]).sum();
        let row: usize = m[c].iter().sum();
        let p = if col == 0 { 0.0 } else { tp as f64 / col as f64 };
        let r = if row == 0 { 0.0 } else { tp as f64 / row as f64 };
        total += if p + r == 0.0 { 0.0 } else { 2.0 * p * r / (p + r) };
    }
    (acc, total / k as f64)
}

fn metric_oracle() -> Outcome {
    let mut rng = seed::rng(2024, &[]);
    for case in 0..1000 {
        let k = rng.random_range(2..=5);
        let n = rng.random_range(1..=200);
        let preds: Vec<usize> = (0..n).map(|_| rng.random_range(0..k)).collect();
        let labels: Vec<usize> = (0..n).map(|_| rng.random_range(0..k)).collect();
        let (acc, f1) = brute_scores(&preds, &labels, k);
        let got_acc = e(accuracy(&preds, &labels))?;
        let got_f1 = e(macro_f1(&preds, &labels, k))?;
        let names: Vec<String> = (0..k).map(|c| format!("c{c}")).collect();
        let report = e(MetricsReport::compute(&preds, &labels, &names))?;
        ensure!(got_acc == acc && report.accuracy == acc, "case {case}: accuracy {got_acc} vs oracle {acc}");
        ensure!(got_f1 == f1 && report.macro_f1 == f1, "case {case}: macro-F1 {got_f1} vs oracle {f1}");
    }
    Ok("1000 random cases match exactly".into())
}

fn balanced_oversampling() -> Outcome {
    let sizes: Vec<(String, usize)> = [("newsbias", 7984), ("fakenews", 1627), ("rumor", 1705), ("clickbait", 19538)]
        .map(|(n, s)| (n.to_string(), s))
        .into();
    for s in [0u64, 1, 2, 3] {
        let sched = e(make_epoch_schedule(&sizes, 32, s))?;
        let counts: Vec<usize> = sizes.iter().map(|(n, _)| sched.batches_for(n)).collect();
        ensure!(counts.iter().all(|&c| c == 611), "seed {s}: batches per task {counts:?}");
        let drawn: Vec<usize> = sizes.iter().map(|(n, _)| sched.drawn_for(n)).collect();
        let spread = drawn.iter().max().unwrap() - drawn.iter().min().unwrap();
        ensure!(spread <= 32, "seed {s}: drawn counts {drawn:?}");
        ensure!(sched.batches.iter().all(|b| b.indices.len() <= 32), "seed {s}: batch larger than 32");
    }
    Ok("611 batches per task, drawn counts within 32".into())
}

fn head_isolation() -> Outcome {
    let s = 5;
    let (ds, vocab) =
        suite(s, vec![SyntheticTask::new("a", 60), SyntheticTask::new("b", 60), SyntheticTask::new("c", 60)], 0.5)?;
    let prepared = prepare(&ds, &vocab, s)?;
    let base = small_model(vocab.size(), s)?;
    let (trained, _) = e(stage1(&base, &prepared, &names(&prepared), &small_train(s, 2, 2)))?;

    let mut model = trained.clone();
    let mut opt = OptimizerState::new(model.encoder().params(), true);
    let texts: Vec<&str> = ds[0].texts().into_iter().take(16).collect();
    let b = e(encode_texts(&texts, &vocab, 32))?;
    let labels: Vec<usize> = ds[0].labels().into_iter().take(16).collect();
    e(train_step(&mut model, &mut opt, "a", &b, &labels, 1e-3, Mode::Train { seed: 9 }, &AdamConfig::default()))?;
    ensure!(e(model.head("a"))? != e(trained.head("a"))?, "the stepped head did not change");
    for other in ["b", "c"] {
        ensure!(e(model.head(other))? == e(trained.head(other))?, "head `{other}` changed after a step on `a`");
    }

    let dir = e(tempfile::tempdir())?;
    let path = dir.path().join("stage1.bin");
    e(save_checkpoint(&path, &trained, &vocab))?;
    let (loaded, _) = e(load_checkpoint(&path))?;
    let (tuned, _) = e(finetune_task(&loaded, "a", &prepared[0].data, &small_train(s, 2, 2)))?;
    for other in ["b", "c"] {
        let before = e(loaded.head(other))?;
        let after = e(tuned.head(other))?;
        let same = before.tensors().iter().zip(after.tensors()).all(|(x, y)| {
            x.data.len() == y.data.len() && x.data.iter().zip(y.data).all(|(p, q)| p.to_bits() == q.to_bits())
        });
        ensure!(same, "head `{other}` differs from the stage-1 checkpoint after fine-tuning `a`");
    }
    Ok("other heads bit-identical after a step and after fine-tuning".into())
}

fn optimizer_contracts() -> Outcome {
    let cfg = TrainConfig::default();
    let total = 611 * 4 * cfg.max_epochs;
    ensure!(e(lr_at(0, total, cfg.learning_rate))? == 5e-6, "lr_at(0) != 5e-6");
    ensure!(e(lr_at(total, total, cfg.learning_rate))? == 0.0, "lr_at(total) != 0");
    let mut prev = f64::INFINITY;
    for step in 0..=total {
        let lr = e(lr_at(step, total, cfg.learning_rate))?;
        ensure!(lr <= prev, "lr increases at step {step}");
        prev = lr;
    }

    let (_, vocab) = suite(3, vec![SyntheticTask::new("a", 10), SyntheticTask::new("b", 10)], 0.5)?;
    let model = small_model(vocab.size(), 3)?;
    let mut params = model.encoder().params().clone();
    let before = params.clone();
    let mut grads = params.clone();
    let mut rng = seed::rng(3, &[]);
    for t in grads.tensors_mut() {
        t.iter_mut().for_each(|x| *x = rng.random_range(-1.0..1.0));
    }
    let mut state = AdamState::new(&params);
    for _ in 0..3 {
        e(adam_step(&mut params, &grads, &mut state, 0.0, &AdamConfig::default()))?;
    }
    let same = params
        .tensors()
        .iter()
        .zip(before.tensors())
        .all(|(x, y)| x.data.iter().zip(y.data).all(|(p, q)| p.to_bits() == q.to_bits()));
    ensure!(same, "Adam with lr = 0 changed parameters");

    // random loss traces: stop exactly `patience` epochs after the best
    for trial in 0..200u64 {
        let patience = 1 + (trial as usize % 6);
        let mut es = EarlyStopping::new(patience);
        let mut r = seed::rng(trial, &[]);
        for epoch in 1..=cfg.max_epochs {
            let v = es.observe(r.random_range(0.0..1.0));
            ensure!(epoch - es.best_epoch() <= patience, "trace {trial}: {} epochs past best", epoch - es.best_epoch());
            if v == Verdict::Stop {
                ensure!(epoch - es.best_epoch() == patience, "trace {trial}: early stop at the wrong epoch");
                break;
            }
        }
    }

    // real runs under the default epoch budget and patience
    let mut details = Vec::new();
    for lr in [5e-6, 5e-2] {
        let (ds, vocab) = suite(4, vec![SyntheticTask::new("a", 60), SyntheticTask::new("b", 60)], 0.5)?;
        let prepared = prepare(&ds, &vocab, 4)?;
        let base = small_model(vocab.size(), 4)?;
        let config = TrainConfig { learning_rate: lr, batch_size: 16, max_seq_len: 32, seed: 4, ..Default::default() };
        let (_, h) = e(stage1(&base, &prepared, &names(&prepared), &config))?;
        let ran = h.epochs.len();
        ensure!(ran <= 15, "lr {lr}: ran {ran} epochs");
        ensure!(ran - h.best_epoch <= config.patience, "lr {lr}: stopped {} epochs past best", ran - h.best_epoch);
        details.push(format!("lr {lr:e}: {ran} epochs, best {}", h.best_epoch));
    }
    Ok(format!("lr schedule, Adam no-op and early stopping hold ({})", details.join("; ")))
}

fn learning_sanity() -> Outcome {
    let start = Instant::now();
    let mut worst = 1.0f64;
    for s in SEEDS {
        let (ds, vocab) = suite(s, vec![SyntheticTask::new("a", 200), SyntheticTask::new("b", 200)], 0.0)?;
        let prepared = prepare(&ds, &vocab, s)?;
        let base = small_model(vocab.size(), s)?;
        let (model, h) = e(stage1(&base, &prepared, &names(&prepared), &small_train(s, 50, 10)))?;
        ensure!(h.epochs.len() <= 50, "seed {s}: {} epochs", h.epochs.len());
        for p in &prepared {
            let acc = e(evaluate_task(&model, p.name(), &p.data.train))?.accuracy;
            ensure!(acc >= 0.95, "seed {s}: train accuracy on `{}` is {:.3}", p.name(), acc);
            worst = worst.min(acc);
        }
    }
    let t = within(start, Duration::from_secs(300), "learning sanity")?;
    Ok(format!("min train accuracy {:.1}% across 3 seeds ({:.1}s)", 100.0 * worst, t.as_secs_f64()))
}

fn transfer() -> Outcome {
    let start = Instant::now();
    let mut gaps = Vec::new();
    for s in SEEDS {
        let tasks = vec![
            SyntheticTask::new("t1", 200),
            SyntheticTask::new("t2", 200),
            SyntheticTask::new("t3", 200),
            SyntheticTask::new("unseen", 200),
        ];
        let (ds, vocab) = suite(s, tasks, 0.9)?;
        let prepared = prepare(&ds[..3], &vocab, s)?;
        let base = small_model(vocab.size(), s)?;
        let config = small_train(s, 30, 10);
        let (trained, _) = e(stage1(&base, &prepared, &names(&prepared), &config))?;
        let fs = FewShotConfig { k: 10, seed: s, adaptation: Default::default() };
        let mtl = e(fewshot_run(&trained, &ds[3], &vocab, &fs, &config))?.report.macro_f1;
        let fresh = e(fewshot_run(&base, &ds[3], &vocab, &fs, &config))?.report.macro_f1;
        gaps.push((mtl, fresh));
    }
    let t = within(start, Duration::from_secs(600), "transfer experiment")?;
    let gap = gaps.iter().map(|(a, b)| a - b).sum::<f64>() / gaps.len() as f64;
    let detail: Vec<String> = gaps.iter().map(|(a, b)| format!("{:.1} vs {:.1}", 100.0 * a, 100.0 * b)).collect();
    ensure!(gap >= 0.05, "mean macro-F1 gap {:.1} points ({})", 100.0 * gap, detail.join(", "));
    Ok(format!("mean gap {:.1} F1 points [{}] ({:.1}s)", 100.0 * gap, detail.join(", "), t.as_secs_f64()))
}

fn protocol_audits() -> Outcome {
    let s = 6;
    let tasks =
        vec![SyntheticTask::new("rumor", 180).with_events(9), SyntheticTask::new("b", 60), SyntheticTask::new("c", 60)];
    let (ds, vocab) = suite(s, tasks, 0.5)?;
    let prepared = prepare(&ds, &vocab, s)?;
    let base = small_model(vocab.size(), s)?;
    let config = small_train(s, 2, 2);

    // few-shot partitions
    for k in FEWSHOT_K {
        let (shots, rest) = e(fewshot_partition(ds[0].len(), k, s))?;
        ensure!(shots.len() == k && rest.len() == ds[0].len() - k, "k={k}: sizes {} / {}", shots.len(), rest.len());
        let a: BTreeSet<_> = shots.iter().collect();
        ensure!(rest.iter().all(|i| !a.contains(i)), "k={k}: shots overlap the test set");
        ensure!(a.len() + rest.len() == ds[0].len(), "k={k}: partition does not cover the data");
    }
    let out = e(fewshot_run(
        &base,
        &ds[1],
        &vocab,
        &FewShotConfig { k: 10, seed: s, adaptation: Default::default() },
        &config,
    ))?;
    ensure!(
        out.train_size == 10 && out.test_size == ds[1].len() - 10,
        "fewshot_run sizes {} / {}",
        out.train_size,
        out.test_size
    );

    // leave-one-event-out
    let folds = e(leave_one_event_folds(&ds[0]))?;
    for f in &folds {
        ensure!(
            f.test.examples().iter().all(|x| x.event.as_deref() == Some(f.event.as_str())),
            "fold {}: foreign test events",
            f.event
        );
        ensure!(
            f.train.examples().iter().all(|x| x.event.as_deref() != Some(f.event.as_str())),
            "fold {}: test event in training data",
            f.event
        );
    }
    let result = e(loocv_run(&base, &prepared, &ds[0], &vocab, &config))?;
    ensure!(result.folds.len() == 9, "{} folds", result.folds.len());
    ensure!(!result.stage1_tasks.iter().any(|t| t == "rumor"), "stage-1 tasks {:?} include rumor", result.stage1_tasks);
    for f in &result.folds {
        ensure!(!f.train_events.contains(&f.event), "fold {} trains on its own event", f.event);
    }

    // ablation singleton vs direct single-task training
    let rows = e(ablation_run(&base, &[vec!["b".to_string()]], "b", &prepared, &config))?;
    let mut direct = base.clone();
    e(direct.register_task(prepared[1].spec.clone(), config.seed))?;
    let (direct, history) = e(train_multitask(&direct, &[prepared[1].data.clone()], &config))?;
    let report = e(evaluate_task(&direct, "b", &prepared[1].test))?;
    ensure!(rows.len() == 1 && rows[0].stage2.is_none(), "singleton subset ran stage 2");
    ensure!(rows[0].report == report && rows[0].stage1 == history, "singleton ablation differs from direct training");
    Ok("few-shot k / N-k disjoint, 9 LOOCV folds without rumor in stage 1, singleton ablation equals direct".into())
}

fn cli(dir: &Path, args: &[&str]) -> Result<(), String> {
    let o = e(Command::new(env!("CARGO_BIN_EXE_misinfo-mtl")).current_dir(dir).args(args).output())?;
    ensure!(o.status.success(), "{:?} failed: {}", args, String::from_utf8_lossy(&o.stderr));
    Ok(())
}

fn files(root: &Path) -> Vec<PathBuf> {
    let mut out = Vec::new();
    let mut stack = vec![root.to_path_buf()];
    while let Some(d) = stack.pop() {
        for entry in fs::read_dir(&d).into_iter().flatten().flatten() {
            let p = entry.path();
            if p.is_dir() {
                stack.push(p);
            } else if p.file_name().is_some_and(|n| n != "manifest.json") {
                out.push(p.strip_prefix(root).unwrap().to_path_buf());
            }
        }
    }
    out.sort();
    out
}

fn determinism() -> Outcome {
    let tmp = e(tempfile::tempdir())?;
    let dir = tmp.path();
    cli(
        dir,
        &[
            "gen-synthetic",
            "--out",
            "syn",
            "--tasks",
            "2",
            "--examples",
            "80",
            "--unseen-examples",
            "60",
            "--events",
            "3",
        ],
    )?;
    let cfg = dir.join("syn/config.txt");
    let text = e(fs::read_to_string(&cfg))?
        .replace("max_epochs = 30", "max_epochs = 3")
        .replace("patience = 10", "patience = 3");
    e(fs::write(&cfg, text))?;
    let common = ["--config", "syn/config.txt", "--seed", "1", "--seed", "2"];
    let commands: Vec<Vec<&str>> = vec![
        vec!["train"],
        vec!["loocv", "--task", "t1"],
        vec!["ablation", "--eval-task", "t1", "--subset", "t1", "--subset", "t1,t2"],
        vec!["fewshot", "--fresh", "--task", "unseen", "--k", "10"],
    ];
    for out in ["a", "b"] {
        for c in &commands {
            let mut a = c.clone();
            a.extend(common);
            a.extend(["--out", out]);
            cli(dir, &a)?;
        }
    }
    let ckpt = fs::read_dir(dir.join("a"))
        .unwrap()
        .flatten()
        .map(|e| e.path())
        .find(|p| p.file_name().unwrap().to_string_lossy().starts_with("train-"))
        .ok_or("no train run")?;
    let ckpt = ckpt.to_string_lossy().into_owned();
    let downstream: Vec<Vec<&str>> = vec![
        vec!["finetune", "--checkpoint", &ckpt, "--task", "t2"],
        vec!["eval", "--checkpoint", &ckpt, "--task", "t1"],
        vec!["fewshot", "--checkpoint", &ckpt, "--task", "unseen", "--k", "10"],
    ];
    for out in ["a2", "b2"] {
        for c in &downstream {
            let mut a = c.clone();
            a.extend(common);
            a.extend(["--out", out]);
            cli(dir, &a)?;
        }
    }
    let mut compared = 0;
    for (x, y) in [("a", "b"), ("a2", "b2")] {
        let fa = files(&dir.join(x));
        let fb = files(&dir.join(y));
        ensure!(fa == fb, "{x} and {y} hold different files");
        for f in &fa {
            ensure!(
                e(fs::read(dir.join(x).join(f)))? == e(fs::read(dir.join(y).join(f)))?,
                "{} differs between reruns",
                f.display()
            );
            compared += 1;
        }
    }
    ensure!(compared > 0, "no outputs compared");
    Ok(format!("7 commands rerun, {compared} output files byte-identical"))
}

fn main() {
    let criteria: [Criterion; 9] = [
        ("gradient correctness", gradient_correctness),
        ("metric oracle equivalence", metric_oracle),
        ("balanced oversampling", balanced_oversampling),
        ("head isolation", head_isolation),
        ("optimizer and schedule contracts", optimizer_contracts),
        ("learning sanity", learning_sanity),
        ("few-shot transfer", transfer),
        ("protocol audits", protocol_audits),
        ("determinism", determinism),
    ];
    let only: Vec<usize> = std::env::args().skip(1).filter_map(|a| a.parse().ok()).collect();
    let mut failed = 0;
    for (i, (name, f)) in criteria.iter().enumerate() {
        let n = i + 1;
        if !only.is_empty() && !only.contains(&n) {
            continue;
        }
        match f() {
            Ok(detail) => println!("criterion {n} ({name}): PASS: {detail}"),
            Err(why) => {
                failed += 1;
                println!("criterion {n} ({name}): FAIL: {why}");
            }
        }
    }
    if failed > 0 {
        println!("{failed} criteria failed");
        std::process::exit(1);
    }
}

use std::collections::BTreeMap;
use std::io::Write;

use serde::{Deserialize, Serialize};

use super::optim::{adam_step, lr_at, AdamConfig, AdamState};
use super::schedule::{batches_per_task, make_epoch_schedule};
use super::TrainConfig;
use crate::data::Dataset;
use crate::encoder::{Mode, TextEncoder};
use crate::error::{Error, Result};
use crate::evaluation::{accuracy, macro_f1};
use crate::multitask::{argmax, cross_entropy, HeadParams, MultiTaskModel};
use crate::par;
use crate::params::ParamTree;
use crate::seed;
use crate::tokenization::{encode, pad_batch, Batch, TokenSequence, Vocabulary};

pub const GRID_LEARNING_RATES: [f64; 3] = [5e-5, 5e-6, 5e-7];
pub const GRID_BATCH_SIZES: [usize; 2] = [16, 32];

/// Rows per forward pass when scoring a whole split.
const EVAL_CHUNK: usize = 64;

/// Pre-tokenized examples of one split.
#[derive(Debug, Clone, PartialEq)]
pub struct EncodedSplit {
    pub seqs: Vec<TokenSequence>,
    pub labels: Vec<usize>,
}

impl EncodedSplit {
    pub fn encode(dataset: &Dataset, vocab: &Vocabulary, max_seq_len: usize) -> Result<Self> {
        let seqs = dataset.examples().iter().map(|e| encode(&e.text, vocab, max_seq_len)).collect::<Result<_>>()?;
        Ok(EncodedSplit { seqs, labels: dataset.labels() })
    }

    pub fn len(&self) -> usize {
        self.seqs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.seqs.is_empty()
    }

    pub fn subset(&self, indices: &[usize]) -> EncodedSplit {
        EncodedSplit {
            seqs: indices.iter().map(|&i| self.seqs[i].clone()).collect(),
            labels: indices.iter().map(|&i| self.labels[i]).collect(),
        }
    }

    fn batch(&self, indices: &[usize]) -> Result<(Batch, Vec<usize>)> {
        let seqs: Vec<TokenSequence> = indices.iter().map(|&i| self.seqs[i].clone()).collect();
        Ok((pad_batch(&seqs)?, indices.iter().map(|&i| self.labels[i]).collect()))
    }
}

/// One task's training and validation data.
#[derive(Debug, Clone, PartialEq)]
pub struct TaskData {
    pub task: String,
    pub train: EncodedSplit,
    pub validation: EncodedSplit,
}

impl TaskData {
    pub fn new(task: impl Into<String>, train: EncodedSplit, validation: EncodedSplit) -> Self {
        TaskData { task: task.into(), train, validation }
    }

    pub fn from_datasets(
        train: &Dataset,
        validation: &Dataset,
        vocab: &Vocabulary,
        max_seq_len: usize,
    ) -> Result<Self> {
        if train.name() != validation.name() {
            return Err(Error::invalid(format!(
                "train split is `{}` but validation is `{}`",
                train.name(),
                validation.name()
            )));
        }
        Ok(TaskData {
            task: train.name().to_string(),
            train: EncodedSplit::encode(train, vocab, max_seq_len)?,
            validation: EncodedSplit::encode(validation, vocab, max_seq_len)?,
        })
    }
}

/// Eval-mode mean cross-entropy and argmax predictions over a whole split.
pub fn evaluate_split<E: TextEncoder>(
    model: &MultiTaskModel<E>,
    task: &str,
    split: &EncodedSplit,
) -> Result<(f64, Vec<usize>)> {
    if split.is_empty() {
        return Err(Error::NoExamples);
    }
    let mut total = 0.0;
    let mut preds = Vec::with_capacity(split.len());
    let all: Vec<usize> = (0..split.len()).collect();
    for chunk in all.chunks(EVAL_CHUNK) {
        let (batch, labels) = split.batch(chunk)?;
        let logits = model.logits(task, &batch)?;
        total += cross_entropy(&logits, &labels).0 * chunk.len() as f64;
        preds.extend(logits.rows().into_iter().map(|r| argmax(r.iter().copied())));
    }
    Ok((total / split.len() as f64, preds))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Verdict {
    Improved,
    NoImprovement,
    Stop,
}

/// Stops once `patience` epochs pass without a strictly lower loss.
#[derive(Debug, Clone, PartialEq)]
pub struct EarlyStopping {
    patience: usize,
    epochs: usize,
    best: Option<(usize, f64)>,
}

impl EarlyStopping {
    pub fn new(patience: usize) -> Self {
        EarlyStopping { patience, epochs: 0, best: None }
    }

    pub fn observe(&mut self, loss: f64) -> Verdict {
        self.epochs += 1;
        match self.best {
            Some((_, b)) if loss >= b => {
                if self.epochs - self.best_epoch() >= self.patience {
                    Verdict::Stop
                } else {
                    Verdict::NoImprovement
                }
            }
            _ => {
                self.best = Some((self.epochs, loss));
                Verdict::Improved
            }
        }
    }

    /// 1-based epoch of the lowest loss so far, 0 before any observation.
    pub fn best_epoch(&self) -> usize {
        self.best.map_or(0, |b| b.0)
    }

    pub fn best_loss(&self) -> Option<f64> {
        self.best.map(|b| b.1)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum StopReason {
    Patience,
    MaxEpochs,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    /// Rate at the epoch's first step.
    pub learning_rate: f64,
    pub train_loss: BTreeMap<String, f64>,
    pub val_loss: BTreeMap<String, f64>,
    pub val_accuracy: BTreeMap<String, f64>,
    pub val_macro_f1: BTreeMap<String, f64>,
    /// Sum of `val_loss` over tasks; the early-stopping signal.
    pub selection_loss: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainHistory {
    pub tasks: Vec<String>,
    pub epochs: Vec<EpochRecord>,
    pub best_epoch: usize,
    pub stop_reason: StopReason,
    pub steps: usize,
    /// Training examples drawn per task, duplicates included.
    pub examples_seen: BTreeMap<String, usize>,
}

impl TrainHistory {
    pub fn best(&self) -> &EpochRecord {
        &self.epochs[self.best_epoch - 1]
    }

    /// One JSON object per epoch.
    pub fn write_jsonl<W: Write>(&self, mut w: W) -> Result<()> {
        for e in &self.epochs {
            serde_json::to_writer(&mut w, e)?;
            w.write_all(b"\n").map_err(|e| Error::io("<history>", e))?;
        }
        Ok(())
    }
}

/// Which parameters few-shot adaptation updates.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Adaptation {
    #[default]
    FullModel,
    HeadOnly,
}

impl std::fmt::Display for Adaptation {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            Adaptation::FullModel => "full_model",
            Adaptation::HeadOnly => "head_only",
        })
    }
}

impl std::str::FromStr for Adaptation {
    type Err = String;

    fn from_str(s: &str) -> std::result::Result<Self, String> {
        match s {
            "full" | "full_model" | "full-model" => Ok(Adaptation::FullModel),
            "head" | "head_only" | "head-only" => Ok(Adaptation::HeadOnly),
            other => Err(format!("unknown adaptation mode `{other}` (expected full_model or head_only)")),
        }
    }
}

/// Adam state per parameter group. Each head has its own state and step
/// counter and is only touched when its task steps.
#[derive(Debug, Clone)]
pub struct OptimizerState<P> {
    encoder: Option<AdamState<P>>,
    heads: BTreeMap<String, AdamState<HeadParams>>,
}

impl<P: ParamTree + Clone> OptimizerState<P> {
    /// With `train_encoder == false` the encoder is frozen.
    pub fn new(encoder: &P, train_encoder: bool) -> Self {
        OptimizerState { encoder: train_encoder.then(|| AdamState::new(encoder)), heads: BTreeMap::new() }
    }

    pub fn trains_encoder(&self) -> bool {
        self.encoder.is_some()
    }
}

/// One optimization step on a task-homogeneous batch: the encoder (unless
/// frozen) and `task`'s head move, nothing else. Returns the batch loss.
#[allow(clippy::too_many_arguments)]
pub fn train_step<E: TextEncoder>(
    model: &mut MultiTaskModel<E>,
    opt: &mut OptimizerState<E::Params>,
    task: &str,
    batch: &Batch,
    labels: &[usize],
    lr: f64,
    mode: Mode,
    adam: &AdamConfig,
) -> Result<f64> {
    let grads = model.task_step_gradients(task, batch, labels, mode, opt.trains_encoder())?;
    if let (Some(g), Some(state)) = (&grads.encoder, opt.encoder.as_mut()) {
        adam_step(model.encoder_mut().params_mut(), g, state, lr, adam)?;
    }
    let head = model.head_mut(task)?;
    if !opt.heads.contains_key(task) {
        opt.heads.insert(task.to_string(), AdamState::new(head));
    }
    let state = opt.heads.get_mut(task).expect("inserted above");
    adam_step(head, &grads.head, state, lr, adam)?;
    Ok(grads.loss)
}

fn run<E: TextEncoder>(
    model: &MultiTaskModel<E>,
    tasks: &[TaskData],
    config: &TrainConfig,
    train_encoder: bool,
) -> Result<(MultiTaskModel<E>, TrainHistory)> {
    config.validate()?;
    if tasks.is_empty() {
        return Err(Error::invalid("no tasks to train"));
    }
    for t in tasks {
        model.head(&t.task)?;
        if t.train.is_empty() {
            return Err(Error::invalid(format!("task `{}` has an empty train split", t.task)));
        }
        if t.validation.is_empty() {
            return Err(Error::invalid(format!("task `{}` has an empty validation split", t.task)));
        }
        if tasks.iter().filter(|o| o.task == t.task).count() > 1 {
            return Err(Error::DuplicateTask(t.task.clone()));
        }
    }
    let sizes: Vec<(String, usize)> = tasks.iter().map(|t| (t.task.clone(), t.train.len())).collect();
    let per_epoch = batches_per_task(&sizes, config.batch_size)? * tasks.len();
    let total_steps = per_epoch * config.max_epochs;
    let adam = config.adam();

    let mut model = model.clone();
    let mut opt = OptimizerState::new(model.encoder().params(), train_encoder);
    let mut stopper = EarlyStopping::new(config.patience);
    let mut best_model = model.clone();
    let mut epochs = Vec::new();
    let mut examples_seen: BTreeMap<String, usize> = tasks.iter().map(|t| (t.task.clone(), 0)).collect();
    let mut step = 0;
    let mut stop_reason = StopReason::MaxEpochs;

    for epoch in 0..config.max_epochs {
        let schedule = make_epoch_schedule(
            &sizes,
            config.batch_size,
            seed::derive_seed(config.seed, &[seed::hash_str("epoch"), epoch as u64]),
        )?;
        let epoch_lr = lr_at(step, total_steps, config.learning_rate)?;
        let mut loss_sum: BTreeMap<&str, (f64, usize)> = BTreeMap::new();
        for sb in &schedule.batches {
            let data = tasks.iter().find(|t| t.task == sb.task).expect("schedule only names known tasks");
            let (batch, labels) = data.train.batch(&sb.indices)?;
            let mode = Mode::Train { seed: seed::derive_seed(config.seed, &[seed::hash_str("step"), step as u64]) };
            let lr = lr_at(step, total_steps, config.learning_rate)?;
            let loss = train_step(&mut model, &mut opt, &sb.task, &batch, &labels, lr, mode, &adam)?;
            let acc = loss_sum.entry(sb.task.as_str()).or_insert((0.0, 0));
            acc.0 += loss * labels.len() as f64;
            acc.1 += labels.len();
            *examples_seen.get_mut(&sb.task).expect("initialized above") += labels.len();
            step += 1;
        }

        let scored = par::try_map_slice(tasks, |t| evaluate_split(&model, &t.task, &t.validation))?;
        let mut record = EpochRecord {
            epoch: epoch + 1,
            learning_rate: epoch_lr,
            train_loss: loss_sum.iter().map(|(k, (s, n))| (k.to_string(), s / *n as f64)).collect(),
            val_loss: BTreeMap::new(),
            val_accuracy: BTreeMap::new(),
            val_macro_f1: BTreeMap::new(),
            selection_loss: 0.0,
        };
        for (t, (loss, preds)) in tasks.iter().zip(scored) {
            let k = model.task_spec(&t.task)?.num_classes();
            record.val_loss.insert(t.task.clone(), loss);
            record.val_accuracy.insert(t.task.clone(), accuracy(&preds, &t.validation.labels)?);
            record.val_macro_f1.insert(t.task.clone(), macro_f1(&preds, &t.validation.labels, k)?);
            record.selection_loss += loss;
        }
        if !record.selection_loss.is_finite() {
            return Err(Error::NonFinite(format!("validation loss at epoch {}", epoch + 1)));
        }
        log::debug!("epoch {} selection loss {:.6}", epoch + 1, record.selection_loss);
        let verdict = stopper.observe(record.selection_loss);
        epochs.push(record);
        match verdict {
            Verdict::Improved => best_model = model.clone(),
            Verdict::NoImprovement => {}
            Verdict::Stop => {
                stop_reason = StopReason::Patience;
                break;
            }
        }
    }

    let history = TrainHistory {
        tasks: tasks.iter().map(|t| t.task.clone()).collect(),
        epochs,
        best_epoch: stopper.best_epoch(),
        stop_reason,
        steps: step,
        examples_seen,
    };
    Ok((best_model, history))
}

/// Stage 1: joint training of the encoder and every registered head.
///
/// `tasks` must cover exactly the model's registered tasks. Returns the
/// parameters of the epoch with the lowest summed validation loss.
pub fn train_multitask<E: TextEncoder>(
    model: &MultiTaskModel<E>,
    tasks: &[TaskData],
    config: &TrainConfig,
) -> Result<(MultiTaskModel<E>, TrainHistory)> {
    for name in model.task_names() {
        if !tasks.iter().any(|t| t.task == name) {
            return Err(Error::invalid(format!("registered task `{name}` has no training data")));
        }
    }
    run(model, tasks, config, true)
}

/// Stage 2: continues training the encoder and `task`'s head on that task
/// alone, selecting on its validation loss. Other heads are not touched.
pub fn finetune_task<E: TextEncoder>(
    model: &MultiTaskModel<E>,
    task: &str,
    data: &TaskData,
    config: &TrainConfig,
) -> Result<(MultiTaskModel<E>, TrainHistory)> {
    adapt_task(model, task, data, config, Adaptation::FullModel)
}

/// Single-task training with either the full model or only the head free.
pub fn adapt_task<E: TextEncoder>(
    model: &MultiTaskModel<E>,
    task: &str,
    data: &TaskData,
    config: &TrainConfig,
    adaptation: Adaptation,
) -> Result<(MultiTaskModel<E>, TrainHistory)> {
    model.head(task)?;
    if data.task != task {
        return Err(Error::invalid(format!("data is for `{}`, not `{task}`", data.task)));
    }
    run(model, std::slice::from_ref(data), config, adaptation == Adaptation::FullModel)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GridPoint {
    pub learning_rate: f64,
    pub batch_size: usize,
    pub best_epoch: usize,
    pub selection_loss: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct GridResult<E: TextEncoder> {
    pub config: TrainConfig,
    pub model: MultiTaskModel<E>,
    pub history: TrainHistory,
    pub points: Vec<GridPoint>,
}

/// Stage-1 training at every learning rate × batch size combination, keeping
/// the run with the lowest best-epoch validation loss (first on ties).
pub fn grid_search<E: TextEncoder>(
    model: &MultiTaskModel<E>,
    tasks: &[TaskData],
    base: &TrainConfig,
    learning_rates: &[f64],
    batch_sizes: &[usize],
) -> Result<GridResult<E>> {
    let configs: Vec<TrainConfig> = learning_rates
        .iter()
        .flat_map(|&lr| {
            batch_sizes.iter().map(move |&b| TrainConfig { learning_rate: lr, batch_size: b, ..base.clone() })
        })
        .collect();
    if configs.is_empty() {
        return Err(Error::invalid("empty grid"));
    }
    let runs = par::try_map_slice(&configs, |c| train_multitask(model, tasks, c))?;
    let points: Vec<GridPoint> = configs
        .iter()
        .zip(&runs)
        .map(|(c, (_, h))| GridPoint {
            learning_rate: c.learning_rate,
            batch_size: c.batch_size,
            best_epoch: h.best_epoch,
            selection_loss: h.best().selection_loss,
        })
        .collect();
    let best = (0..points.len())
        .reduce(|a, b| if points[b].selection_loss < points[a].selection_loss { b } else { a })
        .expect("grid is non-empty");
    let (model, history) = runs.into_iter().nth(best).expect("index in range");
    Ok(GridResult { config: configs[best].clone(), model, history, points })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn patience_trace() {
        let mut es = EarlyStopping::new(5);
        let verdicts: Vec<Verdict> = [3.0, 2.0, 2.0, 2.0, 2.0, 2.0, 2.0].iter().map(|&l| es.observe(l)).collect();
        assert_eq!(verdicts[..2], [Verdict::Improved, Verdict::Improved]);
        assert!(verdicts[2..6].iter().all(|v| *v == Verdict::NoImprovement));
        assert_eq!(verdicts[6], Verdict::Stop);
        assert_eq!(es.best_epoch(), 2);
    }

    #[test]
    fn zero_patience_stops_on_first_plateau() {
        let mut es = EarlyStopping::new(0);
        assert_eq!(es.observe(1.0), Verdict::Improved);
        assert_eq!(es.observe(1.0), Verdict::Stop);
    }

    #[test]
    fn adaptation_parses() {
        assert_eq!("head_only".parse::<Adaptation>().unwrap(), Adaptation::HeadOnly);
        assert_eq!("full".parse::<Adaptation>().unwrap(), Adaptation::FullModel);
        assert!("both".parse::<Adaptation>().is_err());
    }
}

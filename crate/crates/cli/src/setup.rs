//! Run configuration and dataset preparation.

use std::collections::BTreeMap;
use std::fs;
use std::io::{BufRead, BufReader};
use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use serde::Serialize;

use misinfo_mtl::config::KvConfig;
use misinfo_mtl::data::{catalog, derive_auxiliary, load_dataset, split, Dataset, FilterRules, SplitDataset};
use misinfo_mtl::encoder::{EncoderConfig, Pooling, TransformerEncoder};
use misinfo_mtl::evaluation::PreparedTask;
use misinfo_mtl::multitask::{Granularity, MultiTaskModel, TaskSpec, DEFAULT_HEAD_DROPOUT};
use misinfo_mtl::tokenization::{build_vocab, Vocabulary};
use misinfo_mtl::training::TrainConfig;

use crate::UsageError;

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct EncoderSettings {
    pub embed_dim: usize,
    pub num_layers: usize,
    pub num_heads: usize,
    pub ffn_dim: usize,
    pub dropout_rate: f64,
    pub pooling: Pooling,
}

/// Everything a config file can say, with defaults filled in.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct RunConfig {
    /// Stage-1 tasks.
    pub tasks: Vec<String>,
    /// Dataset file per task, resolved against the config's directory.
    pub data: BTreeMap<String, PathBuf>,
    pub specs: BTreeMap<String, TaskSpec>,
    pub aux_tasks: bool,
    pub split_ratios: [f64; 3],
    pub vocab_min_freq: usize,
    pub vocab_max_size: usize,
    /// Extra JSONL files whose texts (not labels) feed the vocabulary.
    pub vocab_extra: Vec<PathBuf>,
    pub encoder: EncoderSettings,
    pub head_dropout: f64,
    pub train: TrainConfig,
}

fn parse_granularity(task: &str, s: &str) -> Result<Granularity> {
    Ok(match s {
        "sentence" => Granularity::Sentence,
        "article" => Granularity::Article,
        "tweet" => Granularity::Tweet,
        "headline" => Granularity::Headline,
        other => bail!(UsageError(format!("granularity.{task}: unknown granularity `{other}`"))),
    })
}

impl RunConfig {
    pub fn load(path: &Path) -> Result<Self> {
        let text =
            fs::read_to_string(path).map_err(|e| UsageError(format!("cannot read config {}: {e}", path.display())))?;
        let base = path.parent().unwrap_or(Path::new("."));
        Self::parse(&text, base)
    }

    pub fn parse(text: &str, base: &Path) -> Result<Self> {
        let mut kv = KvConfig::parse(text)?;
        if kv.contains("seed") {
            bail!(UsageError("seed: set seeds with --seed, not in the config file".into()));
        }
        let data: BTreeMap<String, PathBuf> =
            kv.take_prefixed("data.").into_iter().map(|(t, p)| (t, base.join(p))).collect();
        let mut labels = kv.take_prefixed("labels.");
        let mut positive = kv.take_prefixed("positive.");
        let mut granularity = kv.take_prefixed("granularity.");
        let mut specs = BTreeMap::new();
        for task in data.keys() {
            let spec = match labels.remove(task) {
                Some(l) => {
                    let names: Vec<&str> = l.split(',').map(str::trim).filter(|s| !s.is_empty()).collect();
                    let g = granularity.remove(task).map(|g| parse_granularity(task, &g)).transpose()?;
                    let pos = positive.remove(task);
                    TaskSpec::new(task.as_str(), &names, g.unwrap_or(Granularity::Sentence), pos.as_deref())
                }
                None => catalog::spec(task).ok_or_else(|| {
                    UsageError(format!("data.{task}: unknown task `{task}`; give its classes with labels.{task}"))
                })?,
            };
            spec.validate().map_err(|e| UsageError(format!("labels.{task}: {e}")))?;
            specs.insert(task.clone(), spec);
        }
        for (prefix, left) in [("labels.", &labels), ("positive.", &positive), ("granularity.", &granularity)] {
            if let Some(t) = left.keys().next() {
                bail!(UsageError(format!("{prefix}{t}: no data.{t} entry for this task")));
            }
        }

        let tasks = kv.take_list("tasks").unwrap_or_default();
        for t in &tasks {
            if !data.contains_key(t) {
                bail!(UsageError(format!("tasks: `{t}` has no data.{t} entry")));
            }
        }
        let aux_tasks = kv.take_or("aux_tasks", false)?;
        if aux_tasks && !tasks.iter().any(|t| t == catalog::NEWSBIAS) {
            bail!(UsageError(format!("aux_tasks: needs `{}` among the tasks", catalog::NEWSBIAS)));
        }
        let split_ratios = match kv.take_list("split_ratios") {
            None => misinfo_mtl::data::DEFAULT_SPLIT_RATIOS,
            Some(v) => {
                let r: Vec<f64> = v
                    .iter()
                    .map(|x| x.parse::<f64>())
                    .collect::<std::result::Result<_, _>>()
                    .map_err(|e| UsageError(format!("split_ratios: {e}")))?;
                <[f64; 3]>::try_from(r).map_err(|_| UsageError("split_ratios: expected three values".into()))?
            }
        };
        let vocab_extra = kv.take_list("vocab_extra").unwrap_or_default().into_iter().map(|p| base.join(p)).collect();
        let encoder = EncoderSettings {
            embed_dim: kv.take_or("embed_dim", 64)?,
            num_layers: kv.take_or("num_layers", 2)?,
            num_heads: kv.take_or("num_heads", 4)?,
            ffn_dim: kv.take_or("ffn_dim", 128)?,
            dropout_rate: kv.take_or("dropout_rate", 0.1)?,
            pooling: kv.take_or("pooling", Pooling::Cls)?,
        };
        let config = RunConfig {
            tasks,
            data,
            specs,
            aux_tasks,
            split_ratios,
            vocab_min_freq: kv.take_or("vocab_min_freq", 1)?,
            vocab_max_size: kv.take_or("vocab_max_size", 30_000)?,
            vocab_extra,
            encoder,
            head_dropout: kv.take_or("head_dropout", DEFAULT_HEAD_DROPOUT)?,
            train: TrainConfig::from_kv(&mut kv)?,
        };
        kv.finish()?;
        // surface encoder mistakes as config errors before any data is read
        config.encoder_config(100, 0)?;
        Ok(config)
    }

    pub fn encoder_config(&self, vocab_size: usize, seed: u64) -> Result<EncoderConfig> {
        let e = &self.encoder;
        let c = EncoderConfig {
            vocab_size,
            embed_dim: e.embed_dim,
            num_layers: e.num_layers,
            num_heads: e.num_heads,
            ffn_dim: e.ffn_dim,
            max_seq_len: self.train.max_seq_len,
            dropout_rate: e.dropout_rate,
            pooling: e.pooling,
            seed,
        };
        c.validate()?;
        Ok(c)
    }

    /// Freshly initialized model with no heads.
    pub fn fresh_model(&self, vocab_size: usize, seed: u64) -> Result<MultiTaskModel> {
        let enc = TransformerEncoder::new(self.encoder_config(vocab_size, seed)?)?;
        Ok(MultiTaskModel::new(enc).with_head_dropout(self.head_dropout)?)
    }

    pub fn train_config(&self, seed: u64) -> TrainConfig {
        self.train.clone().with_seed(seed)
    }

    pub fn spec(&self, task: &str) -> Result<&TaskSpec> {
        self.specs
            .get(task)
            .ok_or_else(|| UsageError(format!("task `{task}` has no data.{task} entry in the config")).into())
    }

    /// Every input file the config references.
    pub fn input_files(&self) -> Vec<PathBuf> {
        self.data.values().chain(&self.vocab_extra).cloned().collect()
    }
}

/// Loads `task`'s dataset with the standard filter rules.
pub fn load_task(config: &RunConfig, task: &str) -> Result<Dataset> {
    let spec = config.spec(task)?;
    let path = &config.data[task];
    if !path.exists() {
        bail!(UsageError(format!("data.{task}: dataset file {} does not exist", path.display())));
    }
    Ok(load_dataset(path, spec, &FilterRules::for_task(task))?)
}

/// Stage-1 datasets, with the derived auxiliary tasks appended when enabled.
pub fn load_stage1(config: &RunConfig, exclude: Option<&str>) -> Result<Vec<Dataset>> {
    let mut out = Vec::new();
    for t in config.tasks.iter().filter(|t| Some(t.as_str()) != exclude) {
        out.push(load_task(config, t)?);
    }
    if config.aux_tasks {
        if let Some(nb) = out.iter().find(|d| d.name() == catalog::NEWSBIAS) {
            let (bias, polarity) = derive_auxiliary(nb)?;
            out.push(bias);
            out.push(polarity);
        }
    }
    Ok(out)
}

pub fn split_all(config: &RunConfig, datasets: &[Dataset], seed: u64) -> Result<Vec<SplitDataset>> {
    datasets
        .iter()
        .map(|d| split(d, config.split_ratios, seed).with_context(|| format!("splitting `{}`", d.name())))
        .collect()
}

fn extra_texts(path: &Path) -> Result<Vec<String>> {
    if !path.exists() {
        bail!(UsageError(format!("vocab_extra: file {} does not exist", path.display())));
    }
    let f = fs::File::open(path).with_context(|| format!("opening {}", path.display()))?;
    let mut out = Vec::new();
    for (i, line) in BufReader::new(f).lines().enumerate() {
        let line = line.with_context(|| format!("reading {}", path.display()))?;
        if line.trim().is_empty() {
            continue;
        }
        let v: serde_json::Value =
            serde_json::from_str(&line).with_context(|| format!("{}:{}: invalid JSON", path.display(), i + 1))?;
        match v.get("text").and_then(|t| t.as_str()) {
            Some(t) => out.push(t.to_string()),
            None => bail!("{}:{}: record has no `text` field", path.display(), i + 1),
        }
    }
    Ok(out)
}

/// Vocabulary over the given training texts plus `vocab_extra`.
pub fn vocabulary(config: &RunConfig, train_texts: &[&str]) -> Result<Vocabulary> {
    let mut texts: Vec<String> = train_texts.iter().map(|s| s.to_string()).collect();
    for p in &config.vocab_extra {
        texts.extend(extra_texts(p)?);
    }
    Ok(build_vocab(&texts, config.vocab_min_freq, config.vocab_max_size)?)
}

pub fn prepare(config: &RunConfig, splits: &[SplitDataset], vocab: &Vocabulary) -> Result<Vec<PreparedTask>> {
    splits.iter().map(|s| Ok(PreparedTask::new(s, vocab, config.train.max_seq_len)?)).collect()
}

pub fn train_texts(splits: &[SplitDataset]) -> Vec<&str> {
    splits.iter().flat_map(|s| s.train.texts()).collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn parses_full_config() {
        let c = RunConfig::parse(
            "tasks = rumor, t1\ndata.rumor = r.jsonl\ndata.t1 = t1.jsonl\nlabels.t1 = negative, positive\n\
             positive.t1 = positive\nembed_dim = 16\nnum_heads = 2\nlearning_rate = 1e-3\n",
            Path::new("/cfg"),
        )
        .unwrap();
        assert_eq!(c.tasks, ["rumor", "t1"]);
        assert_eq!(c.data["t1"], PathBuf::from("/cfg/t1.jsonl"));
        assert_eq!(c.specs["rumor"].labels, ["true", "false"]);
        assert_eq!(c.specs["t1"].positive_index(), Some(1));
        assert_eq!(c.train.learning_rate, 1e-3);
        assert_eq!(c.encoder.embed_dim, 16);
    }

    #[test]
    fn errors_name_the_key() {
        let err = |t: &str| RunConfig::parse(t, Path::new(".")).unwrap_err().to_string();
        assert!(err("bogus_key = 1").contains("bogus_key"));
        assert!(err("tasks = x").contains("data.x"));
        assert!(err("data.x = x.jsonl").contains("labels.x"));
        assert!(err("seed = 3").contains("--seed"));
        assert!(
            err("embed_dim = 10\nnum_heads = 4").contains("embed_dim")
                || err("embed_dim = 10\nnum_heads = 4").contains("num_heads")
        );
        assert!(err("learning_rate = 0").contains("learning_rate"));
    }
}

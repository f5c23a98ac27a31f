//! Two-stage training: joint multi-task optimization with balanced
//! oversampling, then per-task fine-tuning.

mod optim;
mod schedule;
mod trainer;

use serde::{Deserialize, Serialize};

pub use optim::{adam_step, lr_at, AdamConfig, AdamState};
pub use schedule::{batches_per_task, make_epoch_schedule, EpochSchedule, ScheduledBatch};
pub use trainer::{
    adapt_task, evaluate_split, finetune_task, grid_search, train_multitask, train_step, Adaptation, EarlyStopping,
    EncodedSplit, EpochRecord, GridPoint, GridResult, OptimizerState, StopReason, TaskData, TrainHistory, Verdict,
    GRID_BATCH_SIZES, GRID_LEARNING_RATES,
};

use crate::config::KvConfig;
use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LrSchedule {
    #[default]
    LinearDecay,
}

impl std::str::FromStr for LrSchedule {
    type Err = String;

    fn from_str(s: &str) -> std::result::Result<Self, String> {
        match s {
            "linear_decay" | "linear-decay" => Ok(LrSchedule::LinearDecay),
            other => Err(format!("unknown schedule `{other}` (only linear_decay is supported)")),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub learning_rate: f64,
    pub batch_size: usize,
    pub max_epochs: usize,
    pub patience: usize,
    pub max_seq_len: usize,
    pub seed: u64,
    pub lr_schedule: LrSchedule,
    pub adam_beta1: f64,
    pub adam_beta2: f64,
    pub adam_epsilon: f64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            learning_rate: 5e-6,
            batch_size: 32,
            max_epochs: 15,
            patience: 5,
            max_seq_len: 128,
            seed: 0,
            lr_schedule: LrSchedule::LinearDecay,
            adam_beta1: 0.9,
            adam_beta2: 0.999,
            adam_epsilon: 1e-8,
        }
    }
}

impl TrainConfig {
    pub fn with_seed(mut self, seed: u64) -> Self {
        self.seed = seed;
        self
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.learning_rate > 0.0 && self.learning_rate.is_finite()) {
            return Err(Error::config("learning_rate", "must be a finite value > 0"));
        }
        if self.batch_size == 0 {
            return Err(Error::config("batch_size", "must be at least 1"));
        }
        if self.max_epochs == 0 {
            return Err(Error::config("max_epochs", "must be at least 1"));
        }
        if self.patience > self.max_epochs {
            return Err(Error::config("patience", "must not exceed max_epochs"));
        }
        if self.max_seq_len < 2 {
            return Err(Error::config("max_seq_len", "must be at least 2"));
        }
        if !(0.0..1.0).contains(&self.adam_beta1) {
            return Err(Error::config("adam_beta1", "must lie in [0, 1)"));
        }
        if !(0.0..1.0).contains(&self.adam_beta2) {
            return Err(Error::config("adam_beta2", "must lie in [0, 1)"));
        }
        if self.adam_epsilon.is_nan() || self.adam_epsilon <= 0.0 {
            return Err(Error::config("adam_epsilon", "must be > 0"));
        }
        Ok(())
    }

    pub fn adam(&self) -> AdamConfig {
        AdamConfig { beta1: self.adam_beta1, beta2: self.adam_beta2, epsilon: self.adam_epsilon }
    }

    /// Defaults overridden by whichever training keys `kv` holds; those keys
    /// are consumed.
    pub fn from_kv(kv: &mut KvConfig) -> Result<Self> {
        let d = TrainConfig::default();
        let c = TrainConfig {
            learning_rate: kv.take_or("learning_rate", d.learning_rate)?,
            batch_size: kv.take_or("batch_size", d.batch_size)?,
            max_epochs: kv.take_or("max_epochs", d.max_epochs)?,
            patience: kv.take_or("patience", d.patience)?,
            max_seq_len: kv.take_or("max_seq_len", d.max_seq_len)?,
            seed: kv.take_or("seed", d.seed)?,
            lr_schedule: kv.take_or("lr_schedule", d.lr_schedule)?,
            adam_beta1: kv.take_or("adam_beta1", d.adam_beta1)?,
            adam_beta2: kv.take_or("adam_beta2", d.adam_beta2)?,
            adam_epsilon: kv.take_or("adam_epsilon", d.adam_epsilon)?,
        };
        c.validate()?;
        Ok(c)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn defaults() {
        let c = TrainConfig::default();
        assert_eq!((c.learning_rate, c.batch_size, c.max_epochs, c.patience, c.max_seq_len), (5e-6, 32, 15, 5, 128));
        assert_eq!((c.adam_beta1, c.adam_beta2, c.adam_epsilon), (0.9, 0.999, 1e-8));
        assert_eq!(c.lr_schedule, LrSchedule::LinearDecay);
        c.validate().unwrap();
    }

    #[test]
    fn invariants() {
        let bad_lr = TrainConfig { learning_rate: 0.0, ..Default::default() };
        assert!(bad_lr.validate().unwrap_err().to_string().contains("learning_rate"));
        let bad_p = TrainConfig { patience: 16, ..Default::default() };
        assert!(bad_p.validate().unwrap_err().to_string().contains("patience"));
    }

    #[test]
    fn kv_overrides() {
        let mut kv =
            KvConfig::parse("learning_rate = 1e-3\nmax_epochs = 4\npatience = 2\nlr_schedule = linear_decay").unwrap();
        let c = TrainConfig::from_kv(&mut kv).unwrap();
        assert_eq!((c.learning_rate, c.max_epochs, c.patience, c.batch_size), (1e-3, 4, 2, 32));
        kv.finish().unwrap();
        let mut bad = KvConfig::parse("batch_size = -1").unwrap();
        assert!(TrainConfig::from_kv(&mut bad).unwrap_err().to_string().contains("batch_size"));
    }
}

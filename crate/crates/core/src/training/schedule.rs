use rand::seq::SliceRandom;
use rand::Rng as _;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::seed;

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ScheduledBatch {
    pub task: String,
    pub indices: Vec<usize>,
}

/// One epoch's task-homogeneous batches in execution order.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct EpochSchedule {
    pub batches: Vec<ScheduledBatch>,
}

impl EpochSchedule {
    pub fn len(&self) -> usize {
        self.batches.len()
    }

    pub fn is_empty(&self) -> bool {
        self.batches.is_empty()
    }

    /// Number of batches belonging to `task`.
    pub fn batches_for(&self, task: &str) -> usize {
        self.batches.iter().filter(|b| b.task == task).count()
    }

    /// Total examples drawn for `task`.
    pub fn drawn_for(&self, task: &str) -> usize {
        self.batches.iter().filter(|b| b.task == task).map(|b| b.indices.len()).sum()
    }
}

/// Batches per epoch for every task: `⌈max size / batch_size⌉`.
pub fn batches_per_task(sizes: &[(String, usize)], batch_size: usize) -> Result<usize> {
    check(sizes, batch_size)?;
    let largest = sizes.iter().map(|(_, n)| *n).max().unwrap_or(0);
    Ok(largest.div_ceil(batch_size))
}

fn check(sizes: &[(String, usize)], batch_size: usize) -> Result<()> {
    if sizes.is_empty() {
        return Err(Error::invalid("empty task set"));
    }
    if batch_size == 0 {
        return Err(Error::invalid("batch_size must be at least 1"));
    }
    if let Some((t, _)) = sizes.iter().find(|(_, n)| *n == 0) {
        return Err(Error::invalid(format!("task `{t}` has no training examples")));
    }
    Ok(())
}

/// Balanced oversampling schedule.
///
/// Every task draws `N*` examples, `N*` being the largest size. Tasks of size
/// `N*` draw a permutation; smaller tasks draw uniformly with replacement.
/// Draws are chunked into batches of `batch_size` (the last may be short) and
/// the batches of all tasks are shuffled together.
pub fn make_epoch_schedule(sizes: &[(String, usize)], batch_size: usize, seed: u64) -> Result<EpochSchedule> {
    let per_task = batches_per_task(sizes, batch_size)?;
    let largest = sizes.iter().map(|(_, n)| *n).max().unwrap_or(0);
    let mut batches = Vec::with_capacity(per_task * sizes.len());
    for (name, n) in sizes {
        let mut rng = seed::rng(seed, &[seed::hash_str("schedule"), seed::hash_str(name)]);
        let draws: Vec<usize> = if *n == largest {
            let mut p: Vec<usize> = (0..*n).collect();
            p.shuffle(&mut rng);
            p
        } else {
            (0..largest).map(|_| rng.random_range(0..*n)).collect()
        };
        batches.extend(draws.chunks(batch_size).map(|c| ScheduledBatch { task: name.clone(), indices: c.to_vec() }));
    }
    batches.shuffle(&mut seed::rng(seed, &[seed::hash_str("schedule-order")]));
    Ok(EpochSchedule { batches })
}

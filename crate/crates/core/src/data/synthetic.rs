//! Synthetic misinformation-like tasks for desk-scale experiments.
//!
//! Texts are random filler words. Positive examples additionally carry
//! task-specific marker words and, with probability `p_shared`, words from a
//! lexicon common to all tasks. That common lexicon is the latent feature the
//! tasks share; with `p_shared = 0` the tasks are independent. Marker
//! insertion is the only step that looks at the label, and negatives never
//! contain marker or shared words, so every task is linearly separable on
//! bag-of-words features.

use rand::seq::SliceRandom;
use rand::Rng as _;

use super::{Dataset, Example};
use crate::error::{Error, Result};
use crate::multitask::{Granularity, TaskSpec};
use crate::seed;

pub const NEGATIVE: &str = "negative";
pub const POSITIVE: &str = "positive";

#[derive(Debug, Clone, PartialEq)]
pub struct SyntheticTask {
    pub name: String,
    pub examples: usize,
    /// Number of events to tag examples with; 0 leaves `event` unset.
    pub events: usize,
}

impl SyntheticTask {
    pub fn new(name: impl Into<String>, examples: usize) -> Self {
        SyntheticTask { name: name.into(), examples, events: 0 }
    }

    pub fn with_events(mut self, events: usize) -> Self {
        self.events = events;
        self
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SyntheticSpec {
    pub tasks: Vec<SyntheticTask>,
    /// Distinct label-independent filler words.
    pub filler_vocab: usize,
    /// Pool from which each task takes a disjoint block of markers.
    pub marker_vocab: usize,
    pub markers_per_task: usize,
    /// Size of the lexicon shared by all tasks' positives.
    pub shared_lexicon: usize,
    pub p_shared: f64,
    /// Marker (and shared) words inserted into each positive.
    pub markers_per_example: usize,
    pub min_len: usize,
    pub max_len: usize,
    /// Topic words inserted into every example of an event.
    pub event_topic_words: usize,
}

impl SyntheticSpec {
    /// Small texts, a 120-word filler vocabulary and four markers per task.
    pub fn new(tasks: Vec<SyntheticTask>, p_shared: f64) -> Self {
        SyntheticSpec {
            marker_vocab: 4 * tasks.len(),
            tasks,
            filler_vocab: 120,
            markers_per_task: 4,
            shared_lexicon: 6,
            p_shared,
            markers_per_example: 1,
            min_len: 6,
            max_len: 12,
            event_topic_words: 2,
        }
    }

    fn validate(&self) -> Result<()> {
        if self.tasks.len() < 2 {
            return Err(Error::invalid("a synthetic suite needs at least two tasks"));
        }
        if !(0.0..=1.0).contains(&self.p_shared) {
            return Err(Error::invalid("p_shared must lie in [0, 1]"));
        }
        if self.filler_vocab == 0 || self.markers_per_task == 0 || self.markers_per_example == 0 {
            return Err(Error::invalid("filler_vocab, markers_per_task and markers_per_example must be ≥ 1"));
        }
        if self.p_shared > 0.0 && self.shared_lexicon == 0 {
            return Err(Error::invalid("p_shared > 0 needs a non-empty shared lexicon"));
        }
        if self.min_len == 0 || self.min_len > self.max_len {
            return Err(Error::invalid("need 1 ≤ min_len ≤ max_len"));
        }
        if self.tasks.len() * self.markers_per_task > self.marker_vocab {
            return Err(Error::invalid(format!(
                "vocab too small for disjoint marker sets: {} tasks × {} markers > {}",
                self.tasks.len(),
                self.markers_per_task,
                self.marker_vocab
            )));
        }
        for t in &self.tasks {
            if t.examples < 2 {
                return Err(Error::invalid(format!("task `{}` needs at least two examples", t.name)));
            }
        }
        Ok(())
    }
}

pub fn synthetic_task_spec(name: &str) -> TaskSpec {
    TaskSpec::new(name, &[NEGATIVE, POSITIVE], Granularity::Sentence, Some(POSITIVE))
}

pub fn filler_word(i: usize) -> String {
    format!("w{i}")
}

pub fn marker_word(i: usize) -> String {
    format!("mk{i}")
}

pub fn shared_word(i: usize) -> String {
    format!("sens{i}")
}

pub fn event_name(e: usize) -> String {
    format!("event{e:02}")
}

fn topic_word(event: usize, j: usize) -> String {
    format!("topic{event}x{j}")
}

/// Marker words owned by task number `t` of the suite.
pub fn task_markers(spec: &SyntheticSpec, t: usize) -> Vec<String> {
    (t * spec.markers_per_task..(t + 1) * spec.markers_per_task).map(marker_word).collect()
}

/// One dataset per task, in spec order. Classes are balanced: `n/2`
/// positives (rounded down) and the rest negatives.
pub fn generate_synthetic_suite(seed: u64, spec: &SyntheticSpec) -> Result<Vec<Dataset>> {
    spec.validate()?;
    spec.tasks
        .iter()
        .enumerate()
        .map(|(t, task)| {
            let mut rng = seed::rng(seed, &[seed::hash_str("synthetic"), seed::hash_str(&task.name)]);
            let markers = task_markers(spec, t);
            let n_pos = task.examples / 2;
            let mut labels: Vec<bool> = (0..task.examples).map(|i| i < n_pos).collect();
            labels.shuffle(&mut rng);
            let examples = labels
                .iter()
                .enumerate()
                .map(|(i, &positive)| {
                    let len = rng.random_range(spec.min_len..=spec.max_len);
                    let mut words: Vec<String> =
                        (0..len).map(|_| filler_word(rng.random_range(0..spec.filler_vocab))).collect();
                    let event = (task.events > 0).then(|| i % task.events);
                    let mut insert = |w: String, rng: &mut seed::Rng| {
                        let at = rng.random_range(0..=words.len());
                        words.insert(at, w);
                    };
                    if let Some(e) = event {
                        for j in 0..spec.event_topic_words {
                            insert(topic_word(e, j), &mut rng);
                        }
                    }
                    if positive {
                        for _ in 0..spec.markers_per_example {
                            let m = markers[rng.random_range(0..markers.len())].clone();
                            insert(m, &mut rng);
                        }
                        if spec.p_shared > 0.0 && rng.random::<f64>() < spec.p_shared {
                            for _ in 0..spec.markers_per_example {
                                insert(shared_word(rng.random_range(0..spec.shared_lexicon)), &mut rng);
                            }
                        }
                    }
                    let label = if positive { POSITIVE } else { NEGATIVE };
                    let ex = Example::new(format!("{}-{i:05}", task.name), words.join(" "), &task.name, label);
                    match event {
                        Some(e) => ex.with_event(event_name(e)),
                        None => ex,
                    }
                })
                .collect();
            Dataset::new(synthetic_task_spec(&task.name), examples)
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tokenization::tokenize;

    fn suite(p_shared: f64) -> SyntheticSpec {
        SyntheticSpec::new(vec![SyntheticTask::new("a", 200), SyntheticTask::new("b", 101).with_events(3)], p_shared)
    }

    #[test]
    fn balanced_classes() {
        let ds = generate_synthetic_suite(1, &suite(0.5)).unwrap();
        assert_eq!(ds[0].class_counts(), [100, 100]);
        assert_eq!(ds[1].class_counts(), [51, 50]);
    }

    #[test]
    fn deterministic_per_seed() {
        assert_eq!(
            generate_synthetic_suite(3, &suite(0.9)).unwrap(),
            generate_synthetic_suite(3, &suite(0.9)).unwrap()
        );
        assert_ne!(
            generate_synthetic_suite(3, &suite(0.9)).unwrap(),
            generate_synthetic_suite(4, &suite(0.9)).unwrap()
        );
    }

    #[test]
    fn marker_insertion_is_the_only_label_dependent_step() {
        let spec = suite(0.9);
        let ds = generate_synthetic_suite(7, &spec).unwrap();
        for (t, d) in ds.iter().enumerate() {
            let own = task_markers(&spec, t);
            for ex in d.examples() {
                let toks = tokenize(&ex.text);
                let has_marker = toks.iter().any(|w| w.starts_with("mk"));
                let has_shared = toks.iter().any(|w| w.starts_with("sens"));
                if ex.label == POSITIVE {
                    assert!(toks.iter().any(|w| own.contains(w)));
                    assert!(toks.iter().filter(|w| w.starts_with("mk")).all(|w| own.contains(w)));
                } else {
                    assert!(!has_marker && !has_shared, "{}", ex.text);
                }
            }
        }
        assert!(ds[1].examples().iter().all(|e| e.event.is_some()));
        assert!(ds[0].examples().iter().all(|e| e.event.is_none()));
    }

    #[test]
    fn shared_rate_tracks_p_shared() {
        let spec = SyntheticSpec::new(vec![SyntheticTask::new("a", 2000), SyntheticTask::new("b", 10)], 0.9);
        let ds = generate_synthetic_suite(1, &spec).unwrap();
        let pos: Vec<_> = ds[0].examples().iter().filter(|e| e.label == POSITIVE).collect();
        let with = pos.iter().filter(|e| e.text.contains("sens")).count() as f64 / pos.len() as f64;
        assert!((with - 0.9).abs() < 0.03, "{with}");
        let none = generate_synthetic_suite(1, &SyntheticSpec { p_shared: 0.0, ..spec }).unwrap();
        assert!(none[0].examples().iter().all(|e| !e.text.contains("sens")));
    }

    #[test]
    fn marker_pool_too_small() {
        let spec = SyntheticSpec { marker_vocab: 5, ..suite(0.0) };
        let err = generate_synthetic_suite(1, &spec).unwrap_err();
        assert!(err.to_string().contains("vocab too small"));
        let one = SyntheticSpec::new(vec![SyntheticTask::new("a", 10)], 0.0);
        assert!(generate_synthetic_suite(1, &one).is_err());
    }
}

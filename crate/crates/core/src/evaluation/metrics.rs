use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

fn check(preds: &[usize], labels: &[usize]) -> Result<()> {
    if preds.len() != labels.len() {
        return Err(Error::Shape(format!("{} predictions for {} labels", preds.len(), labels.len())));
    }
    if preds.is_empty() {
        return Err(Error::invalid("metrics need at least one prediction"));
    }
    Ok(())
}

/// `counts[label][pred]`.
pub fn confusion_matrix(preds: &[usize], labels: &[usize], num_classes: usize) -> Result<Vec<Vec<usize>>> {
    check(preds, labels)?;
    if let Some(&c) = preds.iter().chain(labels).find(|&&c| c >= num_classes) {
        return Err(Error::invalid(format!("class {c} out of range for {num_classes} classes")));
    }
    let mut m = vec![vec![0; num_classes]; num_classes];
    for (&p, &l) in preds.iter().zip(labels) {
        m[l][p] += 1;
    }
    Ok(m)
}

pub fn accuracy(preds: &[usize], labels: &[usize]) -> Result<f64> {
    check(preds, labels)?;
    Ok(preds.iter().zip(labels).filter(|(p, l)| p == l).count() as f64 / preds.len() as f64)
}

fn ratio(num: usize, den: usize) -> f64 {
    if den == 0 {
        0.0
    } else {
        num as f64 / den as f64
    }
}

fn class_scores(m: &[Vec<usize>], c: usize) -> (f64, f64, f64, usize) {
    let tp = m[c][c];
    let predicted: usize = m.iter().map(|row| row[c]).sum();
    let support: usize = m[c].iter().sum();
    let p = ratio(tp, predicted);
    let r = ratio(tp, support);
    let f1 = if p + r == 0.0 { 0.0 } else { 2.0 * p * r / (p + r) };
    (p, r, f1, support)
}

/// Unweighted mean of per-class F1 over all `num_classes` classes; zero
/// denominators count as 0.
pub fn macro_f1(preds: &[usize], labels: &[usize], num_classes: usize) -> Result<f64> {
    let m = confusion_matrix(preds, labels, num_classes)?;
    Ok((0..num_classes).map(|c| class_scores(&m, c).2).sum::<f64>() / num_classes as f64)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClassMetrics {
    pub label: String,
    pub precision: f64,
    pub recall: f64,
    pub f1: f64,
    pub support: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MeanStd {
    pub mean: f64,
    pub std: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SeedStats {
    pub seeds: Vec<u64>,
    pub accuracy: MeanStd,
    pub macro_f1: MeanStd,
    /// False for a single seed, where the reported stddev of 0 is a placeholder.
    pub std_defined: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    pub accuracy: f64,
    pub macro_f1: f64,
    pub per_class: Vec<ClassMetrics>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub seeds: Option<SeedStats>,
}

impl MetricsReport {
    pub fn compute(preds: &[usize], labels: &[usize], label_names: &[String]) -> Result<Self> {
        let k = label_names.len();
        let m = confusion_matrix(preds, labels, k)?;
        let per_class: Vec<ClassMetrics> = label_names
            .iter()
            .enumerate()
            .map(|(c, name)| {
                let (precision, recall, f1, support) = class_scores(&m, c);
                ClassMetrics { label: name.clone(), precision, recall, f1, support: support as f64 }
            })
            .collect();
        Ok(MetricsReport {
            accuracy: accuracy(preds, labels)?,
            macro_f1: per_class.iter().map(|c| c.f1).sum::<f64>() / k as f64,
            per_class,
            seeds: None,
        })
    }
}

fn mean_std(xs: &[f64]) -> MeanStd {
    let n = xs.len() as f64;
    let mean = xs.iter().sum::<f64>() / n;
    let std = if xs.len() < 2 { 0.0 } else { (xs.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (n - 1.0)).sqrt() };
    MeanStd { mean, std }
}

/// Mean (and sample stddev) of each metric across seed runs. Per-class
/// entries are averaged field by field.
pub fn seed_average(runs: &[(u64, MetricsReport)]) -> Result<MetricsReport> {
    let first = &runs.first().ok_or_else(|| Error::invalid("seed_average needs at least one run"))?.1;
    if runs.iter().any(|(_, r)| r.per_class.len() != first.per_class.len()) {
        return Err(Error::Shape("seed reports disagree on the class list".into()));
    }
    let acc: Vec<f64> = runs.iter().map(|(_, r)| r.accuracy).collect();
    let f1: Vec<f64> = runs.iter().map(|(_, r)| r.macro_f1).collect();
    let avg = |f: &dyn Fn(&MetricsReport) -> f64| mean_std(&runs.iter().map(|(_, r)| f(r)).collect::<Vec<_>>()).mean;
    let per_class = first
        .per_class
        .iter()
        .enumerate()
        .map(|(c, cm)| ClassMetrics {
            label: cm.label.clone(),
            precision: avg(&|r| r.per_class[c].precision),
            recall: avg(&|r| r.per_class[c].recall),
            f1: avg(&|r| r.per_class[c].f1),
            support: avg(&|r| r.per_class[c].support),
        })
        .collect();
    let (accuracy, macro_f1) = (mean_std(&acc), mean_std(&f1));
    Ok(MetricsReport {
        accuracy: accuracy.mean,
        macro_f1: macro_f1.mean,
        per_class,
        seeds: Some(SeedStats {
            seeds: runs.iter().map(|(s, _)| *s).collect(),
            accuracy,
            macro_f1,
            std_defined: runs.len() > 1,
        }),
    })
}

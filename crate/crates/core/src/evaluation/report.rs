use std::fmt::Write as _;
use std::io::Write;

use serde::Serialize;

use super::MetricsReport;
use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq)]
pub struct TableRow {
    pub name: String,
    pub accuracy: f64,
    pub macro_f1: f64,
    pub accuracy_std: Option<f64>,
    pub macro_f1_std: Option<f64>,
}

impl TableRow {
    pub fn new(name: impl Into<String>, report: &MetricsReport) -> Self {
        let std = report.seeds.as_ref().filter(|s| s.std_defined);
        TableRow {
            name: name.into(),
            accuracy: report.accuracy,
            macro_f1: report.macro_f1,
            accuracy_std: std.map(|s| s.accuracy.std),
            macro_f1_std: std.map(|s| s.macro_f1.std),
        }
    }

    pub fn plain(name: impl Into<String>, accuracy: f64, macro_f1: f64) -> Self {
        TableRow { name: name.into(), accuracy, macro_f1, accuracy_std: None, macro_f1_std: None }
    }
}

fn cell(v: f64, std: Option<f64>) -> String {
    match std {
        Some(s) => format!("{:.2}% ± {:.2}", 100.0 * v, 100.0 * s),
        None => format!("{:.2}%", 100.0 * v),
    }
}

/// Aligned text table with Acc and F1 columns in percent.
pub fn format_table(first_column: &str, rows: &[TableRow]) -> String {
    let cells: Vec<[String; 3]> = rows
        .iter()
        .map(|r| [r.name.clone(), cell(r.accuracy, r.accuracy_std), cell(r.macro_f1, r.macro_f1_std)])
        .collect();
    let header = [first_column.to_string(), "Acc".to_string(), "F1".to_string()];
    let mut w = [0; 3];
    for row in std::iter::once(&header).chain(&cells) {
        for (i, c) in row.iter().enumerate() {
            w[i] = w[i].max(c.chars().count());
        }
    }
    let line =
        |row: &[String; 3]| format!("{:<a$}  {:>b$}  {:>c$}\n", row[0], row[1], row[2], a = w[0], b = w[1], c = w[2]);
    let mut out = line(&header);
    let _ = writeln!(out, "{}", "-".repeat(w[0] + w[1] + w[2] + 4));
    for row in &cells {
        out.push_str(&line(row));
    }
    out
}

/// One JSON object per item.
pub fn write_jsonl<W: Write, T: Serialize>(mut w: W, items: &[T]) -> Result<()> {
    for it in items {
        serde_json::to_writer(&mut w, it)?;
        w.write_all(b"\n").map_err(|e| Error::io("<report>", e))?;
    }
    Ok(())
}

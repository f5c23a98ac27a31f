//! Content-addressed run directories and manifests.

use std::collections::BTreeMap;
use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};
use std::time::{SystemTime, UNIX_EPOCH};

use anyhow::{bail, Context, Result};
use serde::Serialize;
use sha2::{Digest, Sha256};

use misinfo_mtl::evaluation::{format_table, write_jsonl, MetricsReport, TableRow};

use crate::UsageError;

pub fn file_digest(path: &Path) -> Result<String> {
    let bytes = fs::read(path).map_err(|e| UsageError(format!("cannot read input {}: {e}", path.display())))?;
    Ok(hex::encode(Sha256::digest(&bytes)))
}

fn now() -> u64 {
    SystemTime::now().duration_since(UNIX_EPOCH).map_or(0, |d| d.as_secs())
}

#[derive(Debug, Clone, Serialize)]
pub struct Manifest {
    pub command: String,
    pub args: BTreeMap<String, String>,
    pub config: serde_json::Value,
    pub inputs: BTreeMap<String, String>,
    pub seeds: Vec<u64>,
    pub output_dir: PathBuf,
    pub digest: String,
    pub parallel: bool,
    pub started_at: u64,
    pub finished_at: Option<u64>,
    pub status: String,
}

pub struct RunDir {
    pub path: PathBuf,
    manifest: Manifest,
}

/// One metrics line: a row label, the seed (absent for averages) and the report.
#[derive(Serialize)]
pub struct MetricsLine<'a> {
    pub row: &'a str,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub seed: Option<u64>,
    #[serde(flatten)]
    pub report: &'a MetricsReport,
}

impl RunDir {
    /// Creates `<out>/<command>-<digest>` and writes the manifest. The digest
    /// covers the command, its arguments, the resolved config, every input
    /// file's content and the seeds.
    pub fn create(
        out: &Path,
        command: &str,
        args: BTreeMap<String, String>,
        config: serde_json::Value,
        inputs: &[PathBuf],
        seeds: &[u64],
        force: bool,
    ) -> Result<RunDir> {
        let mut digests = BTreeMap::new();
        for p in inputs {
            digests.insert(p.display().to_string(), file_digest(p)?);
        }
        let mut h = Sha256::new();
        let key = serde_json::json!({ "command": command, "args": args, "config": config, "inputs": digests, "seeds": seeds });
        h.update(serde_json::to_vec(&key)?);
        let digest = hex::encode(h.finalize());
        let path = out.join(format!("{command}-{}", &digest[..12]));
        if path.join("manifest.json").exists() && !force {
            bail!(UsageError(format!(
                "run directory {} already exists for this exact configuration; pass --force to overwrite it",
                path.display()
            )));
        }
        fs::create_dir_all(&path).with_context(|| format!("creating {}", path.display()))?;
        let manifest = Manifest {
            command: command.to_string(),
            args,
            config,
            inputs: digests,
            seeds: seeds.to_vec(),
            output_dir: path.clone(),
            digest,
            parallel: misinfo_mtl::par::is_parallel(),
            started_at: now(),
            finished_at: None,
            status: "running".into(),
        };
        let run = RunDir { path, manifest };
        run.write_manifest()?;
        Ok(run)
    }

    fn write_manifest(&self) -> Result<()> {
        let p = self.path.join("manifest.json");
        fs::write(&p, serde_json::to_vec_pretty(&self.manifest)?).with_context(|| format!("writing {}", p.display()))
    }

    pub fn finish(mut self, ok: bool) -> Result<PathBuf> {
        self.manifest.finished_at = Some(now());
        self.manifest.status = if ok { "done" } else { "failed" }.into();
        self.write_manifest()?;
        Ok(self.path)
    }

    pub fn seed_dir(&self, seed: u64) -> Result<PathBuf> {
        let p = self.path.join(format!("seed-{seed}"));
        fs::create_dir_all(&p).with_context(|| format!("creating {}", p.display()))?;
        Ok(p)
    }

    pub fn write(&self, rel: impl AsRef<Path>, bytes: &[u8]) -> Result<()> {
        let p = self.path.join(rel);
        fs::write(&p, bytes).with_context(|| format!("writing {}", p.display()))
    }
}

pub fn write_file(path: &Path, bytes: &[u8]) -> Result<()> {
    fs::write(path, bytes).with_context(|| format!("writing {}", path.display()))
}

pub fn jsonl<T: Serialize>(items: &[T]) -> Result<Vec<u8>> {
    let mut buf = Vec::new();
    write_jsonl(&mut buf, items)?;
    Ok(buf)
}

/// Writes `metrics.jsonl` and `report.txt` for averaged rows and prints the table.
pub fn write_summary(run: &RunDir, title: &str, rows: &[(String, MetricsReport)], extra: &str) -> Result<()> {
    let lines: Vec<MetricsLine> = rows.iter().map(|(r, m)| MetricsLine { row: r, seed: None, report: m }).collect();
    run.write("metrics.jsonl", &jsonl(&lines)?)?;
    let table_rows: Vec<TableRow> = rows.iter().map(|(r, m)| TableRow::new(r.clone(), m)).collect();
    let mut text = format_table(title, &table_rows);
    text.push_str(extra);
    run.write("report.txt", text.as_bytes())?;
    let mut out = std::io::stdout().lock();
    let _ = out.write_all(text.as_bytes());
    Ok(())
}

use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use agcn::trainer::{MultiRunReport, RunReport};
use anyhow::{Context, Result};
use serde::Serialize;

use crate::config::ExperimentConfig;

/// Writes `bytes` to `path` through a temporary file in the same directory.
pub fn write_atomic(path: &Path, bytes: &[u8]) -> Result<()> {
    let dir = path
        .parent()
        .filter(|p| !p.as_os_str().is_empty())
        .unwrap_or(Path::new("."));
    fs::create_dir_all(dir).with_context(|| format!("creating {}", dir.display()))?;
    let mut tmp =
        tempfile::NamedTempFile::new_in(dir).with_context(|| format!("creating a temp file in {}", dir.display()))?;
    tmp.write_all(bytes)?;
    tmp.as_file().sync_all()?;
    tmp.persist(path)
        .with_context(|| format!("writing {}", path.display()))?;
    Ok(())
}

pub fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    let mut text = serde_json::to_string_pretty(value)?;
    text.push('\n');
    write_atomic(path, text.as_bytes())
}

/// Minimal CSV builder; fields never contain separators.
pub struct Csv {
    text: String,
}

impl Csv {
    pub fn new(header: &[&str]) -> Self {
        let mut text = header.join(",");
        text.push('\n');
        Self { text }
    }

    pub fn row<I: IntoIterator<Item = String>>(&mut self, fields: I) {
        let fields: Vec<String> = fields.into_iter().collect();
        self.text.push_str(&fields.join(","));
        self.text.push('\n');
    }

    pub fn write(&self, path: &Path) -> Result<()> {
        write_atomic(path, self.text.as_bytes())
    }
}

#[derive(Debug, Serialize)]
pub struct RunRow {
    pub seed: u64,
    pub beta: f64,
    pub test_accuracy: f64,
    pub best_epoch: usize,
    pub stop_epoch: usize,
    pub best_val_loss: f64,
    pub best_val_accuracy: f64,
    pub history_file: String,
}

#[derive(Debug, Serialize)]
pub struct RunsReport<'a> {
    pub config: &'a ExperimentConfig,
    pub per_run: Vec<RunRow>,
    pub mean: f64,
    pub std: f64,
}

fn write_history(dir: &Path, prefix: &str, run: &RunReport) -> Result<String> {
    let name = format!("{prefix}history_seed{}.csv", run.seed);
    let layers = run.history.first().map_or(0, |h| h.phi.len());
    let mut header = vec![
        "epoch".to_string(),
        "train_loss".into(),
        "val_loss".into(),
        "val_accuracy".into(),
    ];
    header.extend((0..layers).map(|l| format!("phi{l}")));
    header.extend((0..layers).map(|l| format!("trace{l}")));
    let header: Vec<&str> = header.iter().map(String::as_str).collect();
    let mut csv = Csv::new(&header);
    for h in &run.history {
        let mut row = vec![
            h.epoch.to_string(),
            h.train_loss.to_string(),
            h.val_loss.to_string(),
            h.val_accuracy.to_string(),
        ];
        row.extend(h.phi.iter().map(f64::to_string));
        row.extend(h.trace.iter().map(f64::to_string));
        csv.row(row);
    }
    csv.write(&dir.join(&name))?;
    Ok(name)
}

/// Writes `<stem>.json`, `<stem>.csv` and one history CSV per run; returns
/// the JSON path.
pub fn write_runs(dir: &Path, stem: &str, config: &ExperimentConfig, rep: &MultiRunReport) -> Result<PathBuf> {
    let prefix = format!("{stem}_");
    let mut per_run = Vec::new();
    let mut csv = Csv::new(&[
        "seed",
        "beta",
        "test_accuracy",
        "best_epoch",
        "stop_epoch",
        "best_val_loss",
        "best_val_accuracy",
        "history_file",
    ]);
    for run in &rep.runs {
        let history_file = write_history(dir, &prefix, run)?;
        csv.row([
            run.seed.to_string(),
            run.beta.to_string(),
            run.test_accuracy.to_string(),
            run.best_epoch.to_string(),
            run.stop_epoch.to_string(),
            run.best_val_loss.to_string(),
            run.best_val_accuracy.to_string(),
            history_file.clone(),
        ]);
        per_run.push(RunRow {
            seed: run.seed,
            beta: run.beta,
            test_accuracy: run.test_accuracy,
            best_epoch: run.best_epoch,
            stop_epoch: run.stop_epoch,
            best_val_loss: run.best_val_loss,
            best_val_accuracy: run.best_val_accuracy,
            history_file,
        });
    }
    csv.write(&dir.join(format!("{stem}.csv")))?;
    let json = dir.join(format!("{stem}.json"));
    write_json(
        &json,
        &RunsReport {
            config,
            per_run,
            mean: rep.mean_test_accuracy,
            std: rep.std_test_accuracy,
        },
    )?;
    Ok(json)
}

//! File helpers shared by the subcommands.

use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::{Path, PathBuf};

use aemlab::trainer::{StepMetrics, METRICS_FILE};
use serde::de::DeserializeOwned;
use serde::Serialize;

use crate::error::{CliError, CliResult};

pub fn create_dir(dir: &Path) -> CliResult<()> {
    std::fs::create_dir_all(dir).map_err(|e| CliError::io(dir, e))
}

pub fn write_json<T: Serialize + ?Sized>(path: &Path, value: &T) -> CliResult<PathBuf> {
    let text = serde_json::to_string_pretty(value)? + "\n";
    std::fs::write(path, text).map_err(|e| CliError::io(path, e))?;
    Ok(path.to_path_buf())
}

pub fn write_jsonl<T: Serialize>(path: &Path, items: &[T]) -> CliResult<PathBuf> {
    let file = File::create(path).map_err(|e| CliError::io(path, e))?;
    let mut w = BufWriter::new(file);
    for item in items {
        serde_json::to_writer(&mut w, item)?;
        w.write_all(b"\n").map_err(|e| CliError::io(path, e))?;
    }
    w.flush().map_err(|e| CliError::io(path, e))?;
    Ok(path.to_path_buf())
}

pub fn read_jsonl<T: DeserializeOwned>(path: &Path) -> CliResult<Vec<T>> {
    let file = File::open(path).map_err(|e| CliError::io(path, e))?;
    let mut out = Vec::new();
    for line in BufReader::new(file).lines() {
        let line = line.map_err(|e| CliError::io(path, e))?;
        if !line.trim().is_empty() {
            out.push(serde_json::from_str(&line)?);
        }
    }
    Ok(out)
}

/// Metrics log of a run directory; a missing log is a validation failure.
pub fn read_metrics(run_dir: &Path) -> CliResult<Vec<StepMetrics>> {
    let path = run_dir.join(METRICS_FILE);
    if !path.is_file() {
        return Err(CliError::Validation(format!("no metrics log at {}", path.display())));
    }
    read_jsonl(&path)
}

/// Writes a header plus rows of already formatted cells.
pub fn write_csv(path: &Path, header: &[String], rows: &[Vec<String>]) -> CliResult<PathBuf> {
    let mut w = csv::Writer::from_path(path)?;
    w.write_record(header)?;
    for row in rows {
        w.write_record(row)?;
    }
    w.flush().map_err(|e| CliError::io(path, e))?;
    Ok(path.to_path_buf())
}

pub fn cell(x: f64) -> String {
    x.to_string()
}

pub fn opt_cell(x: Option<f64>) -> String {
    x.map(cell).unwrap_or_default()
}

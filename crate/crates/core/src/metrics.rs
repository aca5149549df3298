//! Per-epoch training records, written as line-delimited JSON.

use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Phase {
    Estimator,
    Selector,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct MetricsRecord {
    /// One-based stage index.
    pub stage: usize,
    pub phase: Phase,
    /// One-based epoch index within the phase.
    pub epoch: usize,
    /// Validation loss per task.
    pub task_loss: Vec<f64>,
    pub task_accuracy: Vec<f64>,
    pub mean_density: f64,
    pub mean_flops: f64,
    pub epsilon: f64,
    pub lr_est: f64,
    pub lr_sel: f64,
    pub wall_seconds: f64,
}

pub fn write_metrics_to<W: Write>(mut w: W, records: &[MetricsRecord]) -> Result<()> {
    for r in records {
        let line = serde_json::to_string(r).map_err(|e| Error::Format(e.to_string()))?;
        writeln!(w, "{line}")?;
    }
    w.flush()?;
    Ok(())
}

pub fn write_metrics(path: &Path, records: &[MetricsRecord]) -> Result<()> {
    write_metrics_to(BufWriter::new(File::create(path)?), records)
}

pub fn read_metrics(path: &Path) -> Result<Vec<MetricsRecord>> {
    let mut out = Vec::new();
    for (i, line) in BufReader::new(File::open(path)?).lines().enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        out.push(serde_json::from_str(&line).map_err(|e| Error::Parse {
            line: i + 1,
            message: e.to_string(),
        })?);
    }
    Ok(out)
}

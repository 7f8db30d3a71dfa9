//! JSON-lines run records.

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::objectives::MetricRecord;

pub const SCHEMA_VERSION: u32 = 1;

/// One evaluated run, or a failed cell of a grid.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunRecord {
    pub schema_version: u32,
    /// `cv`, `sweep`, `ablation` or `stress`.
    pub experiment: String,
    /// Method or ablation variant name.
    pub method: String,
    pub fold: usize,
    pub seed: u64,
    /// Injected source samples as a fraction of target train.
    pub injection_frac: Option<f64>,
    /// The same count as a fraction of the source cohort.
    pub injection_source_frac: Option<f64>,
    pub shift_offset: f64,
    pub shift_noise: f64,
    /// Histogram KL between shifted source labels and target labels.
    pub label_kl: Option<f64>,
    pub metrics: Option<MetricRecord>,
    pub best_epoch: Option<usize>,
    pub stop_epoch: Option<usize>,
    pub config_hash: String,
    pub wall_time_s: Option<f64>,
    pub error: Option<String>,
    /// Test labels and predictions, kept for the distribution plots.
    pub y_true: Vec<f64>,
    pub y_pred: Vec<f64>,
}

pub fn records_to_jsonl(records: &[RunRecord]) -> Result<String> {
    let mut out = String::new();
    for r in records {
        out.push_str(&serde_json::to_string(r)?);
        out.push('\n');
    }
    Ok(out)
}

pub fn records_from_jsonl(text: &str) -> Result<Vec<RunRecord>> {
    text.lines()
        .enumerate()
        .filter(|(_, l)| !l.trim().is_empty())
        .map(|(i, l)| {
            let r: RunRecord = serde_json::from_str(l).map_err(|e| Error::Parse(format!("record {}: {e}", i + 1)))?;
            if r.schema_version != SCHEMA_VERSION {
                return Err(Error::Parse(format!("record {}: unsupported schema_version {}", i + 1, r.schema_version)));
            }
            Ok(r)
        })
        .collect()
}

pub fn write_records(path: &Path, records: &[RunRecord]) -> Result<()> {
    if let Some(dir) = path.parent() {
        fs::create_dir_all(dir)?;
    }
    fs::write(path, records_to_jsonl(records)?)?;
    Ok(())
}

pub fn read_records(path: &Path) -> Result<Vec<RunRecord>> {
    records_from_jsonl(&fs::read_to_string(path)?)
}

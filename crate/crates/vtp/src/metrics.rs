//! Append-only metrics history, one JSON object per line.

use std::fs::OpenOptions;
use std::io::Write;
use std::path::Path;

use serde::{Deserialize, Serialize};
use vtp_core::train::MetricRecord;

use crate::error::{Result, VtpError};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricLine {
    pub stage: String,
    pub step: usize,
    pub lr: f64,
    pub loss: f64,
    pub eval_acc: f64,
    pub gate_median_abs: Option<f64>,
    pub gate_q10_abs: Option<f64>,
    pub gate_q90_abs: Option<f64>,
}

impl From<&MetricRecord> for MetricLine {
    fn from(r: &MetricRecord) -> Self {
        Self {
            stage: r.stage.name().to_string(),
            step: r.step,
            lr: r.lr,
            loss: r.loss,
            eval_acc: r.eval_acc,
            gate_median_abs: r.gate_median_abs,
            gate_q10_abs: r.gate_q10_abs,
            gate_q90_abs: r.gate_q90_abs,
        }
    }
}

pub fn append_metrics(path: &Path, records: &[MetricRecord]) -> Result<()> {
    let mut text = String::new();
    for r in records {
        text.push_str(&serde_json::to_string(&MetricLine::from(r)).expect("metric serializes"));
        text.push('\n');
    }
    let mut f = OpenOptions::new()
        .create(true)
        .append(true)
        .open(path)
        .map_err(|e| VtpError::io(path, e))?;
    f.write_all(text.as_bytes()).map_err(|e| VtpError::io(path, e))
}

pub fn read_metrics(path: &Path) -> Result<Vec<MetricLine>> {
    let text = std::fs::read_to_string(path).map_err(|e| VtpError::io(path, e))?;
    text.lines()
        .filter(|l| !l.trim().is_empty())
        .enumerate()
        .map(|(i, l)| {
            serde_json::from_str(l).map_err(|e| {
                VtpError::Config(format!("{}: line {}: {e}", path.display(), i + 1))
            })
        })
        .collect()
}

//! Cost report files: an aligned table and a `key=value` document.

use std::collections::BTreeMap;
use std::path::Path;

use vtp_core::cost::CostReport;

use crate::checkpoint::write_atomic;
use crate::error::{Result, VtpError};

pub fn write_report(report: &CostReport, table: &Path, kv: &Path) -> Result<()> {
    write_atomic(table, report.to_table().as_bytes())?;
    write_atomic(kv, report.to_kv().as_bytes())
}

/// Parses a `key=value` document. Blank lines and `#` comments are skipped.
pub fn parse_kv(text: &str) -> Result<BTreeMap<String, String>> {
    let mut out = BTreeMap::new();
    for (i, line) in text.lines().enumerate() {
        let line = line.trim();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        let (k, v) = line
            .split_once('=')
            .ok_or_else(|| VtpError::Config(format!("line {}: expected key=value", i + 1)))?;
        out.insert(k.trim().to_string(), v.trim().to_string());
    }
    Ok(out)
}

/// Derives the key-value path from a report path: `report.txt` → `report.kv`.
pub fn kv_path(table: &Path) -> std::path::PathBuf {
    table.with_extension("kv")
}

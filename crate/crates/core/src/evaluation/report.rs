//! CSV tables and the combined JSON report.

use super::{DefenseCurve, RuntimeRow, SweepRow};
use crate::error::Result;
use serde::{Deserialize, Serialize};
use std::path::Path;

/// JSON schema the combined report conforms to.
pub const REPORT_SCHEMA: &str = include_str!("../../schema/eval_report.schema.json");

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EvalReport {
    pub detector_fingerprint: String,
    pub generator_fingerprint: String,
    pub images: usize,
    pub total_faces: usize,
    pub sweep: Vec<SweepRow>,
    pub defense: Option<DefenseCurve>,
    pub runtime: Option<Vec<RuntimeRow>>,
}

impl EvalReport {
    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_json()?)?;
        Ok(())
    }
}

/// One header row named after the fields, then one row per record.
pub fn write_csv<T: Serialize>(path: &Path, rows: &[T]) -> Result<()> {
    let mut writer = csv::Writer::from_path(path)?;
    for row in rows {
        writer.serialize(row)?;
    }
    writer.flush()?;
    Ok(())
}

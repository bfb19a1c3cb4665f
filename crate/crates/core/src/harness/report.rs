//! Report files: the per-fold CSV, ablation tables and the JSON manifest
//! written next to them.

use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::error::{CcpeError, Result};
use crate::metrics::{reports_to_csv, EvalReport};

use super::config::RunConfig;
use super::protocol::AblationTable;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RunManifest {
    pub package: String,
    pub version: String,
    pub config_digest: String,
    pub seed: u64,
    pub steps: usize,
    pub config: RunConfig,
    /// Fold and average rows of a leave-one-out run.
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub reports: Vec<EvalReport>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub ablation: Option<AblationTable>,
}

impl RunManifest {
    pub fn new(config: &RunConfig) -> Self {
        RunManifest {
            package: env!("CARGO_PKG_NAME").to_string(),
            version: env!("CARGO_PKG_VERSION").to_string(),
            config_digest: config.digest(),
            seed: config.seed,
            steps: config.steps,
            config: config.clone(),
            reports: Vec::new(),
            ablation: None,
        }
    }

    /// The CSV this manifest describes.
    pub fn csv(&self) -> Result<String> {
        match &self.ablation {
            Some(table) => Ok(table.to_csv()),
            None if !self.reports.is_empty() => Ok(reports_to_csv(&self.reports)),
            None => Err(CcpeError::Contract("manifest holds no reports".into())),
        }
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| CcpeError::io(path, e))?;
        serde_json::from_str(&text).map_err(|e| CcpeError::Parse {
            line: e.line(),
            message: e.to_string(),
        })
    }

    pub fn to_json(&self) -> String {
        let mut s = serde_json::to_string_pretty(self).expect("manifest serializes");
        s.push('\n');
        s
    }
}

/// `runs/loo.csv` → `runs/loo.manifest.json`.
pub fn manifest_path(csv_path: &Path) -> PathBuf {
    csv_path.with_extension("manifest.json")
}

fn write(path: &Path, contents: &str) -> Result<()> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir).map_err(|e| CcpeError::io(dir, e))?;
    }
    fs::write(path, contents).map_err(|e| CcpeError::io(path, e))
}

fn emit(manifest: &RunManifest, csv_path: &Path) -> Result<()> {
    write(csv_path, &manifest.csv()?)?;
    write(&manifest_path(csv_path), &manifest.to_json())
}

/// Writes `reports` as CSV to `csv_path` and the manifest beside it.
pub fn emit_report(reports: &[EvalReport], csv_path: &Path, config: &RunConfig) -> Result<()> {
    if reports.is_empty() {
        return Err(CcpeError::Contract("no reports to emit".into()));
    }
    let mut manifest = RunManifest::new(config);
    manifest.reports = reports.to_vec();
    emit(&manifest, csv_path)
}

pub fn emit_ablation(table: &AblationTable, csv_path: &Path, config: &RunConfig) -> Result<()> {
    if table.rows.is_empty() {
        return Err(CcpeError::Contract("ablation table has no rows".into()));
    }
    let mut manifest = RunManifest::new(config);
    manifest.ablation = Some(table.clone());
    emit(&manifest, csv_path)
}

/// Re-creates the CSV described by a saved manifest.
pub fn reemit_from_manifest(manifest_path: &Path, csv_path: &Path) -> Result<()> {
    let manifest = RunManifest::load(manifest_path)?;
    write(csv_path, &manifest.csv()?)
}

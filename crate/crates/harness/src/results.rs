//! Results tables: CSV with a fixed header, plus a small JSON sidecar
//! (`<file>.schema.json`) carrying the schema version.

use crate::error::{HarnessError, Result};
use serde::{Deserialize, Serialize};
use std::fs::OpenOptions;
use std::path::{Path, PathBuf};

pub const SCHEMA_VERSION: u32 = 1;

pub const COLUMNS: [&str; 10] = [
    "method",
    "axis_name",
    "axis_value",
    "seed",
    "num_plans",
    "valid_rate",
    "mean_e_recon",
    "mean_e_ov",
    "mean_logp",
    "wall_secs",
];

/// One `(method, axis value, seed)` cell. Field order is the column order.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ResultsRecord {
    pub method: String,
    pub axis_name: String,
    pub axis_value: f64,
    pub seed: u64,
    pub num_plans: usize,
    pub valid_rate: f64,
    /// Mean over plans of the reconstruction error of the final plan.
    pub mean_e_recon: f64,
    pub mean_e_ov: f64,
    /// Mean composed log-density, when the environment has an exact density.
    pub mean_logp: Option<f64>,
    pub wall_secs: Option<f64>,
}

#[derive(Debug, Serialize, Deserialize, PartialEq)]
struct Schema {
    schema_version: u32,
    columns: Vec<String>,
}

fn schema_path(path: &Path) -> PathBuf {
    let mut name = path.file_name().map(|n| n.to_os_string()).unwrap_or_default();
    name.push(".schema.json");
    path.with_file_name(name)
}

fn current_schema() -> Schema {
    Schema {
        schema_version: SCHEMA_VERSION,
        columns: COLUMNS.iter().map(|c| c.to_string()).collect(),
    }
}

/// Writes `rows` to `path`. With `append` and an existing file, the header
/// and schema version must match before anything is written.
pub fn write_results(path: &Path, rows: &[ResultsRecord], append: bool) -> Result<()> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        std::fs::create_dir_all(dir).map_err(|e| HarnessError::io(dir, e))?;
    }
    let appending = append && path.exists();
    if appending {
        check_schema(path)?;
    }
    let file = OpenOptions::new()
        .create(true)
        .write(true)
        .append(appending)
        .truncate(!appending)
        .open(path)
        .map_err(|e| HarnessError::io(path, e))?;
    let mut w = csv::WriterBuilder::new().has_headers(!appending).from_writer(file);
    if rows.is_empty() && !appending {
        w.write_record(COLUMNS)?;
    }
    for r in rows {
        w.serialize(r)?;
    }
    w.flush().map_err(|e| HarnessError::io(path, e))?;
    let sp = schema_path(path);
    let text = serde_json::to_string_pretty(&current_schema()).expect("schema serializes");
    std::fs::write(&sp, text + "\n").map_err(|e| HarnessError::io(&sp, e))?;
    Ok(())
}

fn check_schema(path: &Path) -> Result<()> {
    let sp = schema_path(path);
    if sp.exists() {
        let text = std::fs::read_to_string(&sp).map_err(|e| HarnessError::io(&sp, e))?;
        let found: Schema = serde_json::from_str(&text)
            .map_err(|e| HarnessError::Schema(format!("{}: {e}", sp.display())))?;
        if found.schema_version != SCHEMA_VERSION {
            return Err(HarnessError::Schema(format!(
                "{} has schema version {}, this build writes {}",
                path.display(),
                found.schema_version,
                SCHEMA_VERSION
            )));
        }
    }
    let mut r = csv::Reader::from_path(path)?;
    let header: Vec<String> = r.headers()?.iter().map(str::to_string).collect();
    if header != COLUMNS {
        return Err(HarnessError::Schema(format!(
            "{} has columns {header:?}, expected {COLUMNS:?}",
            path.display()
        )));
    }
    Ok(())
}

pub fn read_results(path: &Path) -> Result<Vec<ResultsRecord>> {
    check_schema(path)?;
    let mut r = csv::Reader::from_path(path)?;
    Ok(r.deserialize().collect::<std::result::Result<_, _>>()?)
}

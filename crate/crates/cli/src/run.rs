//! Run directories, metric rows and manifests.

use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};

use serde::Serialize;
use serde_json::Value;

use crate::error::CliError;

pub const METRICS_HEADER: [&str; 5] = ["run_id", "config_hash", "metric", "value", "units"];
pub const MANIFEST_FORMAT: &str = "flowinv-run-v1";
pub const OUT_ENV: &str = "FLOWINV_OUT";
pub const DEFAULT_OUT: &str = "runs";

/// `--out`, else `$FLOWINV_OUT`, else `./runs`.
pub fn output_root(flag: Option<&Path>) -> PathBuf {
    match flag {
        Some(p) => p.to_path_buf(),
        None => std::env::var_os(OUT_ENV).map_or_else(|| PathBuf::from(DEFAULT_OUT), PathBuf::from),
    }
}

/// `<command>-<first 12 hex digits of the config hash>`.
pub fn run_id(command: &str, hash: &str) -> String {
    format!("{command}-{}", &hash[..12])
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct MetricsRow {
    pub metric: String,
    pub value: f64,
    pub units: String,
}

/// Metrics and failed invariants collected while a command runs.
#[derive(Debug, Default)]
pub struct Report {
    pub rows: Vec<MetricsRow>,
    pub failures: Vec<(String, String)>,
}

impl Report {
    pub fn metric(&mut self, name: impl Into<String>, value: f64, units: &str) {
        self.rows.push(MetricsRow { metric: name.into(), value, units: units.into() });
    }

    pub fn flag(&mut self, name: impl Into<String>, value: bool) {
        self.metric(name, f64::from(u8::from(value)), "bool");
    }

    /// Records `invariant` as failed unless `ok`.
    pub fn check(&mut self, invariant: &str, ok: bool, detail: impl FnOnce() -> String) {
        if !ok {
            self.failures.push((invariant.to_string(), detail()));
        }
    }

    pub fn get(&self, name: &str) -> Option<f64> {
        self.rows.iter().find(|r| r.metric == name).map(|r| r.value)
    }
}

/// One output directory per run.
#[derive(Debug)]
pub struct RunDir {
    pub path: PathBuf,
    pub run_id: String,
    pub config_hash: String,
    artifacts: Vec<String>,
}

impl RunDir {
    /// Creates `<root>/<run id>`. An existing run directory is replaced only with `force`.
    pub fn create(root: &Path, command: &str, config_hash: &str, force: bool) -> Result<Self, CliError> {
        let run_id = run_id(command, config_hash);
        let path = root.join(&run_id);
        if path.exists() {
            if !force {
                return Err(CliError::usage(format!("{} already exists; pass --force to overwrite", path.display())));
            }
            if !path.join("manifest.json").is_file() {
                return Err(CliError::usage(format!("{} exists but is not a run directory", path.display())));
            }
            std::fs::remove_dir_all(&path)?;
        }
        std::fs::create_dir_all(&path)?;
        Ok(Self { path, run_id, config_hash: config_hash.to_string(), artifacts: Vec::new() })
    }

    /// Opens an artifact for writing and records it in the manifest.
    pub fn artifact(&mut self, name: &str) -> Result<BufWriter<File>, CliError> {
        self.artifacts.push(name.to_string());
        Ok(BufWriter::new(File::create(self.path.join(name))?))
    }

    pub fn artifact_path(&self, name: &str) -> PathBuf {
        self.path.join(name)
    }

    /// Writes `metrics.csv` and `manifest.json`.
    pub fn finish(&self, command: &str, config: &Value, seed: u64, report: &Report) -> Result<(), CliError> {
        let mut w = csv::Writer::from_path(self.path.join("metrics.csv"))?;
        w.write_record(METRICS_HEADER)?;
        for row in &report.rows {
            w.write_record([
                self.run_id.as_str(),
                self.config_hash.as_str(),
                row.metric.as_str(),
                &row.value.to_string(),
                row.units.as_str(),
            ])?;
        }
        w.flush()?;
        let manifest = serde_json::json!({
            "format": MANIFEST_FORMAT,
            "command": command,
            "code_version": env!("CARGO_PKG_VERSION"),
            "run_id": self.run_id,
            "config_hash": self.config_hash,
            "seed": seed,
            "config": config,
            "artifacts": self.artifacts,
            "failed_invariants": report.failures.iter().map(|(name, _)| name).collect::<Vec<_>>(),
        });
        let mut f = BufWriter::new(File::create(self.path.join("manifest.json"))?);
        serde_json::to_writer_pretty(&mut f, &manifest)?;
        f.write_all(b"\n")?;
        f.flush()?;
        Ok(())
    }
}

/// Reads a metrics file back as `(metric, value)` pairs.
pub fn read_metrics(path: &Path) -> Result<Vec<(String, f64)>, CliError> {
    if !path.is_file() {
        return Err(CliError::MissingInput(path.to_path_buf()));
    }
    let mut r = csv::Reader::from_path(path)?;
    if r.headers()?.iter().ne(METRICS_HEADER) {
        return Err(CliError::usage(format!("{} does not have the metrics header", path.display())));
    }
    r.records()
        .map(|rec| {
            let rec = rec?;
            let value = rec[3].parse::<f64>().map_err(|e| CliError::usage(format!("metric {}: {e}", &rec[2])))?;
            Ok((rec[2].to_string(), value))
        })
        .collect()
}

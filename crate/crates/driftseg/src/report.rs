//! Run manifests and multi-seed aggregation.
//!
//! Every training run leaves a directory with a config snapshot, a
//! `manifest.json`, the per-epoch CSV, and the best checkpoint. `report`
//! scans any number of such directories and emits mean and sample standard
//! deviation per metric, as an aligned text table and as JSON.

use crate::train::{EpochRow, EvalReport, EPOCH_CSV_HEADER};
use serde::{Deserialize, Serialize};
use std::path::{Path, PathBuf};
use thiserror::Error;

#[derive(Debug, Error)]
pub enum ReportError {
    #[error("io error at {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("malformed run artifact at {path}: {message}")]
    Malformed { path: PathBuf, message: String },
    #[error("no runs supplied")]
    Empty,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct EnvironmentInfo {
    pub os: String,
    pub arch: String,
    pub package_version: String,
}

impl EnvironmentInfo {
    pub fn current() -> EnvironmentInfo {
        EnvironmentInfo {
            os: std::env::consts::OS.to_string(),
            arch: std::env::consts::ARCH.to_string(),
            package_version: env!("CARGO_PKG_VERSION").to_string(),
        }
    }
}

/// Written at the end of every run; re-running with the recorded config and
/// seed reproduces the metric rows.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct RunManifest {
    pub config_toml: String,
    /// Digest binding the config snapshot, seed, and package version.
    pub content_hash: String,
    pub seed: u64,
    pub started_at: String,
    pub finished_at: String,
    pub best_epoch: usize,
    pub best_selection_score: f64,
    pub history: Vec<EvalReport>,
    /// Final target-domain evaluation, when one was run.
    pub target_eval: Option<EvalReport>,
    pub environment: EnvironmentInfo,
}

impl RunManifest {
    pub fn content_hash_for(config_toml: &str, seed: u64) -> String {
        use sha2::{Digest, Sha256};
        let mut h = Sha256::new();
        h.update(config_toml.as_bytes());
        h.update(seed.to_le_bytes());
        h.update(env!("CARGO_PKG_VERSION").as_bytes());
        h.finalize().iter().map(|b| format!("{b:02x}")).collect()
    }

    /// Atomic write (temp file + rename).
    pub fn save(&self, path: &Path) -> Result<(), ReportError> {
        let json = serde_json::to_string_pretty(self).map_err(|e| ReportError::Malformed {
            path: path.to_path_buf(),
            message: e.to_string(),
        })?;
        let tmp = path.with_extension("json.tmp");
        std::fs::write(&tmp, json).map_err(|source| ReportError::Io {
            path: tmp.clone(),
            source,
        })?;
        std::fs::rename(&tmp, path).map_err(|source| ReportError::Io {
            path: path.to_path_buf(),
            source,
        })?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<RunManifest, ReportError> {
        let raw = std::fs::read_to_string(path).map_err(|source| ReportError::Io {
            path: path.to_path_buf(),
            source,
        })?;
        serde_json::from_str(&raw).map_err(|e| ReportError::Malformed {
            path: path.to_path_buf(),
            message: e.to_string(),
        })
    }
}

/// Parses an `epochs.csv` written by the trainer.
pub fn load_epoch_csv(path: &Path) -> Result<Vec<EpochRow>, ReportError> {
    let raw = std::fs::read_to_string(path).map_err(|source| ReportError::Io {
        path: path.to_path_buf(),
        source,
    })?;
    let mut lines = raw.lines();
    match lines.next() {
        Some(header) if header == EPOCH_CSV_HEADER => {}
        _ => {
            return Err(ReportError::Malformed {
                path: path.to_path_buf(),
                message: "missing epoch CSV header".into(),
            })
        }
    }
    lines
        .filter(|l| !l.trim().is_empty())
        .map(|l| {
            EpochRow::parse_csv_line(l).ok_or_else(|| ReportError::Malformed {
                path: path.to_path_buf(),
                message: format!("bad row: {l}"),
            })
        })
        .collect()
}

/// Sample mean and standard deviation (ddof = 1; a single value has
/// deviation 0).
pub fn mean_std(values: &[f64]) -> (f64, f64) {
    let n = values.len();
    if n == 0 {
        return (f64::NAN, f64::NAN);
    }
    let mean = values.iter().sum::<f64>() / n as f64;
    if n == 1 {
        return (mean, 0.0);
    }
    let var = values.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / (n - 1) as f64;
    (mean, var.sqrt())
}

#[derive(Debug, Clone, Serialize)]
pub struct AggregateRow {
    pub metric: String,
    pub mean: f64,
    pub std: f64,
    pub values: Vec<f64>,
}

#[derive(Debug, Clone, Serialize)]
pub struct AggregateReport {
    pub runs: Vec<PathBuf>,
    pub seeds: Vec<u64>,
    pub rows: Vec<AggregateRow>,
}

impl AggregateReport {
    /// Aligned plain-text table in the `mean ± std` convention.
    pub fn render_text(&self) -> String {
        let width = self
            .rows
            .iter()
            .map(|r| r.metric.len())
            .max()
            .unwrap_or(6)
            .max(6);
        let mut out = format!(
            "{:<width$}  {:>10}  {:>10}  (n = {})\n",
            "metric",
            "mean",
            "std",
            self.seeds.len(),
            width = width
        );
        for row in &self.rows {
            out.push_str(&format!(
                "{:<width$}  {:>10.4}  {:>10.4}\n",
                row.metric,
                row.mean,
                row.std,
                width = width
            ));
        }
        out
    }
}

/// Aggregates a set of run directories into mean ± std rows.
pub fn aggregate_runs(run_dirs: &[PathBuf]) -> Result<AggregateReport, ReportError> {
    if run_dirs.is_empty() {
        return Err(ReportError::Empty);
    }
    let manifests: Vec<RunManifest> = run_dirs
        .iter()
        .map(|d| RunManifest::load(&d.join("manifest.json")))
        .collect::<Result<_, _>>()?;

    let mut rows = Vec::new();
    let mut push = |metric: &str, values: Vec<f64>| {
        if values.len() == manifests.len() {
            let (mean, std) = mean_std(&values);
            rows.push(AggregateRow {
                metric: metric.to_string(),
                mean,
                std,
                values,
            });
        }
    };
    push(
        "best_selection_score",
        manifests.iter().map(|m| m.best_selection_score).collect(),
    );
    push(
        "source_val_foreground_iou",
        manifests
            .iter()
            .filter_map(|m| m.history.get(m.best_epoch).map(|r| r.foreground_iou))
            .collect(),
    );
    push(
        "target_foreground_iou",
        manifests
            .iter()
            .filter_map(|m| m.target_eval.as_ref().map(|r| r.foreground_iou))
            .collect(),
    );
    push(
        "target_mean_dice",
        manifests
            .iter()
            .filter_map(|m| m.target_eval.as_ref().map(|r| r.mean_dice))
            .collect(),
    );

    Ok(AggregateReport {
        runs: run_dirs.to_vec(),
        seeds: manifests.iter().map(|m| m.seed).collect(),
        rows,
    })
}

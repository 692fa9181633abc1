use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Metrics of one (seed, fold) run.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RunMetrics {
    pub seed: u64,
    pub fold: usize,
    pub mse: f64,
    pub precision_at_k: f64,
    pub ndcg_at_k: f64,
    pub users_evaluated: usize,
}

/// Mean and population standard deviation over runs.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Summary {
    pub mse_mean: f64,
    pub mse_std: f64,
    pub precision_mean: f64,
    pub precision_std: f64,
    pub ndcg_mean: f64,
    pub ndcg_std: f64,
}

fn mean_std(values: impl Iterator<Item = f64> + Clone) -> (f64, f64) {
    let n = values.clone().count() as f64;
    let mean = values.clone().sum::<f64>() / n;
    let var = values.map(|v| (v - mean) * (v - mean)).sum::<f64>() / n;
    (mean, var.sqrt())
}

impl Summary {
    pub fn of(runs: &[RunMetrics]) -> Option<Self> {
        if runs.is_empty() {
            return None;
        }
        let (mse_mean, mse_std) = mean_std(runs.iter().map(|r| r.mse));
        let (precision_mean, precision_std) = mean_std(runs.iter().map(|r| r.precision_at_k));
        let (ndcg_mean, ndcg_std) = mean_std(runs.iter().map(|r| r.ndcg_at_k));
        Some(Self {
            mse_mean,
            mse_std,
            precision_mean,
            precision_std,
            ndcg_mean,
            ndcg_std,
        })
    }
}

/// One report line. Wall-clock time is kept out of the serialized form so
/// that reports are byte-identical across runs; it goes to a timing file.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReportRow {
    pub label: String,
    pub summary: Option<Summary>,
    pub runs: Vec<RunMetrics>,
    pub error: Option<String>,
    #[serde(skip)]
    pub seconds: f64,
}

impl ReportRow {
    pub fn from_runs(label: String, runs: Vec<RunMetrics>, seconds: f64) -> Self {
        Self {
            label,
            summary: Summary::of(&runs),
            runs,
            error: None,
            seconds,
        }
    }

    pub fn failed(label: String, error: String, seconds: f64) -> Self {
        Self {
            label,
            summary: None,
            runs: Vec::new(),
            error: Some(error),
            seconds,
        }
    }

    fn cells(&self) -> [String; 4] {
        match &self.summary {
            Some(s) => [
                self.label.clone(),
                format!("{:.2}", s.mse_mean),
                format!("{:.2}", s.precision_mean),
                format!("{:.2}", s.ndcg_mean),
            ],
            None => [self.label.clone(), "NA".into(), "NA".into(), "NA".into()],
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ReportFormat {
    Csv,
    Markdown,
}

impl ReportFormat {
    /// Markdown for `.md`, CSV otherwise.
    pub fn for_path(path: &Path) -> Self {
        match path.extension().and_then(|e| e.to_str()) {
            Some("md") | Some("markdown") => ReportFormat::Markdown,
            _ => ReportFormat::Csv,
        }
    }
}

const HEADER: [&str; 4] = ["Models", "MSE", "Precision@K", "NDCG"];

/// Renders rows with values at two decimals; failed rows show `NA`.
pub fn emit_report(rows: &[ReportRow], format: ReportFormat) -> Result<String> {
    if rows.is_empty() {
        return Err(Error::Argument("no rows to report".into()));
    }
    match format {
        ReportFormat::Csv => {
            let mut w = csv::Writer::from_writer(Vec::new());
            w.write_record(HEADER)?;
            for r in rows {
                w.write_record(r.cells())?;
            }
            let bytes = w.into_inner().map_err(|e| Error::Argument(e.to_string()))?;
            String::from_utf8(bytes).map_err(|e| Error::Argument(e.to_string()))
        }
        ReportFormat::Markdown => {
            let mut s = format!("| {} |\n|---|---:|---:|---:|\n", HEADER.join(" | "));
            for r in rows {
                let cells = r.cells().map(|c| c.replace('|', "\\|"));
                s.push_str(&format!("| {} |\n", cells.join(" | ")));
            }
            Ok(s)
        }
    }
}

fn sibling(path: &Path, extension: &str) -> PathBuf {
    path.with_extension(extension)
}

/// Writes the report at `path`, the full-precision sidecar next to it with
/// a `.json` extension, and wall-clock seconds per row in `.timing.json`.
/// Returns the sidecar and timing paths.
pub fn write_report(rows: &[ReportRow], path: impl AsRef<Path>) -> Result<(PathBuf, PathBuf)> {
    let path = path.as_ref();
    let text = emit_report(rows, ReportFormat::for_path(path))?;
    std::fs::write(path, text).map_err(|e| Error::io(path, e))?;
    let sidecar = sibling(path, "json");
    if sidecar == path {
        return Err(Error::Argument("report path must not end in .json".into()));
    }
    std::fs::write(&sidecar, serde_json::to_string_pretty(rows)? + "\n")
        .map_err(|e| Error::io(&sidecar, e))?;
    let timing = sibling(path, "timing.json");
    let seconds: Vec<serde_json::Value> = rows
        .iter()
        .map(|r| serde_json::json!({ "label": r.label, "seconds": r.seconds }))
        .collect();
    std::fs::write(&timing, serde_json::to_string_pretty(&seconds)? + "\n")
        .map_err(|e| Error::io(&timing, e))?;
    Ok((sidecar, timing))
}

pub fn read_sidecar(path: impl AsRef<Path>) -> Result<Vec<ReportRow>> {
    let path = path.as_ref();
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    Ok(serde_json::from_str(&text)?)
}

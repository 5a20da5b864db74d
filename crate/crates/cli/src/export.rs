//! Study export files.

use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use hg_core::model::TestKind;
use hg_core::{ErrorCode, HgError, Result};
use hg_ctm::ExportBundle;
use serde::Serialize;

pub const RESULTS_CSV: &str = "results.csv";
pub const DATAPOINTS_JSONL: &str = "datapoints.jsonl";
pub const VAULT_CSV: &str = "vault.csv";

const BASE_COLUMNS: [&str; 8] = [
    "result_id",
    "subject_id",
    "worker_kind",
    "schema_version",
    "produced_at",
    "datapoint_id",
    "dataset_id",
    "headline",
];

/// Metric columns: every scalar any worker kind emits, in a fixed order.
pub fn metric_columns() -> Vec<&'static str> {
    TestKind::ALL.iter().flat_map(|k| k.metrics().iter().copied()).collect()
}

pub fn results_header() -> Vec<&'static str> {
    BASE_COLUMNS.iter().copied().chain(metric_columns()).chain(["body"]).collect()
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub struct Written {
    pub dir: PathBuf,
    pub results: usize,
    pub datapoints: usize,
    pub vault: usize,
}

fn io(path: &Path) -> impl Fn(std::io::Error) -> HgError + '_ {
    move |e| HgError::new(ErrorCode::Unavailable, format!("{}: {e}", path.display()))
}

fn csv_err(path: &Path) -> impl Fn(csv::Error) -> HgError + '_ {
    move |e| HgError::new(ErrorCode::Unavailable, format!("{}: {e}", path.display()))
}

fn scalar(v: &serde_json::Value) -> String {
    match v {
        serde_json::Value::Null => String::new(),
        serde_json::Value::String(s) => s.clone(),
        other => other.to_string(),
    }
}

/// One row per result; metric columns a result does not carry stay empty.
pub fn write_results(path: &Path, bundle: &ExportBundle) -> Result<usize> {
    let mut w = csv::Writer::from_path(path).map_err(csv_err(path))?;
    w.write_record(results_header()).map_err(csv_err(path))?;
    let metrics = metric_columns();
    for r in &bundle.results {
        let headline = TestKind::from_worker_kind(&r.worker_kind)
            .map(|k| scalar(&r.body[k.headline_metric()]))
            .unwrap_or_default();
        let mut row = vec![
            r.result_id.to_string(),
            r.subject_id.to_string(),
            r.worker_kind.clone(),
            r.schema_version.to_string(),
            r.produced_at.to_string(),
            r.datapoint_id.as_ref().map(ToString::to_string).unwrap_or_default(),
            r.dataset_id.as_ref().map(ToString::to_string).unwrap_or_default(),
            headline,
        ];
        row.extend(metrics.iter().map(|m| scalar(&r.body[*m])));
        row.push(r.body.to_string());
        w.write_record(&row).map_err(csv_err(path))?;
    }
    w.flush().map_err(io(path))?;
    Ok(bundle.results.len())
}

pub fn write_datapoints(path: &Path, bundle: &ExportBundle) -> Result<usize> {
    let mut f = std::io::BufWriter::new(fs::File::create(path).map_err(io(path))?);
    for d in &bundle.datapoints {
        serde_json::to_writer(&mut f, d).map_err(HgError::internal)?;
        f.write_all(b"\n").map_err(io(path))?;
    }
    f.flush().map_err(io(path))?;
    Ok(bundle.datapoints.len())
}

pub fn write_vault(path: &Path, bundle: &ExportBundle) -> Result<usize> {
    let mut w = csv::Writer::from_path(path).map_err(csv_err(path))?;
    w.write_record(["raw_id", "pseudonym", "study_id"]).map_err(csv_err(path))?;
    for v in &bundle.vault {
        w.write_record([v.raw_id.as_str(), v.pseudonym.as_str(), v.study_id.as_str()]).map_err(csv_err(path))?;
    }
    w.flush().map_err(io(path))?;
    Ok(bundle.vault.len())
}

/// Writes the three export files into `dir`, creating it.
pub fn write_all(dir: &Path, bundle: &ExportBundle) -> Result<Written> {
    fs::create_dir_all(dir).map_err(io(dir))?;
    Ok(Written {
        dir: dir.to_path_buf(),
        results: write_results(&dir.join(RESULTS_CSV), bundle)?,
        datapoints: write_datapoints(&dir.join(DATAPOINTS_JSONL), bundle)?,
        vault: write_vault(&dir.join(VAULT_CSV), bundle)?,
    })
}

//! Report rows and their CSV, JSON and Markdown renderings.
//!
//! CSV and JSON carry the same numbers: floats are written in shortest
//! round-trip form by both writers, so reading either back yields bitwise
//! identical values.

use std::collections::BTreeSet;
use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use stillguard_core::MetricsReport;

use crate::error::{HarnessError, Result};

/// Method label of rows generated from the untouched image.
pub const UNPROTECTED: &str = "unprotected";

/// One `(image, arm, ε)` cell.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReportRow {
    pub image_id: String,
    /// `unprotected` or a loss name.
    pub method: String,
    /// The method plus any ablation variant; also the artifact directory name.
    pub arm: String,
    pub epsilon: u32,
    pub temporal_ssim: f64,
    pub flow_magnitude: f64,
    pub linf_delta: f64,
    pub l2_delta: f64,
    pub latent_distance: f64,
    pub per_frame_ssim_drop: Vec<f64>,
    pub per_frame_flow: Vec<f64>,
    /// Attack plus generation time for this cell.
    pub wall_seconds: f64,
}

impl ReportRow {
    pub fn new(image_id: &str, method: &str, arm: &str, epsilon: u32, m: MetricsReport, wall_seconds: f64) -> Self {
        Self {
            image_id: image_id.into(),
            method: method.into(),
            arm: arm.into(),
            epsilon,
            temporal_ssim: m.temporal_ssim,
            flow_magnitude: m.flow_magnitude,
            linf_delta: m.linf_delta,
            l2_delta: m.l2_delta,
            latent_distance: m.latent_distance,
            per_frame_ssim_drop: m.per_frame_ssim_drop,
            per_frame_flow: m.per_frame_flow,
            wall_seconds,
        }
    }

    pub fn key(&self) -> (&str, &str, u32) {
        (&self.image_id, &self.arm, self.epsilon)
    }
}

/// Flat CSV form: per-frame series are `;`-separated.
#[derive(Debug, Serialize, Deserialize)]
struct CsvRow {
    image_id: String,
    method: String,
    arm: String,
    epsilon: u32,
    temporal_ssim: f64,
    flow_magnitude: f64,
    linf_delta: f64,
    l2_delta: f64,
    latent_distance: f64,
    per_frame_ssim_drop: String,
    per_frame_flow: String,
    wall_seconds: f64,
}

/// Column names of the row CSV, in order.
pub const CSV_HEADER: [&str; 12] = [
    "image_id",
    "method",
    "arm",
    "epsilon",
    "temporal_ssim",
    "flow_magnitude",
    "linf_delta",
    "l2_delta",
    "latent_distance",
    "per_frame_ssim_drop",
    "per_frame_flow",
    "wall_seconds",
];

fn join_series(v: &[f64]) -> String {
    v.iter().map(|x| x.to_string()).collect::<Vec<_>>().join(";")
}

fn split_series(s: &str) -> Result<Vec<f64>> {
    if s.is_empty() {
        return Ok(Vec::new());
    }
    s.split(';').map(|x| x.parse().map_err(|_| HarnessError::Usage(format!("bad per-frame value `{x}` in report CSV")))).collect()
}

impl From<&ReportRow> for CsvRow {
    fn from(r: &ReportRow) -> Self {
        CsvRow {
            image_id: r.image_id.clone(),
            method: r.method.clone(),
            arm: r.arm.clone(),
            epsilon: r.epsilon,
            temporal_ssim: r.temporal_ssim,
            flow_magnitude: r.flow_magnitude,
            linf_delta: r.linf_delta,
            l2_delta: r.l2_delta,
            latent_distance: r.latent_distance,
            per_frame_ssim_drop: join_series(&r.per_frame_ssim_drop),
            per_frame_flow: join_series(&r.per_frame_flow),
            wall_seconds: r.wall_seconds,
        }
    }
}

impl CsvRow {
    fn into_row(self) -> Result<ReportRow> {
        Ok(ReportRow {
            per_frame_ssim_drop: split_series(&self.per_frame_ssim_drop)?,
            per_frame_flow: split_series(&self.per_frame_flow)?,
            image_id: self.image_id,
            method: self.method,
            arm: self.arm,
            epsilon: self.epsilon,
            temporal_ssim: self.temporal_ssim,
            flow_magnitude: self.flow_magnitude,
            linf_delta: self.linf_delta,
            l2_delta: self.l2_delta,
            latent_distance: self.latent_distance,
            wall_seconds: self.wall_seconds,
        })
    }
}

/// Rejects tables with a repeated `(image, arm, ε)` key.
pub fn check_unique(rows: &[ReportRow]) -> Result<()> {
    let mut seen = BTreeSet::new();
    for r in rows {
        if !seen.insert(r.key()) {
            return Err(HarnessError::Usage(format!("duplicate report row {:?}", r.key())));
        }
    }
    Ok(())
}

pub fn rows_to_csv(rows: &[ReportRow]) -> Result<Vec<u8>> {
    let mut w = csv::Writer::from_writer(Vec::new());
    if rows.is_empty() {
        w.write_record(CSV_HEADER)?;
    }
    for r in rows {
        w.serialize(CsvRow::from(r))?;
    }
    w.into_inner().map_err(|e| HarnessError::Usage(e.to_string()))
}

pub fn rows_from_csv(bytes: &[u8]) -> Result<Vec<ReportRow>> {
    let mut r = csv::Reader::from_reader(bytes);
    r.deserialize::<CsvRow>().map(|row| row.map_err(HarnessError::from).and_then(CsvRow::into_row)).collect()
}

/// Mean metrics of one `(arm, ε)` group.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SummaryRow {
    pub arm: String,
    pub method: String,
    pub epsilon: u32,
    pub images: usize,
    pub temporal_ssim: f64,
    pub flow_magnitude: f64,
    pub linf_delta: f64,
    pub l2_delta: f64,
    pub latent_distance: f64,
    pub wall_seconds: f64,
}

/// Groups by `(arm, ε)` in order of first appearance.
pub fn summarize(rows: &[ReportRow]) -> Vec<SummaryRow> {
    let mut keys: Vec<(String, u32)> = Vec::new();
    for r in rows {
        let k = (r.arm.clone(), r.epsilon);
        if !keys.contains(&k) {
            keys.push(k);
        }
    }
    keys.into_iter()
        .map(|(arm, epsilon)| {
            let group: Vec<&ReportRow> = rows.iter().filter(|r| r.arm == arm && r.epsilon == epsilon).collect();
            let n = group.len() as f64;
            let mean = |f: fn(&ReportRow) -> f64| group.iter().map(|r| f(r)).sum::<f64>() / n;
            SummaryRow {
                method: group[0].method.clone(),
                images: group.len(),
                temporal_ssim: mean(|r| r.temporal_ssim),
                flow_magnitude: mean(|r| r.flow_magnitude),
                linf_delta: mean(|r| r.linf_delta),
                l2_delta: mean(|r| r.l2_delta),
                latent_distance: mean(|r| r.latent_distance),
                wall_seconds: mean(|r| r.wall_seconds),
                arm,
                epsilon,
            }
        })
        .collect()
}

pub const MARKDOWN_HEADER: &str = "| arm | eps | temporal SSIM | flow | Linf | L2 | latent dist | seconds |\n\
|---|---:|---:|---:|---:|---:|---:|---:|";

/// One Markdown table line; metrics to 4 decimals, seconds to 1.
pub fn markdown_row(s: &SummaryRow) -> String {
    format!(
        "| {} | {} | {:.4} | {:.4} | {:.2} | {:.4} | {:.4} | {:.1} |",
        s.arm, s.epsilon, s.temporal_ssim, s.flow_magnitude, s.linf_delta, s.l2_delta, s.latent_distance, s.wall_seconds
    )
}

pub fn markdown_table(rows: &[SummaryRow]) -> String {
    let mut out = String::from(MARKDOWN_HEADER);
    for r in rows {
        out.push('\n');
        out.push_str(&markdown_row(r));
    }
    out.push('\n');
    out
}

pub(crate) fn write_file(path: &Path, bytes: &[u8]) -> Result<()> {
    if let Some(parent) = path.parent() {
        fs::create_dir_all(parent).map_err(|e| HarnessError::io(parent, e))?;
    }
    fs::write(path, bytes).map_err(|e| HarnessError::io(path, e))
}

/// Paths written by [`write_table`].
#[derive(Debug, Clone, PartialEq)]
pub struct TableFiles {
    pub csv: PathBuf,
    pub json: PathBuf,
    pub summary_csv: PathBuf,
    pub summary_json: PathBuf,
    pub markdown: PathBuf,
}

/// Writes `{stem}.csv`, `{stem}.json` and their `_summary` forms under `dir`.
pub fn write_table(dir: &Path, stem: &str, rows: &[ReportRow]) -> Result<TableFiles> {
    check_unique(rows)?;
    let files = TableFiles {
        csv: dir.join(format!("{stem}.csv")),
        json: dir.join(format!("{stem}.json")),
        summary_csv: dir.join(format!("{stem}_summary.csv")),
        summary_json: dir.join(format!("{stem}_summary.json")),
        markdown: dir.join(format!("{stem}_summary.md")),
    };
    write_file(&files.csv, &rows_to_csv(rows)?)?;
    write_file(&files.json, &serde_json::to_vec_pretty(rows)?)?;
    let summary = summarize(rows);
    let mut w = csv::Writer::from_writer(Vec::new());
    for s in &summary {
        w.serialize(s)?;
    }
    let bytes = w.into_inner().map_err(|e| HarnessError::Usage(e.to_string()))?;
    write_file(&files.summary_csv, &bytes)?;
    write_file(&files.summary_json, &serde_json::to_vec_pretty(&summary)?)?;
    write_file(&files.markdown, markdown_table(&summary).as_bytes())?;
    Ok(files)
}

/// Reads a table back from both formats and checks they agree exactly.
pub fn read_consistent(files: &TableFiles) -> Result<Vec<ReportRow>> {
    let csv_bytes = fs::read(&files.csv).map_err(|e| HarnessError::io(&files.csv, e))?;
    let json_bytes = fs::read(&files.json).map_err(|e| HarnessError::io(&files.json, e))?;
    let from_csv = rows_from_csv(&csv_bytes)?;
    let from_json: Vec<ReportRow> = serde_json::from_slice(&json_bytes)?;
    if from_csv != from_json {
        return Err(HarnessError::Usage(format!("{} and {} disagree", files.csv.display(), files.json.display())));
    }
    Ok(from_json)
}

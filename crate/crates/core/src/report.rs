//! JSON and CSV emission of results.
//!
//! JSON objects come out with sorted keys and every float rounded to 10
//! significant digits, so repeated runs produce identical bytes. CSV is a
//! header row followed by one row per class, record or grid point.

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};
use serde_json::Value;

use crate::episode::EpisodeReport;
use crate::error::{Error, Result};
use crate::threshold::{EpisodeRecord, SweepResult};

pub const SIGNIFICANT_DIGITS: usize = 10;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ReportFormat {
    Json,
    Csv,
}

/// Anything that can be written as JSON and as a CSV table.
pub trait Report: Serialize {
    fn csv_header(&self) -> Vec<String>;
    fn csv_rows(&self) -> Vec<Vec<String>>;
}

/// Round to `SIGNIFICANT_DIGITS` significant digits.
pub fn round_sig(x: f64) -> f64 {
    if x == 0.0 || !x.is_finite() {
        return x;
    }
    format!("{:.*e}", SIGNIFICANT_DIGITS - 1, x)
        .parse()
        .unwrap_or(x)
}

pub fn fmt_float(x: f64) -> String {
    format!("{}", round_sig(x))
}

fn round_value(v: Value) -> Value {
    match v {
        Value::Number(n) if n.is_f64() => n
            .as_f64()
            .and_then(|f| serde_json::Number::from_f64(round_sig(f)))
            .map_or(Value::Null, Value::Number),
        Value::Array(items) => Value::Array(items.into_iter().map(round_value).collect()),
        Value::Object(map) => Value::Object(map.into_iter().map(|(k, v)| (k, round_value(v))).collect()),
        other => other,
    }
}

pub fn to_json<R: Serialize + ?Sized>(report: &R) -> Result<String> {
    let value = serde_json::to_value(report).map_err(|e| Error::Serialization(e.to_string()))?;
    let mut text = serde_json::to_string_pretty(&round_value(value))
        .map_err(|e| Error::Serialization(e.to_string()))?;
    text.push('\n');
    Ok(text)
}

pub fn to_csv<R: Report + ?Sized>(report: &R) -> Result<String> {
    let mut w = csv::Writer::from_writer(Vec::new());
    let ser = |e: csv::Error| Error::Serialization(e.to_string());
    w.write_record(report.csv_header()).map_err(ser)?;
    for row in report.csv_rows() {
        w.write_record(row).map_err(ser)?;
    }
    let bytes = w
        .into_inner()
        .map_err(|e| Error::Serialization(e.to_string()))?;
    String::from_utf8(bytes).map_err(|e| Error::Serialization(e.to_string()))
}

pub fn emit_report<R: Report + ?Sized>(report: &R, format: ReportFormat, path: impl AsRef<Path>) -> Result<()> {
    let text = match format {
        ReportFormat::Json => to_json(report)?,
        ReportFormat::Csv => to_csv(report)?,
    };
    let path = path.as_ref();
    fs::write(path, text).map_err(|e| Error::io(path, e))
}

/// Two-column `(x, value)` CSV for a single plotted curve.
pub fn curve_csv(x_name: &str, y_name: &str, points: impl IntoIterator<Item = (f64, f64)>) -> String {
    let mut out = format!("{x_name},{y_name}\n");
    for (x, y) in points {
        out.push_str(&format!("{},{}\n", fmt_float(x), fmt_float(y)));
    }
    out
}

impl Report for EpisodeReport {
    fn csv_header(&self) -> Vec<String> {
        ["method", "class", "dice", "ce", "prior_fg", "boundary", "predicted_fg", "true_fg"]
            .map(String::from)
            .to_vec()
    }

    fn csv_rows(&self) -> Vec<Vec<String>> {
        self.dice
            .iter()
            .enumerate()
            .map(|(i, &d)| {
                vec![
                    self.method.clone(),
                    (i + 1).to_string(),
                    fmt_float(d),
                    fmt_float(self.ce),
                    fmt_float(self.prior_fg),
                    self.boundary.map(fmt_float).unwrap_or_default(),
                    self.predicted_fg.to_string(),
                    self.true_fg.to_string(),
                ]
            })
            .collect()
    }
}

impl Report for SweepResult {
    fn csv_header(&self) -> Vec<String> {
        ["x", "ce", "dice"].map(String::from).to_vec()
    }

    fn csv_rows(&self) -> Vec<Vec<String>> {
        self.points
            .iter()
            .map(|p| vec![fmt_float(p.x), fmt_float(p.ce), fmt_float(p.dice)])
            .collect()
    }
}

impl Report for [EpisodeRecord] {
    fn csv_header(&self) -> Vec<String> {
        ["support_fg_count", "slice_loc", "icp"].map(String::from).to_vec()
    }

    fn csv_rows(&self) -> Vec<Vec<String>> {
        self.iter()
            .map(|r| {
                vec![
                    r.support_fg_count.to_string(),
                    fmt_float(r.slice_loc),
                    fmt_float(r.icp),
                ]
            })
            .collect()
    }
}

impl Report for Vec<EpisodeRecord> {
    fn csv_header(&self) -> Vec<String> {
        self.as_slice().csv_header()
    }

    fn csv_rows(&self) -> Vec<Vec<String>> {
        self.as_slice().csv_rows()
    }
}

//! Report JSON (schema v1) and the Δ-PPL CSV table.
//!
//! Reports are written in canonical form: object keys sorted, floats printed
//! with six significant digits (`1.23457e-3`), integers verbatim. Parsing a
//! canonical file and emitting it again reproduces the same bytes.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::fs;
use std::path::Path;
use std::time::{Duration, UNIX_EPOCH};

use serde::{Deserialize, Serialize};
use serde_json::Value;
use sha2::{Digest, Sha256};

use super::delta_ppl;
use crate::error::{QlabError, Result};

pub const SCHEMA_VERSION: u32 = 1;

pub fn sha256_hex(bytes: &[u8]) -> String {
    format!("{:x}", Sha256::digest(bytes))
}

/// RFC 3339 time from `SOURCE_DATE_EPOCH`, or the Unix epoch when unset, so
/// reruns produce identical artifacts.
pub fn deterministic_timestamp() -> String {
    let secs = std::env::var("SOURCE_DATE_EPOCH")
        .ok()
        .and_then(|s| s.trim().parse::<u64>().ok())
        .unwrap_or(0);
    humantime::format_rfc3339_seconds(UNIX_EPOCH + Duration::from_secs(secs)).to_string()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunManifest {
    pub command: Vec<String>,
    pub seed: u64,
    pub config_hash: String,
    pub model_hash: String,
    /// File name → sha256 of every container read or written.
    pub container_hashes: BTreeMap<String, String>,
    pub method: String,
    pub calib_strategy: String,
    pub spec: Value,
    pub tool_version: String,
    pub timestamp: String,
}

impl RunManifest {
    pub fn validate(&self) -> Result<()> {
        let missing = |field: &str| Err(QlabError::Validation(format!("manifest field `{field}` is empty")));
        if self.command.is_empty() {
            return missing("command");
        }
        for (field, v) in [
            ("config_hash", &self.config_hash),
            ("model_hash", &self.model_hash),
            ("method", &self.method),
            ("calib_strategy", &self.calib_strategy),
            ("tool_version", &self.tool_version),
            ("timestamp", &self.timestamp),
        ] {
            if v.is_empty() {
                return missing(field);
            }
        }
        if self.spec.is_null() {
            return missing("spec");
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum Metric {
    Scalar(f64),
    Vector(Vec<f64>),
    /// Row-major nested arrays.
    Matrix(Vec<Vec<f64>>),
    Label(String),
}

impl Metric {
    fn is_finite(&self) -> bool {
        match self {
            Metric::Scalar(v) => v.is_finite(),
            Metric::Vector(v) => v.iter().all(|x| x.is_finite()),
            Metric::Matrix(m) => m.iter().flatten().all(|x| x.is_finite()),
            Metric::Label(_) => true,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DiagnosticsReport {
    pub manifest: RunManifest,
    pub metrics: BTreeMap<String, Metric>,
    pub schema_version: u32,
}

impl DiagnosticsReport {
    pub fn new(manifest: RunManifest) -> Self {
        Self {
            manifest,
            metrics: BTreeMap::new(),
            schema_version: SCHEMA_VERSION,
        }
    }

    pub fn insert(&mut self, name: impl Into<String>, metric: Metric) {
        self.metrics.insert(name.into(), metric);
    }

    pub fn scalar(&mut self, name: impl Into<String>, v: f64) {
        self.insert(name, Metric::Scalar(v));
    }

    pub fn validate(&self) -> Result<()> {
        self.manifest.validate()?;
        if self.schema_version != SCHEMA_VERSION {
            return Err(QlabError::Validation(format!(
                "schema_version {} (expected {SCHEMA_VERSION})",
                self.schema_version
            )));
        }
        if let Some((name, _)) = self.metrics.iter().find(|(_, m)| !m.is_finite()) {
            return Err(QlabError::Validation(format!("metric `{name}` is not finite")));
        }
        Ok(())
    }

    pub fn to_canonical_json(&self) -> Result<String> {
        self.validate()?;
        let mut out = String::new();
        write_canonical(&serde_json::to_value(self)?, &mut out);
        out.push('\n');
        Ok(out)
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let r: Self = serde_json::from_str(text)?;
        r.validate()?;
        Ok(r)
    }

    pub fn emit(&self, path: &Path) -> Result<()> {
        let text = self.to_canonical_json()?;
        fs::write(path, text)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_json(&fs::read_to_string(path)?)
    }
}

pub(crate) fn format_float(v: f64) -> String {
    if v == 0.0 {
        "0.0".to_string()
    } else {
        format!("{v:.5e}")
    }
}

/// Compact canonical JSON: sorted keys, fixed float format.
pub fn write_canonical(v: &Value, out: &mut String) {
    match v {
        Value::Null => out.push_str("null"),
        Value::Bool(b) => out.push_str(if *b { "true" } else { "false" }),
        Value::Number(n) => {
            if n.is_f64() {
                out.push_str(&format_float(n.as_f64().expect("f64")));
            } else {
                let _ = write!(out, "{n}");
            }
        }
        Value::String(s) => out.push_str(&serde_json::to_string(s).expect("string")),
        Value::Array(items) => {
            out.push('[');
            for (i, item) in items.iter().enumerate() {
                if i > 0 {
                    out.push(',');
                }
                write_canonical(item, out);
            }
            out.push(']');
        }
        Value::Object(map) => {
            let mut keys: Vec<&String> = map.keys().collect();
            keys.sort();
            out.push('{');
            for (i, k) in keys.into_iter().enumerate() {
                if i > 0 {
                    out.push(',');
                }
                out.push_str(&serde_json::to_string(k).expect("string"));
                out.push(':');
                write_canonical(&map[k], out);
            }
            out.push('}');
        }
    }
}

/// Per-language perplexities of one (method, calibration) cell.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PplCell {
    pub method: String,
    pub calibration: String,
    pub ppl: BTreeMap<String, f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct DeltaRow {
    pub method: String,
    pub calibration: String,
    pub deltas: Vec<f64>,
    pub avg: f64,
}

/// Δ-PPL against the baseline calibration of the same method.
#[derive(Debug, Clone, PartialEq)]
pub struct DeltaTable {
    pub languages: Vec<String>,
    pub rows: Vec<DeltaRow>,
}

pub fn delta_table(cells: &[PplCell], baseline: &str) -> Result<DeltaTable> {
    let Some(first) = cells.first() else {
        return Err(QlabError::EmptyInput("delta_table"));
    };
    let languages: Vec<String> = first.ppl.keys().cloned().collect();
    if languages.is_empty() {
        return Err(QlabError::EmptyInput("delta_table languages"));
    }
    let mut rows = Vec::with_capacity(cells.len());
    for cell in cells {
        if !cell.ppl.keys().eq(languages.iter()) {
            return Err(QlabError::ShapeMismatch(format!(
                "cell {}/{} evaluates different languages",
                cell.method, cell.calibration
            )));
        }
        let base = cells
            .iter()
            .find(|c| c.method == cell.method && c.calibration == baseline)
            .ok_or_else(|| {
                QlabError::config("/baseline", format!("no `{baseline}` cell for method {}", cell.method))
            })?;
        let deltas = languages
            .iter()
            .map(|l| delta_ppl(base.ppl[l], cell.ppl[l]))
            .collect::<Result<Vec<f64>>>()?;
        let avg = deltas.iter().sum::<f64>() / deltas.len() as f64;
        rows.push(DeltaRow {
            method: cell.method.clone(),
            calibration: cell.calibration.clone(),
            deltas,
            avg,
        });
    }
    Ok(DeltaTable { languages, rows })
}

impl DeltaTable {
    pub fn to_csv(&self) -> Result<String> {
        let mut w = csv::Writer::from_writer(Vec::new());
        let mut header = vec!["method".to_string(), "calibration".to_string()];
        header.extend(self.languages.iter().cloned());
        header.push("Avg".into());
        w.write_record(&header).map_err(csv_err)?;
        for row in &self.rows {
            let mut rec = vec![row.method.clone(), row.calibration.clone()];
            rec.extend(row.deltas.iter().chain([&row.avg]).map(|v| format!("{v:.6}")));
            w.write_record(&rec).map_err(csv_err)?;
        }
        let bytes = w.into_inner().map_err(|e| QlabError::Io(e.into_error()))?;
        Ok(String::from_utf8(bytes).expect("utf-8 csv"))
    }
}

fn csv_err(e: csv::Error) -> QlabError {
    QlabError::Io(std::io::Error::other(e))
}

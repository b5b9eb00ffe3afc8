use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};
use std::time::{SystemTime, UNIX_EPOCH};

use eos_core::optimizers::TraceRecord;
use serde::Serialize;
use serde_json::Value;

use crate::error::CliError;

/// Shortest round-trip decimal form; empty for missing values.
pub fn cell(v: Option<f64>) -> String {
    match v {
        Some(x) => format!("{x}"),
        None => String::new(),
    }
}

fn finite(v: f64) -> Option<f64> {
    v.is_finite().then_some(v)
}

pub fn ensure_dir(dir: &Path) -> Result<(), CliError> {
    fs::create_dir_all(dir).map_err(|e| CliError::io(dir, e))
}

/// Writes `rows` under `header` to `path`.
pub fn write_csv(path: &Path, header: &[String], rows: impl IntoIterator<Item = Vec<String>>) -> Result<(), CliError> {
    let mut w = csv::Writer::from_path(path)?;
    w.write_record(header)?;
    for row in rows {
        w.write_record(&row)?;
    }
    w.flush().map_err(|e| CliError::io(path, e))
}

/// Largest manifold co-dimension among the diagnosed records.
pub fn max_codim(records: &[TraceRecord]) -> usize {
    records
        .iter()
        .filter_map(|r| r.diagnostics.as_ref()?.manifold.as_ref().map(|m| m.r.len()))
        .max()
        .unwrap_or(0)
}

pub fn trace_header(m_max: usize) -> Vec<String> {
    let mut h: Vec<String> = [
        "step",
        "loss",
        "sqrt_loss",
        "grad_norm",
        "eta_effective",
        "lambda1_at_x",
        "lambda1_at_phi",
        "alignment",
        "theta",
        "G",
        "tilde_norm",
    ]
    .iter()
    .map(|s| s.to_string())
    .collect();
    h.extend((1..=m_max).map(|j| format!("R_{j}")));
    h.extend(["stableness", "stableness_lb", "noise_applied"].iter().map(|s| s.to_string()));
    h
}

pub fn trace_row(r: &TraceRecord, m_max: usize) -> Vec<String> {
    let d = r.diagnostics.as_ref();
    let obs = d.and_then(|d| d.manifold.as_ref());
    let st = d.and_then(|d| d.stableness.as_ref());
    let mut row = vec![
        r.step.to_string(),
        cell(Some(r.loss)),
        cell(Some(r.sqrt_loss)),
        cell(Some(r.grad_norm)),
        cell(finite(r.eta_effective)),
        cell(d.and_then(|d| finite(d.lambda1_at_x))),
        cell(d.and_then(|d| d.lambda1_at_phi)),
        cell(d.and_then(|d| d.alignment)),
        cell(obs.map(|o| o.theta)),
        cell(obs.map(|o| o.g)),
        cell(obs.map(|o| o.tilde_norm)),
    ];
    row.extend((0..m_max).map(|j| cell(obs.and_then(|o| o.r.get(j).copied()))));
    row.push(cell(st.map(|s| s.value)));
    row.push(cell(st.map(|s| s.lower_bound)));
    row.push(r.noise_applied.to_string());
    row
}

pub fn write_trace(path: &Path, records: &[TraceRecord]) -> Result<(), CliError> {
    let m_max = max_codim(records);
    write_csv(path, &trace_header(m_max), records.iter().map(|r| trace_row(r, m_max)))
}

#[derive(Debug, Serialize)]
pub struct Summary {
    pub command: String,
    /// Seconds since the Unix epoch; the only non-deterministic field in any output.
    pub timestamp: u64,
    pub config: Option<Value>,
    pub results: Value,
    /// `"pass"` or `"fail"` per requested property check.
    pub checks: BTreeMap<String, &'static str>,
    pub files: Vec<PathBuf>,
}

impl Summary {
    pub fn new(command: &str, config: Option<Value>) -> Self {
        let timestamp = SystemTime::now().duration_since(UNIX_EPOCH).map(|d| d.as_secs()).unwrap_or(0);
        Summary { command: command.into(), timestamp, config, results: Value::Null, checks: BTreeMap::new(), files: Vec::new() }
    }

    pub fn check(&mut self, name: &str, pass: bool) {
        self.checks.insert(name.into(), if pass { "pass" } else { "fail" });
    }

    pub fn all_passed(&self) -> bool {
        self.checks.values().all(|v| *v == "pass")
    }

    pub fn write(&self, dir: &Path) -> Result<PathBuf, CliError> {
        let path = dir.join("summary.json");
        let text = serde_json::to_string_pretty(self).expect("summary serializes");
        fs::write(&path, text + "\n").map_err(|e| CliError::io(&path, e))?;
        Ok(path)
    }
}

/// A CSV read back as named columns; empty cells become `None`.
pub struct Table {
    pub header: Vec<String>,
    pub columns: Vec<Vec<Option<f64>>>,
}

impl Table {
    pub fn read(path: &Path) -> Result<Self, CliError> {
        let mut r = csv::Reader::from_path(path).map_err(|e| CliError::Config(format!("{}: {e}", path.display())))?;
        let header: Vec<String> = r.headers()?.iter().map(String::from).collect();
        let mut columns = vec![Vec::new(); header.len()];
        for (i, rec) in r.records().enumerate() {
            let rec = rec?;
            for (j, col) in columns.iter_mut().enumerate() {
                let raw = rec.get(j).unwrap_or("").trim();
                let v = match raw {
                    "" => None,
                    "true" => Some(1.0),
                    "false" => Some(0.0),
                    s => Some(s.parse::<f64>().map_err(|_| {
                        CliError::Config(format!("{}: row {}: column {} is not numeric: {s:?}", path.display(), i + 2, header[j]))
                    })?),
                };
                col.push(v);
            }
        }
        Ok(Table { header, columns })
    }

    pub fn column(&self, name: &str) -> Option<&[Option<f64>]> {
        self.header.iter().position(|h| h == name).map(|i| self.columns[i].as_slice())
    }
}

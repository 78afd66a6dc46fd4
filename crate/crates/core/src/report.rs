//! Evaluation reports and their JSON / CSV renderings.
//!
//! CSV columns: `experiment,env,coordinate,p_or_lambda,raw_return,normalized,pct_of_original,seed`.
//! Failed grid cells keep their coordinates and carry `FAILED` in the numeric columns.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::io::{read_file, write_atomic};
use crate::{Error, Result};

pub const CSV_HEADER: &str = "experiment,env,coordinate,p_or_lambda,raw_return,normalized,pct_of_original,seed";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ReportRow {
    pub experiment: String,
    pub env: String,
    /// Layer, selector, mode or other grid coordinate.
    pub coordinate: String,
    pub p_or_lambda: Option<f64>,
    pub raw_return: Option<f64>,
    pub normalized: Option<f64>,
    /// `100 * normalized / baseline normalized` of the same env in this report.
    pub pct_of_original: Option<f64>,
    pub seed: u64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub error: Option<String>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Baseline {
    pub env: String,
    pub raw_return: f64,
    pub normalized: f64,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub run_id: String,
    pub experiment: String,
    pub seed: u64,
    pub baselines: Vec<Baseline>,
    pub rows: Vec<ReportRow>,
    /// Auxiliary results (distances, size accounting, learning curves).
    #[serde(default)]
    pub notes: BTreeMap<String, serde_json::Value>,
}

pub fn pct_of(normalized: f64, baseline: f64) -> f64 {
    100.0 * normalized / baseline
}

fn opt(v: Option<f64>, failed: bool) -> String {
    match (v, failed) {
        (Some(x), _) => x.to_string(),
        (None, true) => "FAILED".into(),
        (None, false) => String::new(),
    }
}

fn csv_field(s: &str) -> String {
    if s.contains([',', '"', '\n']) {
        format!("\"{}\"", s.replace('"', "\"\""))
    } else {
        s.to_string()
    }
}

impl EvalReport {
    pub fn baseline(&self, env: &str) -> Option<&Baseline> {
        self.baselines.iter().find(|b| b.env == env)
    }

    pub fn failed(&self) -> bool {
        self.rows.iter().any(|r| r.error.is_some())
    }

    pub fn to_csv(&self) -> String {
        let mut out = String::from(CSV_HEADER);
        out.push('\n');
        for r in &self.rows {
            let failed = r.error.is_some();
            let p = r.p_or_lambda.map(|v| v.to_string()).unwrap_or_default();
            let _ = writeln!(
                out,
                "{},{},{},{},{},{},{},{}",
                csv_field(&r.experiment),
                csv_field(&r.env),
                csv_field(&r.coordinate),
                p,
                opt(r.raw_return, failed),
                opt(r.normalized, failed),
                opt(r.pct_of_original, failed),
                r.seed
            );
        }
        out
    }

    pub fn to_json(&self) -> Result<Vec<u8>> {
        let mut v = serde_json::to_vec_pretty(self)?;
        v.push(b'\n');
        Ok(v)
    }

    pub fn from_json(bytes: &[u8]) -> Result<Self> {
        Ok(serde_json::from_slice(bytes)?)
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_json(&read_file(path)?)
    }

    /// Writes `<dir>/<run_id>.json` and `<dir>/<run_id>.csv`. An existing run
    /// id is never overwritten with different content.
    pub fn save(&self, dir: &Path) -> Result<()> {
        std::fs::create_dir_all(dir)?;
        let files = [
            (dir.join(format!("{}.json", self.run_id)), self.to_json()?),
            (dir.join(format!("{}.csv", self.run_id)), self.to_csv().into_bytes()),
        ];
        for (path, bytes) in &files {
            if let Ok(existing) = std::fs::read(path) {
                if &existing != bytes {
                    return Err(Error::Config(format!(
                        "report {} already exists with different content; use a new run id",
                        path.display()
                    )));
                }
            }
        }
        for (path, bytes) in &files {
            write_atomic(path, bytes)?;
        }
        Ok(())
    }
}

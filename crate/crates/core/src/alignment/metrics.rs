//! Per-step training metrics and their CSV form.

use std::fmt::Write as _;
use std::fs::OpenOptions;
use std::io::Write;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub const METRICS_HEADER: &str = "step,phase,loss_critic,loss_gen,w_estimate,loss_det,wall_time";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricsRecord {
    pub step: usize,
    pub phase: String,
    pub loss_critic: Option<f64>,
    pub loss_generator: Option<f64>,
    pub w_estimate: Option<f64>,
    pub loss_det: Option<f64>,
    pub wall_time: f64,
}

impl MetricsRecord {
    pub fn new(step: usize, phase: &str) -> Self {
        Self {
            step,
            phase: phase.to_string(),
            loss_critic: None,
            loss_generator: None,
            w_estimate: None,
            loss_det: None,
            wall_time: 0.0,
        }
    }

    /// One CSV row; absent values are empty fields.
    pub fn csv_row(&self) -> String {
        let f = |v: Option<f64>| v.map(|x| x.to_string()).unwrap_or_default();
        format!(
            "{},{},{},{},{},{},{}",
            self.step,
            self.phase,
            f(self.loss_critic),
            f(self.loss_generator),
            f(self.w_estimate),
            f(self.loss_det),
            self.wall_time
        )
    }
}

pub fn to_csv(records: &[MetricsRecord]) -> String {
    let mut s = String::with_capacity(64 * (records.len() + 1));
    s.push_str(METRICS_HEADER);
    s.push('\n');
    for r in records {
        let _ = writeln!(s, "{}", r.csv_row());
    }
    s
}

/// Appends records to a CSV file, writing the header when the file is new
/// or empty.
pub fn append_csv(path: &Path, records: &[MetricsRecord]) -> Result<()> {
    let fresh = std::fs::metadata(path).map(|m| m.len() == 0).unwrap_or(true);
    let mut file = OpenOptions::new()
        .create(true)
        .append(true)
        .open(path)
        .map_err(|e| Error::io(path, e))?;
    let mut s = if fresh { to_csv(records) } else { String::new() };
    if !fresh {
        for r in records {
            let _ = writeln!(s, "{}", r.csv_row());
        }
    }
    file.write_all(s.as_bytes()).map_err(|e| Error::io(path, e))
}

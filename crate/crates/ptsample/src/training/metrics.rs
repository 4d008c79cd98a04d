//! Flat metric records shared by training and evaluation, with CSV and
//! summary-JSON output.

use std::fs;
use std::path::Path;

use serde_json::{json, Value};

use crate::error::{Error, Result};

/// One recorded value. `m` is the sample size the value refers to, when
/// there is one (eval metrics); per-epoch training losses leave it empty.
#[derive(Debug, Clone, PartialEq)]
pub struct MetricRow {
    pub epoch: usize,
    pub split: String,
    pub metric: String,
    pub m: Option<usize>,
    pub value: f64,
}

/// Append-only metric log.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct Metrics {
    pub rows: Vec<MetricRow>,
}

impl Metrics {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn push(
        &mut self,
        epoch: usize,
        split: &str,
        metric: &str,
        m: Option<usize>,
        value: f64,
    ) {
        debug_assert!(value.is_finite(), "{split}/{metric} is not finite: {value}");
        self.rows.push(MetricRow {
            epoch,
            split: split.to_string(),
            metric: metric.to_string(),
            m,
            value,
        });
    }

    /// Merge another log into this one, keeping row order.
    pub fn extend(&mut self, other: Metrics) {
        self.rows.extend(other.rows);
    }

    /// Last recorded value for a (split, metric, m) key.
    pub fn last(&self, split: &str, metric: &str, m: Option<usize>) -> Option<f64> {
        self.rows
            .iter()
            .rev()
            .find(|r| r.split == split && r.metric == metric && r.m == m)
            .map(|r| r.value)
    }

    /// All (epoch, value) pairs for a (split, metric, m) key, in recorded
    /// order.
    pub fn series(&self, split: &str, metric: &str, m: Option<usize>) -> Vec<(usize, f64)> {
        self.rows
            .iter()
            .filter(|r| r.split == split && r.metric == metric && r.m == m)
            .map(|r| (r.epoch, r.value))
            .collect()
    }

    /// CSV with one row per record; `m` renders empty when absent.
    pub fn to_csv(&self) -> String {
        let mut out = String::from("epoch,split,metric,m,value\n");
        for r in &self.rows {
            let m = r.m.map(|v| v.to_string()).unwrap_or_default();
            out.push_str(&format!(
                "{},{},{},{},{}\n",
                r.epoch, r.split, r.metric, m, r.value
            ));
        }
        out
    }

    pub fn save_csv(&self, path: &Path) -> Result<()> {
        fs::write(path, self.to_csv())
            .map_err(|e| Error::io(path.display().to_string(), e))
    }

    /// Summary object: row count plus the final value of every
    /// (split, metric, m) key.
    pub fn summary(&self) -> Value {
        let mut final_values = serde_json::Map::new();
        for r in &self.rows {
            let key = match r.m {
                Some(m) => format!("{}/{}@{m}", r.split, r.metric),
                None => format!("{}/{}", r.split, r.metric),
            };
            final_values.insert(key, json!(r.value));
        }
        json!({ "rows": self.rows.len(), "final": Value::Object(final_values) })
    }

    pub fn save_summary(&self, path: &Path) -> Result<()> {
        let text = serde_json::to_string_pretty(&self.summary()).expect("summary serializes");
        fs::write(path, text).map_err(|e| Error::io(path.display().to_string(), e))
    }
}

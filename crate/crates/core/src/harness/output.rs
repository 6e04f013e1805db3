//! CSV tables and the JSON run summary.

use std::collections::BTreeMap;
use std::fs;
use std::path::Path;

use nalgebra::{DMatrix, DVector};
use serde::Serialize;

/// Column-major numeric table with named headers.
#[derive(Debug, Clone, Default)]
pub struct Table {
    pub headers: Vec<String>,
    pub rows: Vec<Vec<f64>>,
}

impl Table {
    pub fn new(headers: Vec<String>) -> Self {
        Self { headers, rows: Vec::new() }
    }

    pub fn push(&mut self, row: Vec<f64>) {
        debug_assert_eq!(row.len(), self.headers.len());
        self.rows.push(row);
    }

    pub fn write(&self, path: &Path) -> std::io::Result<()> {
        let mut w = csv::Writer::from_path(path)?;
        w.write_record(&self.headers)?;
        for row in &self.rows {
            // `{:?}` round-trips f64 exactly
            w.write_record(row.iter().map(|v| format!("{v:?}")))?;
        }
        w.flush()
    }
}

pub fn vector_headers(prefix: &str, n: usize) -> Vec<String> {
    (0..n).map(|i| format!("{prefix}_{i}")).collect()
}

pub fn matrix_headers(prefix: &str, rows: usize, cols: usize) -> Vec<String> {
    (0..rows).flat_map(|i| (0..cols).map(move |j| format!("{prefix}_{i}_{j}"))).collect()
}

/// Row-major entries.
pub fn flatten(m: &DMatrix<f64>) -> Vec<f64> {
    (0..m.nrows()).flat_map(|i| (0..m.ncols()).map(move |j| m[(i, j)])).collect()
}

pub fn to_vec(v: &DVector<f64>) -> Vec<f64> {
    v.iter().copied().collect()
}

/// Contents of `summary.json`. `values` holds named scalars and flags and is
/// flattened into the top level.
#[derive(Debug, Clone, Serialize)]
pub struct Summary {
    pub experiment: String,
    pub seed: u64,
    pub passed: bool,
    pub checks: BTreeMap<String, bool>,
    #[serde(flatten)]
    pub values: BTreeMap<String, serde_json::Value>,
    pub files: Vec<String>,
}

impl Summary {
    pub fn new(experiment: &str, seed: u64) -> Self {
        Self {
            experiment: experiment.to_string(),
            seed,
            passed: true,
            checks: BTreeMap::new(),
            values: BTreeMap::new(),
            files: Vec::new(),
        }
    }

    pub fn check(&mut self, name: &str, ok: bool) {
        self.checks.insert(name.to_string(), ok);
        self.passed &= ok;
    }

    pub fn scalar(&mut self, name: &str, value: f64) {
        // JSON has no NaN or infinity
        let v = serde_json::Number::from_f64(value).map_or(serde_json::Value::Null, serde_json::Value::Number);
        self.values.insert(name.to_string(), v);
    }

    pub fn flag(&mut self, name: &str, value: bool) {
        self.values.insert(name.to_string(), serde_json::Value::Bool(value));
    }

    pub fn vector(&mut self, name: &str, v: &[f64]) {
        let arr = v
            .iter()
            .map(|&x| serde_json::Number::from_f64(x).map_or(serde_json::Value::Null, serde_json::Value::Number))
            .collect();
        self.values.insert(name.to_string(), serde_json::Value::Array(arr));
    }

    pub fn get(&self, name: &str) -> Option<&serde_json::Value> {
        self.values.get(name)
    }

    pub fn get_f64(&self, name: &str) -> Option<f64> {
        self.values.get(name).and_then(serde_json::Value::as_f64)
    }

    pub fn write(&self, path: &Path) -> std::io::Result<()> {
        let text = serde_json::to_string_pretty(self).map_err(std::io::Error::other)?;
        fs::write(path, text + "\n")
    }
}

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::fs;
use std::io::{BufRead, BufReader};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// One line of a predictions file.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Prediction {
    pub id: String,
    pub task: String,
    pub output: String,
    pub gold: String,
}

pub fn write_predictions(path: &Path, preds: &[Prediction]) -> Result<()> {
    let mut out = Vec::new();
    for p in preds {
        serde_json::to_writer(&mut out, p).map_err(|e| Error::Malformed(e.to_string()))?;
        out.push(b'\n');
    }
    fs::write(path, out).map_err(|e| Error::io(path, e))
}

pub fn read_predictions(path: &Path) -> Result<Vec<Prediction>> {
    let f = fs::File::open(path).map_err(|e| Error::io(path, e))?;
    let mut preds = Vec::new();
    for (i, line) in BufReader::new(f).lines().enumerate() {
        let line = line.map_err(|e| Error::io(path, e))?;
        if line.trim().is_empty() {
            continue;
        }
        preds.push(
            serde_json::from_str(&line).map_err(|e| Error::Malformed(format!("{}:{}: {e}", path.display(), i + 1)))?,
        );
    }
    Ok(preds)
}

/// Named scores, kept in insertion order for the table.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct MetricsReport {
    entries: Vec<(String, f64)>,
}

impl MetricsReport {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn insert(&mut self, name: impl Into<String>, value: f64) {
        let name = name.into();
        match self.entries.iter_mut().find(|(n, _)| *n == name) {
            Some(e) => e.1 = value,
            None => self.entries.push((name, value)),
        }
    }

    pub fn get(&self, name: &str) -> Option<f64> {
        self.entries.iter().find(|(n, _)| n == name).map(|e| e.1)
    }

    pub fn entries(&self) -> &[(String, f64)] {
        &self.entries
    }

    pub fn to_json(&self) -> String {
        let map: BTreeMap<&str, f64> = self.entries.iter().map(|(n, v)| (n.as_str(), *v)).collect();
        serde_json::to_string_pretty(&map).expect("string keys and floats serialize")
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        fs::write(path, self.to_json() + "\n").map_err(|e| Error::io(path, e))
    }

    pub fn table(&self) -> String {
        let width = self.entries.iter().map(|(n, _)| n.len()).max().unwrap_or(6).max(6);
        let mut s = String::new();
        let _ = writeln!(s, "{:<width$}  {:>10}", "metric", "value");
        let _ = writeln!(s, "{}", "-".repeat(width + 12));
        for (n, v) in &self.entries {
            let _ = writeln!(s, "{n:<width$}  {v:>10.4}");
        }
        s
    }
}

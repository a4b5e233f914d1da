use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};
use std::time::Instant;

use anyhow::Context;
use serde::Serialize;

pub const BUILD_ID: &str = env!("MELT_BUILD_ID");

/// What a command did, with enough settings to run it again.
#[derive(Debug, Serialize)]
pub struct RunManifest {
    pub command: String,
    pub args: Vec<String>,
    pub config: serde_json::Value,
    pub seed: Option<u64>,
    pub build: String,
    /// Seconds per phase, in execution order.
    pub timings: Vec<(String, f64)>,
    pub outputs: BTreeMap<String, PathBuf>,
}

impl RunManifest {
    pub fn new(command: &str) -> Self {
        RunManifest {
            command: command.to_string(),
            args: std::env::args().skip(1).collect(),
            config: serde_json::Value::Null,
            seed: None,
            build: BUILD_ID.to_string(),
            timings: Vec::new(),
            outputs: BTreeMap::new(),
        }
    }

    /// Runs `f` and records its wall-clock duration under `phase`.
    pub fn time<T>(&mut self, phase: &str, f: impl FnOnce() -> T) -> T {
        let t = Instant::now();
        let out = f();
        self.timings.push((phase.to_string(), t.elapsed().as_secs_f64()));
        out
    }

    pub fn output(&mut self, name: &str, path: &Path) {
        self.outputs.insert(name.to_string(), path.to_path_buf());
    }

    /// Written to a temporary sibling and renamed into place.
    pub fn write(&self, path: &Path) -> anyhow::Result<()> {
        let json = serde_json::to_string_pretty(self)?;
        let tmp = with_suffix(path, ".tmp");
        fs::write(&tmp, json + "\n").with_context(|| format!("writing {}", tmp.display()))?;
        fs::rename(&tmp, path).with_context(|| format!("renaming into {}", path.display()))?;
        Ok(())
    }
}

/// `path` with `suffix` appended to its file name.
pub fn with_suffix(path: &Path, suffix: &str) -> PathBuf {
    let mut s = path.as_os_str().to_owned();
    s.push(suffix);
    PathBuf::from(s)
}

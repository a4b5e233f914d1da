use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use crate::data::{Task, DEFAULT_MASK_PROB};
use crate::error::{Error, Result};
use crate::objectives::DWA_GAMMA;

/// Default WISE-FT interpolation coefficient.
pub const DEFAULT_ALPHA: f64 = 0.5;

/// Hyper-parameters of one training stage.
#[derive(Debug, Clone, PartialEq)]
pub struct StageConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
    pub warmup_epochs: usize,
    pub seed: u64,
    /// Tasks kept from the dataset.
    pub tasks: Vec<Task>,
    pub weight_decay: f64,
    pub p_mask: f64,
    pub gamma: f64,
    pub clip_norm: f64,
}

impl StageConfig {
    fn base(epochs: usize, batch_size: usize, learning_rate: f64, tasks: &[Task]) -> Self {
        StageConfig {
            epochs,
            batch_size,
            learning_rate,
            warmup_epochs: 1,
            seed: 0,
            tasks: tasks.to_vec(),
            weight_decay: 0.01,
            p_mask: DEFAULT_MASK_PROB,
            gamma: DWA_GAMMA,
            clip_norm: 1.0,
        }
    }

    /// Grounding warm-up at the published scale.
    pub fn paper_stage1() -> Self {
        Self::base(30, 64, 4e-5, &[Task::Grounding])
    }

    /// Joint training at the published scale.
    pub fn paper_stage2() -> Self {
        Self::base(15, 128, 2e-4, &Task::ALL)
    }

    pub fn desk_stage1() -> Self {
        Self::base(100, 16, 3e-3, &[Task::Grounding])
    }

    /// Contrastive-only run that produces the second merge operand.
    pub fn desk_retrieval() -> Self {
        Self::base(8, 32, 1e-3, &[Task::CaptionShort, Task::CaptionLong])
    }

    pub fn desk_stage2() -> Self {
        Self::base(250, 32, 2e-3, &Task::ALL)
    }

    pub fn validate(&self) -> Result<()> {
        let fail = |m: String| Err(Error::Config(m));
        if self.batch_size < 2 {
            return fail(format!("batch_size must be at least 2, got {}", self.batch_size));
        }
        if !(self.learning_rate > 0.0 && self.learning_rate.is_finite()) {
            return fail(format!("learning rate must be positive, got {}", self.learning_rate));
        }
        if self.epochs > 0 && self.warmup_epochs >= self.epochs {
            return fail(format!(
                "warmup_epochs {} must be below epochs {}",
                self.warmup_epochs, self.epochs
            ));
        }
        if !(self.p_mask > 0.0 && self.p_mask <= 1.0) {
            return fail(format!("p_mask must be in (0, 1], got {}", self.p_mask));
        }
        if !(self.gamma > 0.0) {
            return fail(format!("gamma must be positive, got {}", self.gamma));
        }
        if !(self.clip_norm > 0.0) || self.weight_decay < 0.0 {
            return fail("clip_norm must be positive and weight_decay non-negative".into());
        }
        if self.tasks.is_empty() {
            return fail("no tasks selected".into());
        }
        Ok(())
    }
}

/// Settings read from a `key=value` file; every field is optional so that
/// command-line flags can be layered on top.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct RunConfig {
    pub stage: Option<String>,
    pub epochs: Option<usize>,
    pub batch_size: Option<usize>,
    pub lr: Option<f64>,
    pub warmup_epochs: Option<usize>,
    pub seed: Option<u64>,
    pub alpha: Option<f64>,
    pub gamma: Option<f64>,
    pub p_mask: Option<f64>,
    pub data: Option<PathBuf>,
    pub out: Option<PathBuf>,
    pub init: Option<PathBuf>,
}

const KEYS: &[&str] = &[
    "stage",
    "epochs",
    "batch_size",
    "lr",
    "warmup_epochs",
    "seed",
    "alpha",
    "gamma",
    "p_mask",
    "data",
    "out",
    "init",
];

impl RunConfig {
    /// Parses `key=value` lines; blank lines and `#` comments are ignored.
    pub fn parse(text: &str) -> Result<Self> {
        let mut seen = BTreeMap::new();
        for (n, line) in text.lines().enumerate() {
            let line = line.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let (k, v) = line
                .split_once('=')
                .ok_or_else(|| Error::Config(format!("line {}: expected key=value", n + 1)))?;
            let (k, v) = (k.trim(), v.trim());
            if !KEYS.contains(&k) {
                return Err(Error::Config(format!("line {}: unknown key {k:?}", n + 1)));
            }
            if seen.insert(k.to_string(), v.to_string()).is_some() {
                return Err(Error::Config(format!("line {}: duplicate key {k:?}", n + 1)));
            }
        }
        fn num<T: std::str::FromStr>(m: &BTreeMap<String, String>, k: &str) -> Result<Option<T>> {
            m.get(k)
                .map(|v| v.parse().map_err(|_| Error::Config(format!("{k}: cannot parse {v:?}"))))
                .transpose()
        }
        Ok(RunConfig {
            stage: seen.get("stage").cloned(),
            epochs: num(&seen, "epochs")?,
            batch_size: num(&seen, "batch_size")?,
            lr: num(&seen, "lr")?,
            warmup_epochs: num(&seen, "warmup_epochs")?,
            seed: num(&seen, "seed")?,
            alpha: num(&seen, "alpha")?,
            gamma: num(&seen, "gamma")?,
            p_mask: num(&seen, "p_mask")?,
            data: seen.get("data").map(PathBuf::from),
            out: seen.get("out").map(PathBuf::from),
            init: seen.get("init").map(PathBuf::from),
        })
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::parse(&text)
    }

    /// Fields set in `over` replace those in `self`.
    pub fn overlay(self, over: RunConfig) -> RunConfig {
        RunConfig {
            stage: over.stage.or(self.stage),
            epochs: over.epochs.or(self.epochs),
            batch_size: over.batch_size.or(self.batch_size),
            lr: over.lr.or(self.lr),
            warmup_epochs: over.warmup_epochs.or(self.warmup_epochs),
            seed: over.seed.or(self.seed),
            alpha: over.alpha.or(self.alpha),
            gamma: over.gamma.or(self.gamma),
            p_mask: over.p_mask.or(self.p_mask),
            data: over.data.or(self.data),
            out: over.out.or(self.out),
            init: over.init.or(self.init),
        }
    }

    pub fn apply(&self, cfg: &mut StageConfig) {
        if let Some(v) = self.epochs {
            cfg.epochs = v;
        }
        if let Some(v) = self.batch_size {
            cfg.batch_size = v;
        }
        if let Some(v) = self.lr {
            cfg.learning_rate = v;
        }
        if let Some(v) = self.warmup_epochs {
            cfg.warmup_epochs = v;
        }
        if let Some(v) = self.seed {
            cfg.seed = v;
        }
        if let Some(v) = self.gamma {
            cfg.gamma = v;
        }
        if let Some(v) = self.p_mask {
            cfg.p_mask = v;
        }
    }
}

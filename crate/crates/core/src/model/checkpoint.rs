//! Binary checkpoint format: `"MELT"`, version, entry count, then per entry a
//! u16-length UTF-8 name, u8 rank, u32 dims and raw f32 values, all
//! little-endian. The model configuration travels as the first entry.

use std::fs;
use std::io::Write;
use std::path::Path;

use super::config::ModelConfig;
use super::params::Model;
use crate::error::{Error, Result};
use crate::numerics::Tensor;

pub const MAGIC: &[u8; 4] = b"MELT";
pub const VERSION: u32 = 1;
/// Reserved entry carrying the configuration.
pub const CONFIG_ENTRY: &str = "meta.config";

#[derive(Debug, Clone, PartialEq)]
pub struct Entry {
    pub name: String,
    pub shape: Vec<usize>,
    pub values: Vec<f32>,
}

/// Named f32 weights bound to the configuration they were produced with.
#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub config: ModelConfig,
    pub entries: Vec<Entry>,
}

impl Checkpoint {
    pub fn from_model(model: &Model) -> Self {
        let entries = model
            .named()
            .map(|(name, t)| Entry {
                name: name.to_string(),
                shape: t.shape().to_vec(),
                values: t.data().iter().map(|&v| v as f32).collect(),
            })
            .collect();
        Checkpoint {
            config: *model.config(),
            entries,
        }
    }

    pub fn to_model(&self) -> Result<Model> {
        let named = self
            .entries
            .iter()
            .map(|e| {
                let data = e.values.iter().map(|&v| f64::from(v)).collect();
                Ok((e.name.clone(), Tensor::new(e.shape.clone(), data)?))
            })
            .collect::<Result<Vec<_>>>()?;
        Model::from_named(self.config, named)
    }

    pub fn entry(&self, name: &str) -> Option<&Entry> {
        self.entries.iter().find(|e| e.name == name)
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::new();
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&VERSION.to_le_bytes());
        out.extend_from_slice(&(self.entries.len() as u32 + 1).to_le_bytes());
        let cfg = self.config.to_values();
        write_entry(&mut out, CONFIG_ENTRY, &[cfg.len()], &cfg);
        for e in &self.entries {
            write_entry(&mut out, &e.name, &e.shape, &e.values);
        }
        out
    }

    /// Parses and validates against the embedded configuration.
    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let mut r = Reader { bytes, pos: 0 };
        if r.take(4, "magic")? != MAGIC {
            return Err(Error::BadMagic { expected: "MELT" });
        }
        let version = r.u32("version")?;
        if version != VERSION {
            return Err(Error::UnsupportedVersion(version));
        }
        let count = r.u32("entry count")? as usize;
        if count == 0 {
            return Err(Error::Malformed("missing config entry".into()));
        }
        let mut entries = Vec::with_capacity(count.min(4096));
        for _ in 0..count {
            let len = r.u16("name length")? as usize;
            let name = std::str::from_utf8(r.take(len, "name")?)
                .map_err(|_| Error::Malformed("entry name is not UTF-8".into()))?
                .to_string();
            let rank = r.take(1, "rank")?[0] as usize;
            let mut shape = Vec::with_capacity(rank);
            for _ in 0..rank {
                shape.push(r.u32("dims")? as usize);
            }
            let n = shape
                .iter()
                .try_fold(1usize, |a, &d| a.checked_mul(d))
                .ok_or_else(|| Error::Malformed(format!("entry {name} is too large")))?;
            let raw = r.take(n.saturating_mul(4), "values")?;
            let values = raw
                .chunks_exact(4)
                .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
                .collect();
            entries.push(Entry { name, shape, values });
        }
        if r.pos != bytes.len() {
            return Err(Error::Malformed(format!("{} trailing bytes", bytes.len() - r.pos)));
        }
        let meta = entries.remove(0);
        if meta.name != CONFIG_ENTRY {
            return Err(Error::Malformed(format!(
                "first entry is {:?}, expected {CONFIG_ENTRY}",
                meta.name
            )));
        }
        let config = ModelConfig::from_values(&meta.values)?;
        let mut seen = std::collections::HashSet::new();
        if let Some(dup) = entries.iter().find(|e| !seen.insert(e.name.as_str())) {
            return Err(Error::Malformed(format!("duplicate entry {}", dup.name)));
        }
        let ckpt = Checkpoint { config, entries };
        ckpt.validate()?;
        Ok(ckpt)
    }

    /// Checks names, order and shapes against the configuration.
    pub fn validate(&self) -> Result<()> {
        let template = Model::new(self.config, 0)?;
        let expected: Vec<(&str, &Tensor)> = template.named().collect();
        for ((name, t), e) in expected.iter().zip(&self.entries) {
            if *name == e.name && t.shape() != e.shape.as_slice() {
                return Err(Error::ShapeMismatch {
                    name: e.name.clone(),
                    expected: t.shape().to_vec(),
                    found: e.shape.clone(),
                });
            }
        }
        let found: Vec<&str> = self.entries.iter().map(|e| e.name.as_str()).collect();
        let want: Vec<&str> = expected.iter().map(|e| e.0).collect();
        if found != want {
            let mut diff: Vec<String> = want
                .iter()
                .filter(|n| !found.contains(n))
                .chain(found.iter().filter(|n| !want.contains(n)))
                .map(|s| s.to_string())
                .collect();
            if diff.is_empty() {
                diff.push("(entry order)".into());
            }
            return Err(Error::NameMismatch(diff));
        }
        Ok(())
    }

    /// Writes through a temporary sibling so readers never see a partial file.
    pub fn save(&self, path: &Path) -> Result<()> {
        let tmp = path.with_extension("tmp");
        let mut f = fs::File::create(&tmp).map_err(|e| Error::io(&tmp, e))?;
        f.write_all(&self.to_bytes()).map_err(|e| Error::io(&tmp, e))?;
        f.sync_all().map_err(|e| Error::io(&tmp, e))?;
        fs::rename(&tmp, path).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
        Self::from_bytes(&bytes)
    }
}

fn write_entry(out: &mut Vec<u8>, name: &str, shape: &[usize], values: &[f32]) {
    out.extend_from_slice(&(name.len() as u16).to_le_bytes());
    out.extend_from_slice(name.as_bytes());
    out.push(shape.len() as u8);
    for &d in shape {
        out.extend_from_slice(&(d as u32).to_le_bytes());
    }
    for v in values {
        out.extend_from_slice(&v.to_le_bytes());
    }
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize, what: &'static str) -> Result<&'a [u8]> {
        if self.bytes.len() - self.pos < n {
            return Err(Error::Truncated(what));
        }
        let s = &self.bytes[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u32(&mut self, what: &'static str) -> Result<u32> {
        let b = self.take(4, what)?;
        Ok(u32::from_le_bytes([b[0], b[1], b[2], b[3]]))
    }

    fn u16(&mut self, what: &'static str) -> Result<u16> {
        let b = self.take(2, what)?;
        Ok(u16::from_le_bytes([b[0], b[1]]))
    }
}

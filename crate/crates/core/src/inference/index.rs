//! Unit-norm embedding galleries and cosine ranking. File layout: `"MIDX"`,
//! count u32, dimension u32, then per item a u16-length UTF-8 id and the
//! vector as f32, all little-endian.

use std::collections::HashSet;
use std::path::Path;

use crate::error::{Error, Result};
use crate::model::Modality;

pub const MAGIC: &[u8; 4] = b"MIDX";
const NORM_TOLERANCE: f64 = 1e-6;

#[derive(Debug, Clone, PartialEq)]
pub struct EmbeddingIndex {
    ids: Vec<String>,
    vectors: Vec<Vec<f64>>,
    dim: usize,
    /// Modality of the stored items; not recorded in the file.
    pub modality: Option<Modality>,
}

impl EmbeddingIndex {
    pub fn new(ids: Vec<String>, vectors: Vec<Vec<f64>>, modality: Option<Modality>) -> Result<Self> {
        if ids.len() != vectors.len() {
            return Err(Error::InvalidArgument(format!(
                "{} ids for {} vectors",
                ids.len(),
                vectors.len()
            )));
        }
        let dim = vectors.first().map_or(0, Vec::len);
        let mut seen = HashSet::new();
        for (id, v) in ids.iter().zip(&vectors) {
            if !seen.insert(id.as_str()) {
                return Err(Error::InvalidArgument(format!("duplicate id {id:?}")));
            }
            if v.len() != dim {
                return Err(Error::Dimension {
                    op: "EmbeddingIndex",
                    lhs: vec![v.len()],
                    rhs: vec![dim],
                });
            }
            let norm = v.iter().map(|x| x * x).sum::<f64>().sqrt();
            if (norm - 1.0).abs() > NORM_TOLERANCE {
                return Err(Error::InvalidArgument(format!("{id:?} has norm {norm}")));
            }
        }
        Ok(EmbeddingIndex {
            ids,
            vectors,
            dim,
            modality,
        })
    }

    pub fn len(&self) -> usize {
        self.ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.ids.is_empty()
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn ids(&self) -> &[String] {
        &self.ids
    }

    pub fn vector(&self, i: usize) -> &[f64] {
        &self.vectors[i]
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::new();
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&(self.ids.len() as u32).to_le_bytes());
        out.extend_from_slice(&(self.dim as u32).to_le_bytes());
        for (id, v) in self.ids.iter().zip(&self.vectors) {
            out.extend_from_slice(&(id.len() as u16).to_le_bytes());
            out.extend_from_slice(id.as_bytes());
            for &x in v {
                out.extend_from_slice(&(x as f32).to_le_bytes());
            }
        }
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let mut pos = 0;
        let mut take = |n: usize, what: &'static str| -> Result<&[u8]> {
            if bytes.len() - pos < n {
                return Err(Error::Truncated(what));
            }
            pos += n;
            Ok(&bytes[pos - n..pos])
        };
        if take(4, "magic")? != MAGIC {
            return Err(Error::BadMagic { expected: "MIDX" });
        }
        let u32_at = |b: &[u8]| u32::from_le_bytes([b[0], b[1], b[2], b[3]]) as usize;
        let count = u32_at(take(4, "count")?);
        let dim = u32_at(take(4, "dimension")?);
        let mut ids = Vec::with_capacity(count.min(1 << 16));
        let mut vectors = Vec::with_capacity(count.min(1 << 16));
        for _ in 0..count {
            let b = take(2, "id length")?;
            let n = u16::from_le_bytes([b[0], b[1]]) as usize;
            let id = std::str::from_utf8(take(n, "id")?)
                .map_err(|_| Error::Malformed("index id is not UTF-8".into()))?
                .to_string();
            let raw = take(dim * 4, "vector")?;
            let v = raw
                .chunks_exact(4)
                .map(|c| f64::from(f32::from_le_bytes([c[0], c[1], c[2], c[3]])))
                .collect();
            ids.push(id);
            vectors.push(v);
        }
        if pos != bytes.len() {
            return Err(Error::Malformed(format!("{} trailing bytes", bytes.len() - pos)));
        }
        let mut index = EmbeddingIndex::new(ids, vectors, None)?;
        index.dim = dim;
        Ok(index)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_bytes()).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
        Self::from_bytes(&bytes)
    }
}

/// A ranked hit.
#[derive(Debug, Clone, PartialEq)]
pub struct Hit {
    pub id: String,
    pub score: f64,
}

/// The `k` items most cosine-similar to `query`, best first; equal scores
/// are ordered by ascending id.
pub fn retrieve(query: &[f64], index: &EmbeddingIndex, k: usize) -> Result<Vec<Hit>> {
    if index.is_empty() {
        return Err(Error::InvalidArgument("empty index".into()));
    }
    if k > index.len() {
        return Err(Error::InvalidArgument(format!(
            "k = {k} exceeds gallery size {}",
            index.len()
        )));
    }
    if query.len() != index.dim {
        return Err(Error::Dimension {
            op: "retrieve",
            lhs: vec![query.len()],
            rhs: vec![index.dim],
        });
    }
    let mut hits: Vec<Hit> = index
        .ids
        .iter()
        .zip(&index.vectors)
        .map(|(id, v)| Hit {
            id: id.clone(),
            score: v.iter().zip(query).map(|(a, b)| a * b).sum(),
        })
        .collect();
    hits.sort_by(|a, b| b.score.total_cmp(&a.score).then_with(|| a.id.cmp(&b.id)));
    hits.truncate(k);
    Ok(hits)
}

//! Semantic query embeddings.
//!
//! Two sources are supported: a deterministic feature-hashing bag-of-words
//! embedder, and precomputed vectors loaded from an embedding file.
//!
//! Embedding file layout (text, UTF-8):
//!
//! ```text
//! EMB v1 <count> <d_sem>
//! <query_id>\t<base64 of d_sem little-endian f32 values>
//! ...
//! ```

use std::collections::BTreeMap;
use std::io::{BufRead, Write};

use base64::engine::general_purpose::STANDARD;
use base64::Engine as _;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::math::fnv1a;

pub const HASHING_DIM: usize = 64;

/// Signed feature hashing of lower-cased alphanumeric words, L2-normalized.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct HashingEmbedder {
    pub dim: usize,
}

impl Default for HashingEmbedder {
    fn default() -> Self {
        Self { dim: HASHING_DIM }
    }
}

impl HashingEmbedder {
    pub fn embed(&self, text: &str) -> Vec<f64> {
        let mut v = vec![0.0; self.dim];
        let lower = text.to_lowercase();
        for word in lower.split(|c: char| !c.is_alphanumeric()).filter(|w| !w.is_empty()) {
            let h = fnv1a(word.as_bytes());
            let idx = (h % self.dim as u64) as usize;
            let sign = if h >> 63 == 0 { 1.0 } else { -1.0 };
            v[idx] += sign;
        }
        let norm = v.iter().map(|x| x * x).sum::<f64>().sqrt();
        if norm > 0.0 {
            v.iter_mut().for_each(|x| *x /= norm);
        }
        v
    }
}

/// Where a predictor's semantic vectors come from at inference time.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum EmbeddingSource {
    Hashing { dim: usize },
    /// Vectors must be supplied with each query (e.g. from an embedding file).
    Precomputed { dim: usize },
}

impl EmbeddingSource {
    pub fn dim(&self) -> usize {
        match self {
            EmbeddingSource::Hashing { dim } | EmbeddingSource::Precomputed { dim } => *dim,
        }
    }
}

/// An in-memory embedding file.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct EmbeddingFile {
    pub dim: usize,
    /// Records in file order.
    pub records: Vec<(String, Vec<f32>)>,
}

impl EmbeddingFile {
    pub fn read<R: BufRead>(reader: R) -> Result<Self> {
        let mut lines = reader.lines();
        let header = lines
            .next()
            .ok_or_else(|| Error::Parse("embedding file is empty".into()))?
            .map_err(|e| Error::io("<embeddings>", e))?;
        let parts: Vec<&str> = header.split_whitespace().collect();
        if parts.len() != 4 || parts[0] != "EMB" || parts[1] != "v1" {
            return Err(Error::Parse(format!("bad embedding header `{header}`")));
        }
        let count: usize = parts[2]
            .parse()
            .map_err(|_| Error::Parse(format!("bad record count `{}`", parts[2])))?;
        let dim: usize = parts[3]
            .parse()
            .map_err(|_| Error::Parse(format!("bad dimension `{}`", parts[3])))?;
        let mut records = Vec::with_capacity(count);
        for (n, line) in lines.enumerate() {
            let line = line.map_err(|e| Error::io("<embeddings>", e))?;
            if line.is_empty() {
                continue;
            }
            let lineno = n + 2;
            let (id, payload) = line
                .split_once('\t')
                .ok_or_else(|| Error::Parse(format!("line {lineno}: missing tab separator")))?;
            let bytes = STANDARD
                .decode(payload.trim_end())
                .map_err(|e| Error::Parse(format!("line {lineno}: {e}")))?;
            if bytes.len() != dim * 4 {
                return Err(Error::Parse(format!(
                    "line {lineno}: expected {} bytes, got {}",
                    dim * 4,
                    bytes.len()
                )));
            }
            let row: Vec<f32> = bytes
                .chunks_exact(4)
                .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
                .collect();
            if row.iter().any(|v| !v.is_finite()) {
                return Err(Error::Parse(format!("line {lineno}: non-finite value")));
            }
            records.push((id.to_string(), row));
        }
        if records.len() != count {
            return Err(Error::Parse(format!(
                "header declares {count} records, found {}",
                records.len()
            )));
        }
        Ok(Self { dim, records })
    }

    pub fn write<W: Write>(&self, mut w: W) -> Result<()> {
        let io = |e| Error::io("<embeddings>", e);
        writeln!(w, "EMB v1 {} {}", self.records.len(), self.dim).map_err(io)?;
        for (id, row) in &self.records {
            if row.len() != self.dim {
                return Err(Error::DimensionMismatch {
                    what: "embedding row",
                    expected: self.dim,
                    found: row.len(),
                });
            }
            let bytes: Vec<u8> = row.iter().flat_map(|v| v.to_le_bytes()).collect();
            writeln!(w, "{id}\t{}", STANDARD.encode(bytes)).map_err(io)?;
        }
        Ok(())
    }

    pub fn to_map(&self) -> BTreeMap<String, Vec<f64>> {
        self.records
            .iter()
            .map(|(id, v)| (id.clone(), v.iter().map(|&x| x as f64).collect()))
            .collect()
    }
}

//! Text embeddings.
//!
//! Classifiers only ever see unit-normalized vectors produced by an
//! [`Encoder`]. Two encoders ship with the crate: [`HashingEncoder`], a
//! deterministic character n-gram hasher, and [`LookupEncoder`], which serves
//! vectors computed elsewhere (see [`load_precomputed`]).

mod cache;

use std::collections::HashMap;
use std::io::Read;

use ndarray::Array2;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::{Error, Result};

pub use cache::{encode_batch_cached, CacheStats, EmbeddingCache};

/// A unit-length embedding.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EmbeddingVector {
    values: Vec<f64>,
}

impl EmbeddingVector {
    /// L2-normalizes `values`. Zero or non-finite input is rejected.
    pub fn normalized(mut values: Vec<f64>) -> Result<Self> {
        if values.iter().any(|v| !v.is_finite()) {
            return Err(Error::invalid("embedding has non-finite entries"));
        }
        let norm = values.iter().map(|v| v * v).sum::<f64>().sqrt();
        if norm == 0.0 {
            return Err(Error::invalid("cannot normalize a zero vector"));
        }
        values.iter_mut().for_each(|v| *v /= norm);
        Ok(Self { values })
    }

    pub fn dim(&self) -> usize {
        self.values.len()
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.values
    }

    pub fn into_vec(self) -> Vec<f64> {
        self.values
    }

    pub fn cosine(&self, other: &EmbeddingVector) -> f64 {
        dot(&self.values, &other.values).clamp(-1.0, 1.0)
    }

    /// Rounds to 32-bit precision and renormalizes; the representation
    /// persisted by the cache.
    pub fn quantized(&self) -> EmbeddingVector {
        let q: Vec<f32> = self.values.iter().map(|&v| v as f32).collect();
        EmbeddingVector::from_f32(&q).expect("quantizing a unit vector keeps it non-zero")
    }

    pub(crate) fn from_f32(values: &[f32]) -> Result<Self> {
        Self::normalized(values.iter().map(|&v| v as f64).collect())
    }
}

pub(crate) fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

/// Identifies an encoder configuration. Equal ids imply identical outputs.
#[derive(Clone, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct EncoderDescriptor {
    pub encoder_id: String,
    pub dim: usize,
}

pub trait Encoder: Send + Sync {
    fn descriptor(&self) -> EncoderDescriptor;

    fn encode(&self, text: &str) -> Result<EmbeddingVector>;

    fn encode_all(&self, texts: &[&str]) -> Result<Embeddings> {
        let desc = self.descriptor();
        let vectors = texts.iter().map(|t| self.encode(t)).collect::<Result<Vec<_>>>()?;
        Embeddings::from_vectors(desc, &vectors)
    }
}

/// Row-major embedding matrix tagged with the encoder that produced it.
#[derive(Clone, Debug, PartialEq)]
pub struct Embeddings {
    pub encoder: EncoderDescriptor,
    pub matrix: Array2<f64>,
}

impl Embeddings {
    pub fn from_vectors(encoder: EncoderDescriptor, vectors: &[EmbeddingVector]) -> Result<Self> {
        let dim = encoder.dim;
        let mut matrix = Array2::zeros((vectors.len(), dim));
        for (mut row, v) in matrix.rows_mut().into_iter().zip(vectors) {
            if v.dim() != dim {
                return Err(Error::DimensionMismatch {
                    expected: dim,
                    found: v.dim(),
                });
            }
            row.iter_mut().zip(v.as_slice()).for_each(|(r, x)| *r = *x);
        }
        Ok(Self { encoder, matrix })
    }

    pub fn len(&self) -> usize {
        self.matrix.nrows()
    }

    pub fn is_empty(&self) -> bool {
        self.matrix.nrows() == 0
    }

    pub fn dim(&self) -> usize {
        self.matrix.ncols()
    }

    /// Rows at the given positions, in the given order.
    pub fn select(&self, rows: &[usize]) -> Embeddings {
        Embeddings {
            encoder: self.encoder.clone(),
            matrix: self.matrix.select(ndarray::Axis(0), rows),
        }
    }
}

/// 64-bit FNV-1a.
fn fnv1a(bytes: &[u8]) -> u64 {
    let mut h: u64 = 0xcbf2_9ce4_8422_2325;
    for &b in bytes {
        h ^= b as u64;
        h = h.wrapping_mul(0x0000_0100_0000_01b3);
    }
    h
}

/// Character n-gram feature hashing.
///
/// The text is padded with one space on each side; every window of 2, 3 and 4
/// characters is hashed with 64-bit FNV-1a over its UTF-8 bytes. The bucket is
/// `hash % dim`, the sign is the top bit (set = negative), and each occurrence
/// adds ±1 (term-frequency weighting). The result is L2-normalized.
#[derive(Clone, Debug)]
pub struct HashingEncoder {
    dim: usize,
}

impl HashingEncoder {
    pub const NGRAM_SIZES: [usize; 3] = [2, 3, 4];

    pub fn new(dim: usize) -> Result<Self> {
        if dim == 0 {
            return Err(Error::invalid("encoder dimension must be positive"));
        }
        Ok(Self { dim })
    }
}

impl Default for HashingEncoder {
    fn default() -> Self {
        Self { dim: 256 }
    }
}

impl Encoder for HashingEncoder {
    fn descriptor(&self) -> EncoderDescriptor {
        EncoderDescriptor {
            encoder_id: format!("hashed-char-ngram/v1/n2-4/fnv1a/d{}", self.dim),
            dim: self.dim,
        }
    }

    fn encode(&self, text: &str) -> Result<EmbeddingVector> {
        if text.is_empty() {
            return Err(Error::invalid("cannot encode empty text"));
        }
        let padded: Vec<char> = std::iter::once(' ')
            .chain(text.chars())
            .chain(std::iter::once(' '))
            .collect();
        let mut acc = vec![0.0f64; self.dim];
        let mut buf = String::new();
        for n in Self::NGRAM_SIZES {
            for window in padded.windows(n) {
                buf.clear();
                buf.extend(window);
                let h = fnv1a(buf.as_bytes());
                let bucket = (h % self.dim as u64) as usize;
                acc[bucket] += if h >> 63 == 1 { -1.0 } else { 1.0 };
            }
        }
        EmbeddingVector::normalized(acc)
    }
}

/// Serves fixed vectors keyed by text. Unknown texts are an error.
#[derive(Clone, Debug)]
pub struct LookupEncoder {
    descriptor: EncoderDescriptor,
    table: HashMap<String, EmbeddingVector>,
}

impl LookupEncoder {
    /// Builds the table; `name` becomes part of the encoder id together with a
    /// digest of the table content.
    pub fn new(name: &str, table: HashMap<String, EmbeddingVector>) -> Result<Self> {
        let dim = table
            .values()
            .next()
            .map(EmbeddingVector::dim)
            .ok_or_else(|| Error::invalid("lookup encoder needs at least one vector"))?;
        let mut keys: Vec<&String> = table.keys().collect();
        keys.sort();
        let mut hasher = Sha256::new();
        for k in keys {
            let v = &table[k];
            if v.dim() != dim {
                return Err(Error::DimensionMismatch {
                    expected: dim,
                    found: v.dim(),
                });
            }
            hasher.update((k.len() as u64).to_le_bytes());
            hasher.update(k.as_bytes());
            for x in v.as_slice() {
                hasher.update(x.to_le_bytes());
            }
        }
        let digest = hasher.finalize();
        let hex: String = digest[..8].iter().map(|b| format!("{b:02x}")).collect();
        Ok(Self {
            descriptor: EncoderDescriptor {
                encoder_id: format!("lookup/{name}/{hex}/d{dim}"),
                dim,
            },
            table,
        })
    }

    pub fn len(&self) -> usize {
        self.table.len()
    }

    pub fn is_empty(&self) -> bool {
        self.table.is_empty()
    }
}

impl Encoder for LookupEncoder {
    fn descriptor(&self) -> EncoderDescriptor {
        self.descriptor.clone()
    }

    fn encode(&self, text: &str) -> Result<EmbeddingVector> {
        if text.is_empty() {
            return Err(Error::invalid("cannot encode empty text"));
        }
        self.table
            .get(text)
            .cloned()
            .ok_or_else(|| Error::invalid(format!("no precomputed vector for `{text}`")))
    }
}

/// Reads `id,v1,...,vd` rows (no header). Every row must have the same
/// width; vectors are normalized on load.
pub fn load_precomputed<R: Read>(source: R) -> Result<HashMap<String, EmbeddingVector>> {
    let mut reader = csv::ReaderBuilder::new()
        .has_headers(false)
        .flexible(true)
        .trim(csv::Trim::All)
        .from_reader(source);
    let mut out = HashMap::new();
    let mut dim = None;
    for (i, rec) in reader.records().enumerate() {
        let line = i + 1;
        let rec = rec.map_err(|e| Error::Parse {
            line,
            message: e.to_string(),
        })?;
        if rec.len() < 2 {
            return Err(Error::Parse {
                line,
                message: "row needs an id and at least one value".into(),
            });
        }
        let width = rec.len() - 1;
        match dim {
            None => dim = Some(width),
            Some(d) if d != width => {
                return Err(Error::Parse {
                    line,
                    message: format!("expected {d} values, found {width}"),
                })
            }
            _ => {}
        }
        let values = rec
            .iter()
            .skip(1)
            .map(|s| s.parse::<f64>())
            .collect::<std::result::Result<Vec<_>, _>>()
            .map_err(|e| Error::Parse {
                line,
                message: e.to_string(),
            })?;
        let v = EmbeddingVector::normalized(values).map_err(|e| Error::Parse {
            line,
            message: e.to_string(),
        })?;
        let id = rec[0].to_string();
        if out.insert(id.clone(), v).is_some() {
            return Err(Error::Conflict(format!("duplicate id `{id}` at line {line}")));
        }
    }
    Ok(out)
}

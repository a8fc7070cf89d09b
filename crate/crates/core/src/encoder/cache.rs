//! Persistent embedding cache.
//!
//! On-disk layout (one directory per encoder):
//!
//! ```text
//! meta.json     {"format": 1, "encoder_id": "...", "dim": 256}
//! records.bin   repeated records:
//!                 [16 bytes]  first 128 bits of SHA-256(text)
//!                 [u32 LE]    dim
//!                 [dim x f32 LE] vector components
//! ```
//!
//! The lookup key is the first 64 bits of the digest; the full 128-bit
//! digest is compared on every hit. A truncated trailing record (crash
//! mid-append) is dropped when the cache is reopened.

use std::collections::HashMap;
use std::fs::{self, File, OpenOptions};
use std::io::{BufReader, Read, Write};
use std::path::{Path, PathBuf};
use std::sync::atomic::{AtomicU64, Ordering};
use std::sync::{Arc, Mutex, RwLock};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use super::{EmbeddingVector, Encoder, EncoderDescriptor};
use crate::{Error, Result};

const FORMAT_VERSION: u32 = 1;
const META_FILE: &str = "meta.json";
const RECORDS_FILE: &str = "records.bin";

#[derive(Serialize, Deserialize)]
struct Meta {
    format: u32,
    encoder_id: String,
    dim: usize,
}

type Digest128 = [u8; 16];

fn text_digest(text: &str) -> Digest128 {
    let full = Sha256::digest(text.as_bytes());
    let mut out = [0u8; 16];
    out.copy_from_slice(&full[..16]);
    out
}

fn key_of(d: &Digest128) -> u64 {
    u64::from_le_bytes(d[..8].try_into().unwrap())
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct CacheStats {
    pub hits: u64,
    /// Texts that had to be encoded.
    pub computed: u64,
    pub stores: u64,
}

#[derive(Default)]
struct Counters {
    hits: AtomicU64,
    computed: AtomicU64,
    stores: AtomicU64,
}

pub struct EmbeddingCache {
    descriptor: EncoderDescriptor,
    dir: Option<PathBuf>,
    entries: RwLock<HashMap<u64, Vec<(Digest128, Arc<[f32]>)>>>,
    writer: Option<Mutex<File>>,
    counters: Counters,
}

impl std::fmt::Debug for EmbeddingCache {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("EmbeddingCache")
            .field("descriptor", &self.descriptor)
            .field("dir", &self.dir)
            .field("len", &self.len())
            .finish()
    }
}

impl EmbeddingCache {
    /// A cache that lives only in memory.
    pub fn in_memory(descriptor: EncoderDescriptor) -> Self {
        Self {
            descriptor,
            dir: None,
            entries: RwLock::default(),
            writer: None,
            counters: Counters::default(),
        }
    }

    /// Opens or creates the cache directory for `descriptor`. A directory
    /// created under another encoder id is rejected.
    pub fn open(dir: impl AsRef<Path>, descriptor: EncoderDescriptor) -> Result<Self> {
        let dir = dir.as_ref().to_path_buf();
        fs::create_dir_all(&dir)?;
        let meta_path = dir.join(META_FILE);
        if meta_path.exists() {
            let meta: Meta = serde_json::from_slice(&fs::read(&meta_path)?)?;
            if meta.format != FORMAT_VERSION {
                return Err(Error::Unsupported(format!(
                    "cache format {} (expected {FORMAT_VERSION})",
                    meta.format
                )));
            }
            if meta.encoder_id != descriptor.encoder_id || meta.dim != descriptor.dim {
                return Err(Error::EncoderMismatch {
                    expected: descriptor.encoder_id,
                    found: meta.encoder_id,
                });
            }
        } else {
            let meta = Meta {
                format: FORMAT_VERSION,
                encoder_id: descriptor.encoder_id.clone(),
                dim: descriptor.dim,
            };
            fs::write(&meta_path, serde_json::to_vec_pretty(&meta)?)?;
        }

        let records_path = dir.join(RECORDS_FILE);
        let (entries, valid_len) = if records_path.exists() {
            read_records(&records_path, descriptor.dim)?
        } else {
            (HashMap::new(), 0)
        };
        let file = OpenOptions::new()
            .create(true)
            .append(true)
            .open(&records_path)?;
        if file.metadata()?.len() != valid_len {
            file.set_len(valid_len)?;
        }
        Ok(Self {
            descriptor,
            dir: Some(dir),
            entries: RwLock::new(entries),
            writer: Some(Mutex::new(file)),
            counters: Counters::default(),
        })
    }

    pub fn descriptor(&self) -> &EncoderDescriptor {
        &self.descriptor
    }

    pub fn dir(&self) -> Option<&Path> {
        self.dir.as_deref()
    }

    pub fn len(&self) -> usize {
        self.entries.read().unwrap().values().map(Vec::len).sum()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn stats(&self) -> CacheStats {
        CacheStats {
            hits: self.counters.hits.load(Ordering::Relaxed),
            computed: self.counters.computed.load(Ordering::Relaxed),
            stores: self.counters.stores.load(Ordering::Relaxed),
        }
    }

    fn lookup(&self, digest: &Digest128) -> Option<Arc<[f32]>> {
        let entries = self.entries.read().unwrap();
        entries
            .get(&key_of(digest))?
            .iter()
            .find(|(d, _)| d == digest)
            .map(|(_, v)| Arc::clone(v))
    }

    fn store(&self, digest: Digest128, values: Arc<[f32]>) -> Result<()> {
        if let Some(writer) = &self.writer {
            let mut buf = Vec::with_capacity(20 + 4 * values.len());
            buf.extend_from_slice(&digest);
            buf.extend_from_slice(&(values.len() as u32).to_le_bytes());
            for v in values.iter() {
                buf.extend_from_slice(&v.to_le_bytes());
            }
            let mut file = writer.lock().unwrap();
            file.write_all(&buf)?;
        }
        let mut entries = self.entries.write().unwrap();
        let bucket = entries.entry(key_of(&digest)).or_default();
        // values are a pure function of the text; last writer wins
        bucket.retain(|(d, _)| d != &digest);
        bucket.push((digest, values));
        self.counters.stores.fetch_add(1, Ordering::Relaxed);
        Ok(())
    }

    /// Flushes appended records to stable storage.
    pub fn sync(&self) -> Result<()> {
        if let Some(writer) = &self.writer {
            writer.lock().unwrap().sync_data()?;
        }
        Ok(())
    }
}

fn read_records(
    path: &Path,
    dim: usize,
) -> Result<(HashMap<u64, Vec<(Digest128, Arc<[f32]>)>>, u64)> {
    let mut bytes = Vec::new();
    BufReader::new(File::open(path)?).read_to_end(&mut bytes)?;
    let record_len = 16 + 4 + 4 * dim;
    let mut entries: HashMap<u64, Vec<(Digest128, Arc<[f32]>)>> = HashMap::new();
    let mut offset = 0usize;
    while offset + record_len <= bytes.len() {
        let rec = &bytes[offset..offset + record_len];
        let digest: Digest128 = rec[..16].try_into().unwrap();
        let rec_dim = u32::from_le_bytes(rec[16..20].try_into().unwrap()) as usize;
        if rec_dim != dim {
            return Err(Error::Parse {
                line: offset / record_len + 1,
                message: format!("cache record has dim {rec_dim}, expected {dim}"),
            });
        }
        let values: Arc<[f32]> = rec[20..]
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes(c.try_into().unwrap()))
            .collect();
        let bucket = entries.entry(key_of(&digest)).or_default();
        bucket.retain(|(d, _)| d != &digest);
        bucket.push((digest, values));
        offset += record_len;
    }
    Ok((entries, offset as u64))
}

/// Encodes `texts` through the cache. Hits skip the encoder entirely; misses
/// are encoded and stored. Output order matches input order.
///
/// Every returned vector has passed through the cache's 32-bit
/// representation, so a hit and a miss for the same text are identical.
pub fn encode_batch_cached(
    encoder: &dyn Encoder,
    texts: &[&str],
    cache: &EmbeddingCache,
) -> Result<Vec<EmbeddingVector>> {
    let desc = encoder.descriptor();
    if desc != cache.descriptor {
        return Err(Error::EncoderMismatch {
            expected: cache.descriptor.encoder_id.clone(),
            found: desc.encoder_id,
        });
    }
    let mut out = Vec::with_capacity(texts.len());
    for text in texts {
        let digest = text_digest(text);
        let values = match cache.lookup(&digest) {
            Some(v) => {
                cache.counters.hits.fetch_add(1, Ordering::Relaxed);
                v
            }
            None => {
                let v = encoder.encode(text)?;
                cache.counters.computed.fetch_add(1, Ordering::Relaxed);
                let stored: Arc<[f32]> = v.as_slice().iter().map(|&x| x as f32).collect();
                cache.store(digest, Arc::clone(&stored))?;
                stored
            }
        };
        out.push(EmbeddingVector::from_f32(&values)?);
    }
    Ok(out)
}

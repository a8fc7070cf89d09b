//! Registered pools. A pool is immutable once registered; its id is derived
//! from its content, so registering the same instances twice is a no-op.

use std::collections::HashMap;
use std::fs;
use std::path::Path;

use fewloop_core::corpus::{Pool, TextInstance};
use fewloop_core::encoder::{encode_batch_cached, EmbeddingCache, Embeddings, Encoder};
use serde_json::json;

use crate::error::{Result, ServiceError};
use crate::store;
use crate::types::{PoolInstance, PoolSummary, RegisterPool};

#[derive(Debug)]
pub struct PoolEntry {
    pub id: String,
    pub name: String,
    pub instances: Vec<PoolInstance>,
    index: HashMap<String, usize>,
    /// Row-aligned with `instances`.
    pub embeddings: Embeddings,
    /// Rows available for selection and training (not test-marked).
    pub train_rows: Vec<usize>,
    pub test_rows: Vec<usize>,
    /// The non-test instances as a core pool, for sampling T.
    pub train_pool: Pool,
}

/// `p-` followed by 16 hex digits of the content hash.
pub fn pool_id(instances: &[PoolInstance]) -> Result<String> {
    let bytes = serde_json::to_vec(instances)?;
    Ok(format!("p-{}", &store::sha256_hex(&bytes)[..16]))
}

impl PoolEntry {
    pub fn build(req: RegisterPool, encoder: &dyn Encoder, cache: &EmbeddingCache) -> Result<Self> {
        if req.instances.is_empty() {
            return Err(ServiceError::validation("a pool needs at least one instance", json!(null)));
        }
        let id = pool_id(&req.instances)?;
        let core: Vec<TextInstance> = req
            .instances
            .iter()
            .map(|i| TextInstance::new(i.id.clone(), i.text.clone(), i.label.clone()))
            .collect();
        // Validates ids are unique and texts non-empty.
        Pool::new(core.clone())?;
        let index: HashMap<String, usize> = req
            .instances
            .iter()
            .enumerate()
            .map(|(i, inst)| (inst.id.clone(), i))
            .collect();
        let (test_rows, train_rows): (Vec<usize>, Vec<usize>) =
            (0..req.instances.len()).partition(|&i| req.instances[i].test);
        let train_pool = Pool::new(train_rows.iter().map(|&i| core[i].clone()).collect())?;
        let texts: Vec<&str> = req.instances.iter().map(|i| i.text.as_str()).collect();
        let vectors = encode_batch_cached(encoder, &texts, cache)?;
        let embeddings = Embeddings::from_vectors(encoder.descriptor(), &vectors)?;
        Ok(Self {
            id,
            name: req.name,
            instances: req.instances,
            index,
            embeddings,
            train_rows,
            test_rows,
            train_pool,
        })
    }

    pub fn position(&self, id: &str) -> Option<usize> {
        self.index.get(id).copied()
    }

    pub fn is_test(&self, row: usize) -> bool {
        self.instances[row].test
    }

    pub fn summary(&self) -> PoolSummary {
        PoolSummary {
            pool_id: self.id.clone(),
            name: self.name.clone(),
            size: self.instances.len(),
            test_size: self.test_rows.len(),
        }
    }

    pub fn save(&self, dir: &Path) -> Result<()> {
        fs::create_dir_all(dir)?;
        let file = RegisterPool {
            name: self.name.clone(),
            instances: self.instances.clone(),
        };
        store::write_atomic(&dir.join(format!("{}.json", self.id)), &serde_json::to_vec(&file)?)?;
        Ok(())
    }

    pub fn load(path: &Path, encoder: &dyn Encoder, cache: &EmbeddingCache) -> Result<Self> {
        let req: RegisterPool = serde_json::from_slice(&fs::read(path)?)?;
        let entry = Self::build(req, encoder, cache)?;
        let expected = path.file_stem().and_then(|s| s.to_str()).unwrap_or_default();
        if entry.id != expected {
            return Err(ServiceError::Internal(format!(
                "pool file {} hashes to `{}`",
                path.display(),
                entry.id
            )));
        }
        Ok(entry)
    }
}

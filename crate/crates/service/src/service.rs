//! Shared service state: pools, models and the per-model locks.
//!
//! Each model sits behind its own async read-write lock. Inference,
//! evaluation and batch requests take the read side; create and update take
//! the write side, so state transitions of one model never interleave. While
//! a model retrains, every call on it except `GET /models/{id}` answers with
//! a retriable busy error.

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};
use std::sync::atomic::{AtomicBool, Ordering};
use std::sync::{Arc, RwLock};

use fewloop_core::encoder::{encode_batch_cached, EmbeddingCache, Embeddings, Encoder, HashingEncoder};
use fewloop_core::perfpred::{feature_len, ForestModel};
use tokio::sync::{Mutex, OwnedRwLockWriteGuard, RwLock as AsyncRwLock};

use crate::config::ServiceConfig;
use crate::error::{Result, ServiceError};
use crate::model::ModelState;
use crate::pool::{pool_id, PoolEntry};
use crate::types::{
    AnnotationBatch, CreateModel, Evaluation, Health, InstanceBatch, IterationSummary, ModelStatus, ModelSummary,
    PoolSummary, RegisterPool, RequestInstances, RunRequest, RunResponse, UpdateAccepted,
};

/// Read-only pieces every operation needs.
pub struct Context {
    pub config: ServiceConfig,
    pub encoder: Box<dyn Encoder>,
    pub cache: EmbeddingCache,
    pub forest: Option<ForestModel>,
}

impl Context {
    /// Encodes through the service-wide embedding cache.
    pub fn embed(&self, texts: &[&str]) -> Result<Embeddings> {
        let vectors = encode_batch_cached(self.encoder.as_ref(), texts, &self.cache)?;
        Ok(Embeddings::from_vectors(self.encoder.descriptor(), &vectors)?)
    }
}

struct ModelEntry {
    id: String,
    training: AtomicBool,
    state: Arc<AsyncRwLock<ModelState>>,
    summary: RwLock<ModelSummary>,
}

impl ModelEntry {
    fn new(state: ModelState) -> Arc<Self> {
        Arc::new(Self {
            id: state.id().to_string(),
            training: AtomicBool::new(false),
            summary: RwLock::new(state.summary()),
            state: Arc::new(AsyncRwLock::new(state)),
        })
    }

    fn ensure_ready(&self) -> Result<()> {
        if self.training.load(Ordering::SeqCst) {
            return Err(ServiceError::Busy(self.id.clone()));
        }
        Ok(())
    }
}

/// Clears the training flag when dropped, including on panic.
struct TrainingFlag(Arc<ModelEntry>);

impl TrainingFlag {
    fn raise(entry: &Arc<ModelEntry>) -> Self {
        entry.training.store(true, Ordering::SeqCst);
        Self(Arc::clone(entry))
    }
}

impl Drop for TrainingFlag {
    fn drop(&mut self) {
        self.0.training.store(false, Ordering::SeqCst);
    }
}

/// Outcome of an update: applied synchronously, or accepted for
/// background training.
#[derive(Debug)]
pub enum UpdateOutcome {
    Applied(IterationSummary),
    Accepted(UpdateAccepted),
}

pub struct Service {
    ctx: Arc<Context>,
    pools: RwLock<BTreeMap<String, Arc<PoolEntry>>>,
    models: RwLock<BTreeMap<String, Arc<ModelEntry>>>,
    create_lock: Mutex<()>,
}

async fn blocking<T: Send + 'static>(f: impl FnOnce() -> Result<T> + Send + 'static) -> Result<T> {
    tokio::task::spawn_blocking(f)
        .await
        .map_err(|e| ServiceError::Internal(format!("worker failed: {e}")))?
}

fn sorted_entries(dir: &Path) -> Result<Vec<PathBuf>> {
    if !dir.exists() {
        return Ok(Vec::new());
    }
    let mut out: Vec<PathBuf> = fs::read_dir(dir)?
        .map(|e| e.map(|e| e.path()))
        .collect::<std::io::Result<_>>()?;
    out.sort();
    Ok(out)
}

impl Service {
    /// Opens the data directory, restoring every pool and model in it.
    pub fn open(config: ServiceConfig) -> Result<Self> {
        config.validate()?;
        fs::create_dir_all(config.data_dir.join("pools"))?;
        fs::create_dir_all(config.data_dir.join("models"))?;
        let encoder = HashingEncoder::new(config.encoder_dim)?;
        let cache = EmbeddingCache::open(config.data_dir.join("cache"), encoder.descriptor())?;
        let forest = match &config.forest_path {
            None => None,
            Some(path) => Some(load_forest(path, config.history)?),
        };
        let ctx = Arc::new(Context {
            config,
            encoder: Box::new(encoder),
            cache,
            forest,
        });

        let mut pools = BTreeMap::new();
        for path in sorted_entries(&ctx.config.data_dir.join("pools"))? {
            if path.extension().is_some_and(|e| e == "json") {
                let p = PoolEntry::load(&path, ctx.encoder.as_ref(), &ctx.cache)?;
                pools.insert(p.id.clone(), Arc::new(p));
            }
        }
        let mut models = BTreeMap::new();
        for path in sorted_entries(&ctx.config.data_dir.join("models"))? {
            let name = path.file_name().and_then(|n| n.to_str()).unwrap_or_default();
            if name.starts_with(".tmp-") {
                // An interrupted create; it never became visible.
                fs::remove_dir_all(&path)?;
                continue;
            }
            if path.is_dir() {
                let state = ModelState::load(&ctx, &path, &pools)?;
                models.insert(state.id().to_string(), ModelEntry::new(state));
            }
        }
        ctx.cache.sync()?;
        tracing::info!(pools = pools.len(), models = models.len(), "service state restored");
        Ok(Self {
            ctx,
            pools: RwLock::new(pools),
            models: RwLock::new(models),
            create_lock: Mutex::new(()),
        })
    }

    pub fn config(&self) -> &ServiceConfig {
        &self.ctx.config
    }

    pub fn health(&self) -> Health {
        Health {
            status: "ok".into(),
            version: env!("CARGO_PKG_VERSION").into(),
            pools: self.pools.read().unwrap().len(),
            models: self.models.read().unwrap().len(),
            stop_predictor: self.ctx.forest.is_some(),
        }
    }

    fn model_entry(&self, id: &str) -> Result<Arc<ModelEntry>> {
        self.models
            .read()
            .unwrap()
            .get(id)
            .cloned()
            .ok_or_else(|| ServiceError::NotFound(format!("model `{id}`")))
    }

    fn pool_entry(&self, id: &str) -> Result<Arc<PoolEntry>> {
        self.pools
            .read()
            .unwrap()
            .get(id)
            .cloned()
            .ok_or_else(|| ServiceError::NotFound(format!("pool `{id}`")))
    }

    /// Registers a pool. Returns `true` when it was new.
    pub async fn register_pool(&self, req: RegisterPool) -> Result<(bool, PoolSummary)> {
        let id = pool_id(&req.instances)?;
        if let Ok(existing) = self.pool_entry(&id) {
            return Ok((false, existing.summary()));
        }
        let ctx = Arc::clone(&self.ctx);
        let entry = blocking(move || {
            let p = PoolEntry::build(req, ctx.encoder.as_ref(), &ctx.cache)?;
            p.save(&ctx.config.data_dir.join("pools"))?;
            ctx.cache.sync()?;
            Ok(p)
        })
        .await?;
        let summary = entry.summary();
        self.pools
            .write()
            .unwrap()
            .entry(entry.id.clone())
            .or_insert_with(|| Arc::new(entry));
        Ok((true, summary))
    }

    pub fn pool(&self, id: &str) -> Result<PoolSummary> {
        Ok(self.pool_entry(id)?.summary())
    }

    pub fn pools(&self) -> Vec<PoolSummary> {
        self.pools.read().unwrap().values().map(|p| p.summary()).collect()
    }

    pub async fn create_model(&self, req: CreateModel) -> Result<ModelSummary> {
        let pool = self.pool_entry(&req.pool_id).map_err(|_| {
            ServiceError::validation(
                format!("pool `{}` is not registered", req.pool_id),
                serde_json::json!({ "pool_id": req.pool_id }),
            )
        })?;
        let _guard = self.create_lock.lock().await;
        let next = self
            .models
            .read()
            .unwrap()
            .keys()
            .filter_map(|k| k.strip_prefix("m-")?.parse::<u64>().ok())
            .max()
            .map_or(1, |n| n + 1);
        let id = format!("m-{next:06}");
        let ctx = Arc::clone(&self.ctx);
        let state = blocking(move || {
            let root = ctx.config.data_dir.join("models");
            let s = ModelState::create(&ctx, &root, id, req, pool)?;
            ctx.cache.sync()?;
            Ok(s)
        })
        .await?;
        let summary = state.summary();
        self.models
            .write()
            .unwrap()
            .insert(summary.model_id.clone(), ModelEntry::new(state));
        Ok(summary)
    }

    pub fn model(&self, id: &str) -> Result<ModelSummary> {
        let entry = self.model_entry(id)?;
        Ok(summary_of(&entry))
    }

    pub fn models(&self) -> Vec<ModelSummary> {
        self.models.read().unwrap().values().map(|e| summary_of(e)).collect()
    }

    pub async fn request_instances(&self, id: &str, req: RequestInstances) -> Result<InstanceBatch> {
        let entry = self.model_entry(id)?;
        entry.ensure_ready()?;
        let guard = Arc::clone(&entry.state).read_owned().await;
        let ctx = Arc::clone(&self.ctx);
        blocking(move || guard.request(&ctx, &req)).await
    }

    pub async fn run(&self, id: &str, req: RunRequest) -> Result<RunResponse> {
        let entry = self.model_entry(id)?;
        entry.ensure_ready()?;
        let guard = Arc::clone(&entry.state).read_owned().await;
        let ctx = Arc::clone(&self.ctx);
        blocking(move || {
            let predictions = guard.run(&ctx, &req.texts)?;
            Ok(RunResponse {
                model_id: guard.id().to_string(),
                predictions,
            })
        })
        .await
    }

    pub async fn evaluate(&self, id: &str) -> Result<Evaluation> {
        let entry = self.model_entry(id)?;
        entry.ensure_ready()?;
        let guard = Arc::clone(&entry.state).read_owned().await;
        let ctx = Arc::clone(&self.ctx);
        blocking(move || guard.evaluate(&ctx)).await
    }

    /// Validates the batch under the model's write lock, then retrains.
    /// In asynchronous mode the retraining continues in the background, the
    /// model reports `training` until it is done, and further updates are
    /// refused as busy meanwhile.
    pub async fn update(&self, id: &str, batch: AnnotationBatch) -> Result<UpdateOutcome> {
        let entry = self.model_entry(id)?;
        if self.ctx.config.async_training {
            entry.ensure_ready()?;
        }
        // Synchronous updates queue on the lock: the later one validates
        // against the state the earlier one committed.
        let guard = Arc::clone(&entry.state).write_owned().await;
        let entries = guard.validate_batch(&batch)?;
        let added = entries.len();
        let flag = TrainingFlag::raise(&entry);
        let ctx = Arc::clone(&self.ctx);
        let task = tokio::task::spawn_blocking(move || apply_update(ctx, guard, entries, flag));
        if self.ctx.config.async_training {
            return Ok(UpdateOutcome::Accepted(UpdateAccepted {
                model_id: id.to_string(),
                status: ModelStatus::Training,
                added,
            }));
        }
        let summary = task
            .await
            .map_err(|e| ServiceError::Internal(format!("worker failed: {e}")))??;
        Ok(UpdateOutcome::Applied(summary))
    }
}

fn apply_update(
    ctx: Arc<Context>,
    mut guard: OwnedRwLockWriteGuard<ModelState>,
    entries: Vec<crate::model::LedgerEntry>,
    flag: TrainingFlag,
) -> Result<IterationSummary> {
    let result = guard.apply(&ctx, entries);
    let _ = ctx.cache.sync();
    let mut summary = guard.summary();
    if let Err(e) = &result {
        tracing::error!(model = %guard.id(), error = %e, "update failed");
        summary.last_error = Some(e.to_string());
    }
    *flag.0.summary.write().unwrap() = summary;
    // The flag drops before the lock is released, so a caller that waited
    // on the lock never observes a stale busy state.
    drop(flag);
    drop(guard);
    result
}

fn summary_of(entry: &ModelEntry) -> ModelSummary {
    let mut s = entry.summary.read().unwrap().clone();
    if entry.training.load(Ordering::SeqCst) {
        s.status = ModelStatus::Training;
    }
    s
}

/// Reads a forest written by `train-predictor` and checks its width.
pub fn load_forest(path: &Path, history: usize) -> Result<ForestModel> {
    let bytes = fs::read(path)
        .map_err(|e| ServiceError::Config(format!("cannot read forest {}: {e}", path.display())))?;
    let forest: ForestModel = serde_json::from_slice(&bytes)
        .map_err(|e| ServiceError::Config(format!("cannot parse forest {}: {e}", path.display())))?;
    let expected = feature_len(history);
    if forest.n_features != expected {
        return Err(ServiceError::Config(format!(
            "forest expects {} features but history {history} gives {expected}",
            forest.n_features
        )));
    }
    Ok(forest)
}

//! One model resource: its annotation ledger, current classifier and
//! snapshot history, persisted in its own directory.
//!
//! Files are written in a fixed order (ledger, model, snapshots, commit
//! marker). The commit marker records the committed lengths and digests, so
//! loading cuts off any uncommitted tail and rebuilds a half-written model by
//! retraining on the committed ledger.

use std::collections::{BTreeMap, HashMap, HashSet};
use std::fs;
use std::path::{Path, PathBuf};
use std::sync::Arc;

use fewloop_core::corpus::LabelSet;
use fewloop_core::encoder::EncoderDescriptor;
use fewloop_core::fsl::{FewShotModel, ModelKind, Posterior, TrainConfig, Trainer, TrainingSet};
use fewloop_core::perfpred::{curve_features, cv_f1, sample_t, snapshot_from_posteriors, IterationSnapshot};
use fewloop_core::rng;
use fewloop_core::select::{select, LabeledView, PoolState, SelectionConfig, StrategyId};
use fewloop_core::simulate::macro_f1;
use serde::{Deserialize, Serialize};
use serde_json::json;

use crate::error::{Result, ServiceError};
use crate::pool::PoolEntry;
use crate::service::Context;
use crate::store;
use crate::types::{
    AnnotationBatch, BatchInstance, CreateModel, Evaluation, InstanceBatch, IterationSummary, ModelStatus,
    ModelSummary, Prediction, RequestInstances, StopEstimate,
};

const FORMAT_VERSION: u32 = 1;
const META_FILE: &str = "meta.json";
const LEDGER_FILE: &str = "ledger.jsonl";
const MODEL_FILE: &str = "model.bin";
const SNAPSHOTS_FILE: &str = "snapshots.jsonl";
const COMMIT_FILE: &str = "COMMIT";

/// Batch size when a request does not name one.
pub const DEFAULT_K: usize = 16;

const T_SEED_TAG: u64 = 0x7453;
const SELECT_SEED_TAG: u64 = 0x5E1E;

/// Fixed at creation.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ModelMeta {
    pub format: u32,
    pub model_id: String,
    pub name: String,
    pub label_set: LabelSet,
    pub model_kind: ModelKind,
    pub pool_id: String,
    pub strategy: StrategyId,
    pub seed: u64,
    pub train: TrainConfig,
    pub encoder: EncoderDescriptor,
    /// Ids of the signal sample T.
    pub sample_t: Vec<String>,
    pub created_at_ms: u64,
}

/// One annotation. `batch` 0 holds the seed examples.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct LedgerEntry {
    pub seq: usize,
    pub id: String,
    pub text: String,
    pub label: String,
    pub batch: usize,
    pub timestamp_ms: u64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub note: Option<String>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
struct Commit {
    iteration: usize,
    ledger_len: usize,
    ledger_bytes: u64,
    snapshots_bytes: u64,
    model_sha256: String,
    digest: String,
}

pub struct ModelState {
    dir: PathBuf,
    meta: ModelMeta,
    pool: Arc<PoolEntry>,
    trainer: Trainer,
    ledger: Vec<LedgerEntry>,
    labeled: HashSet<String>,
    model: FewShotModel,
    model_bytes: Vec<u8>,
    snapshots: Vec<IterationSnapshot>,
    /// Current model's posteriors on T, for the next iteration's deltas.
    posteriors_t: Vec<Posterior>,
    t_rows: Vec<usize>,
    commit: Commit,
}

fn build_trainer(ctx: &Context, meta: &ModelMeta) -> Result<Trainer> {
    let texts: Vec<&str> = meta.label_set.descriptions().collect();
    let descriptions = ctx.embed(&texts)?;
    let config = TrainConfig {
        seed: meta.seed,
        ..meta.train.clone()
    };
    Ok(Trainer::with_descriptions(
        meta.label_set.clone(),
        descriptions,
        meta.model_kind,
        config,
    )?)
}

/// Trains from scratch on the whole ledger; an empty ledger gives the
/// zero-shot model. The result is quantized so a reload is bit-identical.
fn train(ctx: &Context, trainer: &Trainer, ledger: &[LedgerEntry]) -> Result<(FewShotModel, TrainingSet)> {
    let texts: Vec<&str> = ledger.iter().map(|e| e.text.as_str()).collect();
    let names: Vec<&str> = ledger.iter().map(|e| e.label.as_str()).collect();
    let set = TrainingSet::from_names(ctx.embed(&texts)?, &names, &trainer.label_set)?;
    let model = if set.is_empty() {
        trainer.zero_shot()?
    } else {
        trainer.fit(&set)?
    };
    Ok((model.quantized(), set))
}

fn prediction(labels: &LabelSet, p: &Posterior) -> Prediction {
    Prediction {
        label: labels.name(p.argmax()).to_string(),
        posterior: p.probs().to_vec(),
    }
}

fn to_lines<T: Serialize>(items: &[T]) -> Result<Vec<String>> {
    Ok(items.iter().map(serde_json::to_string).collect::<serde_json::Result<_>>()?)
}

fn read_lines<T: for<'de> Deserialize<'de>>(path: &Path) -> Result<Vec<T>> {
    let text = fs::read_to_string(path)?;
    Ok(text
        .lines()
        .filter(|l| !l.is_empty())
        .map(serde_json::from_str)
        .collect::<serde_json::Result<_>>()?)
}

/// Digest of the committed directory contents.
fn dir_digest(dir: &Path) -> Result<String> {
    let parts = [META_FILE, LEDGER_FILE, MODEL_FILE, SNAPSHOTS_FILE]
        .iter()
        .map(|f| fs::read(dir.join(f)))
        .collect::<std::io::Result<Vec<_>>>()?;
    let refs: Vec<&[u8]> = parts.iter().map(Vec::as_slice).collect();
    Ok(store::sha256_parts(&refs))
}

fn write_commit(dir: &Path, iteration: usize, ledger_len: usize, model_bytes: &[u8]) -> Result<Commit> {
    let commit = Commit {
        iteration,
        ledger_len,
        ledger_bytes: fs::metadata(dir.join(LEDGER_FILE))?.len(),
        snapshots_bytes: fs::metadata(dir.join(SNAPSHOTS_FILE))?.len(),
        model_sha256: store::sha256_hex(model_bytes),
        digest: dir_digest(dir)?,
    };
    store::write_atomic(&dir.join(COMMIT_FILE), &serde_json::to_vec_pretty(&commit)?)?;
    Ok(commit)
}

impl ModelState {
    /// Validates the request, trains the initial model and writes the model
    /// directory. Nothing is left on disk when any step fails.
    pub fn create(
        ctx: &Context,
        root: &Path,
        model_id: String,
        req: CreateModel,
        pool: Arc<PoolEntry>,
    ) -> Result<Self> {
        if req.name.trim().is_empty() {
            return Err(ServiceError::validation("model name must not be empty", json!(null)));
        }
        let label_set = LabelSet::new(req.label_set)?;
        let train_config = req.train.unwrap_or_default();
        train_config.validate()?;
        if pool.train_rows.is_empty() {
            return Err(ServiceError::validation(
                format!("pool `{}` has no instances available for annotation", pool.id),
                json!(null),
            ));
        }

        let now = store::now_ms();
        let mut ledger = Vec::new();
        let mut seen = HashSet::new();
        let (mut unknown_labels, mut test_ids, mut missing_text, mut duplicates) =
            (Vec::new(), Vec::new(), Vec::new(), Vec::new());
        for (i, ex) in req.examples.iter().enumerate() {
            if label_set.index_of(&ex.label).is_none() {
                unknown_labels.push(ex.label.clone());
                continue;
            }
            let in_pool = ex.id.as_deref().and_then(|id| pool.position(id));
            let (id, text) = match (in_pool, &ex.id, &ex.text) {
                (Some(row), _, _) if pool.is_test(row) => {
                    test_ids.push(pool.instances[row].id.clone());
                    continue;
                }
                (Some(row), _, _) => (pool.instances[row].id.clone(), pool.instances[row].text.clone()),
                (None, Some(id), Some(t)) => (id.clone(), t.clone()),
                (None, None, Some(t)) => (format!("seed-{i}"), t.clone()),
                (None, _, None) => {
                    missing_text.push(i);
                    continue;
                }
            };
            if text.trim().is_empty() {
                missing_text.push(i);
                continue;
            }
            if (ex.id.is_none() && pool.position(&id).is_some()) || !seen.insert(id.clone()) {
                duplicates.push(id);
                continue;
            }
            ledger.push(LedgerEntry {
                seq: ledger.len(),
                id,
                text,
                label: ex.label.clone(),
                batch: 0,
                timestamp_ms: now,
                note: None,
            });
        }
        if !unknown_labels.is_empty() {
            return Err(ServiceError::UnknownLabels(unknown_labels));
        }
        if !test_ids.is_empty() || !missing_text.is_empty() {
            return Err(ServiceError::validation(
                "seed examples must have text and must not be test instances",
                json!({ "test_ids": test_ids, "missing_text": missing_text }),
            ));
        }
        if !duplicates.is_empty() {
            return Err(ServiceError::conflict(
                "duplicate seed example ids",
                json!({ "ids": duplicates }),
            ));
        }

        let t_ids = sample_t(&pool.train_pool, ctx.config.sample_t, rng::derive(req.seed, T_SEED_TAG))?;
        let meta = ModelMeta {
            format: FORMAT_VERSION,
            model_id: model_id.clone(),
            name: req.name,
            label_set,
            model_kind: req.model_kind,
            pool_id: pool.id.clone(),
            strategy: req.strategy,
            seed: req.seed,
            train: train_config,
            encoder: ctx.encoder.descriptor(),
            sample_t: t_ids,
            created_at_ms: now,
        };
        let trainer = build_trainer(ctx, &meta)?;
        let t_rows = rows_of(&pool, &meta.sample_t)?;
        let (model, set) = train(ctx, &trainer, &ledger)?;
        let snapshot = take_snapshot(&pool, &t_rows, &trainer, &model, &set, None, 0)?;
        let model_bytes = model.to_bytes();

        let tmp = root.join(format!(".tmp-{model_id}"));
        if tmp.exists() {
            fs::remove_dir_all(&tmp)?;
        }
        fs::create_dir_all(&tmp)?;
        let written = (|| -> Result<Commit> {
            store::write_atomic(&tmp.join(META_FILE), &serde_json::to_vec_pretty(&meta)?)?;
            store::append_lines(&tmp.join(LEDGER_FILE), &to_lines(&ledger)?)?;
            store::write_atomic(&tmp.join(MODEL_FILE), &model_bytes)?;
            store::append_lines(&tmp.join(SNAPSHOTS_FILE), &to_lines(std::slice::from_ref(&snapshot))?)?;
            write_commit(&tmp, 0, ledger.len(), &model_bytes)
        })();
        let commit = match written {
            Ok(c) => c,
            Err(e) => {
                let _ = fs::remove_dir_all(&tmp);
                return Err(e);
            }
        };
        let dir = root.join(&model_id);
        fs::rename(&tmp, &dir)?;
        store::sync_dir(Some(root))?;

        let labeled = ledger.iter().map(|e| e.id.clone()).collect();
        let posteriors_t = snapshot.posteriors_t.clone();
        Ok(Self {
            dir,
            meta,
            pool,
            trainer,
            ledger,
            labeled,
            model,
            model_bytes,
            snapshots: vec![snapshot],
            posteriors_t,
            t_rows,
            commit,
        })
    }

    /// Restores the committed state of a model directory.
    pub fn load(ctx: &Context, dir: &Path, pools: &BTreeMap<String, Arc<PoolEntry>>) -> Result<Self> {
        let meta: ModelMeta = serde_json::from_slice(&fs::read(dir.join(META_FILE))?)?;
        if meta.format != FORMAT_VERSION {
            return Err(ServiceError::Internal(format!(
                "model `{}` has format {} (expected {FORMAT_VERSION})",
                meta.model_id, meta.format
            )));
        }
        if meta.encoder != ctx.encoder.descriptor() {
            return Err(ServiceError::Config(format!(
                "model `{}` was built with encoder `{}` (dim {}); the service runs `{}` (dim {})",
                meta.model_id,
                meta.encoder.encoder_id,
                meta.encoder.dim,
                ctx.encoder.descriptor().encoder_id,
                ctx.encoder.descriptor().dim
            )));
        }
        let commit: Commit = serde_json::from_slice(&fs::read(dir.join(COMMIT_FILE))?)?;
        store::truncate_to(&dir.join(LEDGER_FILE), commit.ledger_bytes)?;
        store::truncate_to(&dir.join(SNAPSHOTS_FILE), commit.snapshots_bytes)?;
        let ledger: Vec<LedgerEntry> = read_lines(&dir.join(LEDGER_FILE))?;
        let snapshots: Vec<IterationSnapshot> = read_lines(&dir.join(SNAPSHOTS_FILE))?;
        if ledger.len() != commit.ledger_len || snapshots.len() != commit.iteration + 1 {
            return Err(ServiceError::Internal(format!(
                "model `{}` does not match its commit marker",
                meta.model_id
            )));
        }
        let pool = pools
            .get(&meta.pool_id)
            .cloned()
            .ok_or_else(|| ServiceError::Internal(format!("pool `{}` is missing", meta.pool_id)))?;
        let trainer = build_trainer(ctx, &meta)?;
        let t_rows = rows_of(&pool, &meta.sample_t)?;

        let stored = fs::read(dir.join(MODEL_FILE))
            .ok()
            .filter(|b| store::sha256_hex(b) == commit.model_sha256);
        let (model, model_bytes) = match stored {
            Some(bytes) => (FewShotModel::from_bytes(&bytes)?, bytes),
            None => {
                tracing::warn!(model = %meta.model_id, "model file does not match its commit; retraining");
                let (model, _) = train(ctx, &trainer, &ledger)?;
                let bytes = model.to_bytes();
                if store::sha256_hex(&bytes) != commit.model_sha256 {
                    return Err(ServiceError::Internal(format!(
                        "retraining model `{}` did not reproduce the committed model",
                        meta.model_id
                    )));
                }
                store::write_atomic(&dir.join(MODEL_FILE), &bytes)?;
                (model, bytes)
            }
        };
        if dir_digest(dir)? != commit.digest {
            return Err(ServiceError::Internal(format!(
                "model `{}` does not match its committed digest",
                meta.model_id
            )));
        }
        let posteriors_t = model.predict(&pool.embeddings.select(&t_rows))?;
        let labeled = ledger.iter().map(|e| e.id.clone()).collect();
        Ok(Self {
            dir: dir.to_path_buf(),
            meta,
            pool,
            trainer,
            ledger,
            labeled,
            model,
            model_bytes,
            snapshots,
            posteriors_t,
            t_rows,
            commit,
        })
    }

    pub fn id(&self) -> &str {
        &self.meta.model_id
    }

    pub fn iteration(&self) -> usize {
        self.snapshots.len() - 1
    }

    pub fn n_train(&self) -> usize {
        self.ledger.len()
    }

    pub fn summary(&self) -> ModelSummary {
        ModelSummary {
            model_id: self.meta.model_id.clone(),
            name: self.meta.name.clone(),
            model_kind: self.meta.model_kind,
            strategy: self.meta.strategy,
            pool_id: self.meta.pool_id.clone(),
            label_set: self.meta.label_set.entries().to_vec(),
            status: ModelStatus::Ready,
            iteration: self.iteration(),
            n_train: self.n_train(),
            digest: self.commit.digest.clone(),
            created_at_ms: self.meta.created_at_ms,
            last_error: None,
        }
    }

    /// Selects the next batch. A pure function of the committed state, so
    /// repeated requests without an update return the same batch.
    pub fn request(&self, ctx: &Context, req: &RequestInstances) -> Result<InstanceBatch> {
        let strategy = req.strategy.unwrap_or(self.meta.strategy);
        let k = req.k.unwrap_or(DEFAULT_K);
        if k == 0 {
            return Err(ServiceError::validation("k must be at least 1", json!({ "k": k })));
        }
        let pool = &self.pool;
        let rows: Vec<usize> = pool
            .train_rows
            .iter()
            .copied()
            .filter(|&r| !self.labeled.contains(&pool.instances[r].id))
            .collect();
        if rows.is_empty() {
            return Err(ServiceError::EmptyPool(pool.id.clone()));
        }
        let ids: Vec<String> = rows.iter().map(|&r| pool.instances[r].id.clone()).collect();
        let embeddings = pool.embeddings.select(&rows);
        let posteriors = if strategy.needs_posteriors() || req.reveal {
            Some(self.model.predict(&embeddings)?)
        } else {
            None
        };

        let labeled_parts = if strategy == StrategyId::Cal && !self.ledger.is_empty() {
            let texts: Vec<&str> = self.ledger.iter().map(|e| e.text.as_str()).collect();
            let emb = ctx.embed(&texts)?;
            let post = self.model.predict(&emb)?;
            let labels = self
                .ledger
                .iter()
                .map(|e| self.meta.label_set.require(&e.label))
                .collect::<fewloop_core::Result<Vec<_>>>()?;
            Some((emb, post, labels))
        } else {
            None
        };
        let state = PoolState {
            ids: &ids,
            posteriors: posteriors.as_deref(),
            embeddings: Some(embeddings.matrix.view()),
            labeled: labeled_parts.as_ref().map(|(emb, post, labels)| LabeledView {
                embeddings: emb.matrix.view(),
                posteriors: Some(post.as_slice()),
                labels: labels.as_slice(),
            }),
        };
        let config = SelectionConfig {
            batch_k: k.min(ids.len()),
            seed: rng::derive(rng::derive(self.meta.seed, SELECT_SEED_TAG), self.iteration() as u64),
            ..Default::default()
        };
        let picked = select(&state, strategy, &config)?;

        let position: HashMap<&str, usize> = ids.iter().enumerate().map(|(i, id)| (id.as_str(), i)).collect();
        let instances = picked
            .iter()
            .map(|id| {
                let i = position[id.as_str()];
                BatchInstance {
                    id: id.clone(),
                    text: pool.instances[rows[i]].text.clone(),
                    prediction: match (&posteriors, req.reveal) {
                        (Some(p), true) => Some(prediction(&self.meta.label_set, &p[i])),
                        _ => None,
                    },
                }
            })
            .collect();
        Ok(InstanceBatch {
            model_id: self.meta.model_id.clone(),
            iteration: self.iteration(),
            strategy,
            instances,
        })
    }

    /// Checks an annotation batch against the current state and turns it
    /// into ledger entries. The whole batch is rejected on any problem.
    pub fn validate_batch(&self, batch: &AnnotationBatch) -> Result<Vec<LedgerEntry>> {
        if batch.annotations.is_empty() {
            return Err(ServiceError::validation("annotation batch is empty", json!(null)));
        }
        let (mut unknown_ids, mut test_ids, mut unknown_labels, mut conflicts) =
            (Vec::new(), Vec::new(), Vec::new(), Vec::new());
        let mut seen = HashSet::new();
        for a in &batch.annotations {
            match self.pool.position(&a.id) {
                None => unknown_ids.push(a.id.clone()),
                Some(row) if self.pool.is_test(row) => test_ids.push(a.id.clone()),
                Some(_) => {}
            }
            if self.meta.label_set.index_of(&a.label).is_none() {
                unknown_labels.push(a.label.clone());
            }
            if self.labeled.contains(&a.id) || !seen.insert(a.id.as_str()) {
                conflicts.push(a.id.clone());
            }
        }
        if !unknown_ids.is_empty() || !test_ids.is_empty() {
            return Err(ServiceError::validation(
                "annotations must reference non-test instances of the model's pool",
                json!({ "unknown_ids": unknown_ids, "test_ids": test_ids }),
            ));
        }
        if !unknown_labels.is_empty() {
            unknown_labels.sort();
            unknown_labels.dedup();
            return Err(ServiceError::UnknownLabels(unknown_labels));
        }
        if !conflicts.is_empty() {
            return Err(ServiceError::conflict(
                "instances are already labeled or repeated in the batch",
                json!({ "ids": conflicts }),
            ));
        }
        let now = store::now_ms();
        let batch_no = self.iteration() + 1;
        Ok(batch
            .annotations
            .iter()
            .enumerate()
            .map(|(i, a)| LedgerEntry {
                seq: self.ledger.len() + i,
                id: a.id.clone(),
                text: self.pool.instances[self.pool.position(&a.id).unwrap()].text.clone(),
                label: a.label.clone(),
                batch: batch_no,
                timestamp_ms: now,
                note: batch.note.clone(),
            })
            .collect())
    }

    /// Retrains on the extended ledger, persists, then swaps the new state
    /// in. On failure the previous state stays current on disk and in memory.
    pub fn apply(&mut self, ctx: &Context, entries: Vec<LedgerEntry>) -> Result<IterationSummary> {
        let mut ledger = self.ledger.clone();
        ledger.extend(entries.iter().cloned());
        let (model, set) = train(ctx, &self.trainer, &ledger)?;
        let iteration = self.snapshots.len();
        let snapshot = take_snapshot(
            &self.pool,
            &self.t_rows,
            &self.trainer,
            &model,
            &set,
            Some(&self.posteriors_t),
            iteration,
        )?;
        let model_bytes = model.to_bytes();
        let commit = match self.persist(&entries, &model_bytes, &snapshot, iteration, ledger.len()) {
            Ok(c) => c,
            Err(e) => {
                self.rollback();
                return Err(e);
            }
        };

        self.labeled.extend(entries.iter().map(|e| e.id.clone()));
        self.ledger = ledger;
        self.model = model;
        self.model_bytes = model_bytes;
        self.posteriors_t = snapshot.posteriors_t.clone();
        self.snapshots.push(snapshot.clone());
        self.commit = commit;
        Ok(IterationSummary {
            model_id: self.meta.model_id.clone(),
            iteration,
            n_train: self.n_train(),
            added: entries.len(),
            snapshot,
            stop_estimate: self.stop_estimate(ctx)?,
        })
    }

    fn persist(
        &self,
        entries: &[LedgerEntry],
        model_bytes: &[u8],
        snapshot: &IterationSnapshot,
        iteration: usize,
        ledger_len: usize,
    ) -> Result<Commit> {
        store::append_lines(&self.dir.join(LEDGER_FILE), &to_lines(entries)?)?;
        store::write_atomic(&self.dir.join(MODEL_FILE), model_bytes)?;
        store::append_lines(&self.dir.join(SNAPSHOTS_FILE), &to_lines(std::slice::from_ref(snapshot))?)?;
        write_commit(&self.dir, iteration, ledger_len, model_bytes)
    }

    /// Best effort: put the files back to the committed state. Loading
    /// repairs anything left over.
    fn rollback(&self) {
        let _ = store::truncate_to(&self.dir.join(LEDGER_FILE), self.commit.ledger_bytes);
        let _ = store::truncate_to(&self.dir.join(SNAPSHOTS_FILE), self.commit.snapshots_bytes);
        let _ = store::write_atomic(&self.dir.join(MODEL_FILE), &self.model_bytes);
    }

    /// Stateless inference.
    pub fn run(&self, ctx: &Context, texts: &[String]) -> Result<Vec<Prediction>> {
        if texts.len() > ctx.config.max_run_batch {
            return Err(ServiceError::BatchTooLarge {
                size: texts.len(),
                limit: ctx.config.max_run_batch,
            });
        }
        if texts.is_empty() {
            return Ok(Vec::new());
        }
        let empty: Vec<usize> = (0..texts.len()).filter(|&i| texts[i].trim().is_empty()).collect();
        if !empty.is_empty() {
            return Err(ServiceError::validation("texts must not be empty", json!({ "indices": empty })));
        }
        let refs: Vec<&str> = texts.iter().map(String::as_str).collect();
        let posteriors = self.model.predict(&ctx.embed(&refs)?)?;
        Ok(posteriors
            .iter()
            .map(|p| prediction(&self.meta.label_set, p))
            .collect())
    }

    pub fn evaluate(&self, ctx: &Context) -> Result<Evaluation> {
        let labels = &self.meta.label_set;
        let scored: Vec<(usize, usize)> = self
            .pool
            .test_rows
            .iter()
            .filter_map(|&r| {
                let gold = self.pool.instances[r].label.as_deref()?;
                labels.index_of(gold).map(|g| (r, g))
            })
            .collect();
        let test_f1 = if scored.is_empty() {
            None
        } else {
            let rows: Vec<usize> = scored.iter().map(|&(r, _)| r).collect();
            let gold: Vec<usize> = scored.iter().map(|&(_, g)| g).collect();
            let pred: Vec<usize> = self
                .model
                .predict(&self.pool.embeddings.select(&rows))?
                .iter()
                .map(Posterior::argmax)
                .collect();
            Some(macro_f1(&gold, &pred, labels.len())?)
        };
        Ok(Evaluation {
            model_id: self.meta.model_id.clone(),
            iteration: self.iteration(),
            n_train: self.n_train(),
            history: self.snapshots.clone(),
            stop_estimate: self.stop_estimate(ctx)?,
            test_f1,
            test_size: scored.len(),
        })
    }

    /// Forest estimate of the current normalized F1, when a forest is loaded.
    pub fn stop_estimate(&self, ctx: &Context) -> Result<Option<StopEstimate>> {
        let Some(forest) = &ctx.forest else {
            return Ok(None);
        };
        let features = curve_features(
            &self.snapshots,
            self.meta.strategy,
            self.meta.label_set.len(),
            ctx.config.history,
        );
        let last = features.last().expect("at least the initial snapshot");
        let predicted = forest.predict(last)?;
        let rule = ctx.config.rule();
        Ok(Some(StopEstimate {
            predicted_normalized_f1: predicted,
            tau: rule.tau,
            stop: rule.stop_index(&[self.n_train()], &[predicted]).is_some(),
        }))
    }
}

fn rows_of(pool: &PoolEntry, ids: &[String]) -> Result<Vec<usize>> {
    ids.iter()
        .map(|id| {
            pool.position(id)
                .ok_or_else(|| ServiceError::Internal(format!("sample id `{id}` is not in pool `{}`", pool.id)))
        })
        .collect()
}

fn take_snapshot(
    pool: &PoolEntry,
    t_rows: &[usize],
    trainer: &Trainer,
    model: &FewShotModel,
    set: &TrainingSet,
    previous: Option<&[Posterior]>,
    iteration: usize,
) -> Result<IterationSnapshot> {
    let posteriors = model.predict(&pool.embeddings.select(t_rows))?;
    let cv = cv_f1(trainer, set)?;
    Ok(snapshot_from_posteriors(posteriors, previous, cv, iteration, set.len())?)
}

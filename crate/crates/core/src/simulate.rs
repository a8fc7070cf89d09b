//! Simulated-annotator experiments.
//!
//! A trial starts from the zero-shot model, then repeatedly selects a batch
//! from the unlabeled pool, reveals the gold labels, retrains from scratch
//! and scores the model on the held-out test split.

use std::collections::HashSet;

use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::corpus::{cap_pool, make_unbalanced, LabelSet, Pool, TextInstance, UnbalanceSpec};
use crate::encoder::{EmbeddingVector, Embeddings, Encoder, EncoderDescriptor};
use crate::fsl::{FewShotModel, ModelKind, Posterior, TrainConfig, Trainer, TrainingSet};
use crate::perfpred::{sample_t, snapshot, CurveRecord, IterationSnapshot, SAMPLE_T_SIZE};
use crate::rng;
use crate::select::{select, LabeledView, PoolState, SelectionConfig, StrategyId};
use crate::{Error, Result};

/// Per-label F1 (`2tp / (2tp + fp + fn)`); a label absent from both gold and
/// predictions scores 0.
pub fn per_label_f1(gold: &[usize], pred: &[usize], n_labels: usize) -> Vec<f64> {
    let mut tp = vec![0usize; n_labels];
    let mut fp = vec![0usize; n_labels];
    let mut fn_ = vec![0usize; n_labels];
    for (&g, &p) in gold.iter().zip(pred) {
        if g == p {
            tp[g] += 1;
        } else {
            fp[p] += 1;
            fn_[g] += 1;
        }
    }
    (0..n_labels)
        .map(|l| {
            let denom = 2 * tp[l] + fp[l] + fn_[l];
            if denom == 0 {
                0.0
            } else {
                2.0 * tp[l] as f64 / denom as f64
            }
        })
        .collect()
}

/// Unweighted mean of per-label F1 over all `n_labels` labels.
pub fn macro_f1(gold: &[usize], pred: &[usize], n_labels: usize) -> Result<f64> {
    if gold.is_empty() {
        return Err(Error::invalid("macro F1 of an empty sequence"));
    }
    if gold.len() != pred.len() {
        return Err(Error::invalid("gold and predicted labels are not aligned"));
    }
    if n_labels == 0 || gold.iter().chain(pred).any(|&l| l >= n_labels) {
        return Err(Error::invalid("label index out of range"));
    }
    Ok(per_label_f1(gold, pred, n_labels).iter().sum::<f64>() / n_labels as f64)
}

/// A labeled pool and test split with embeddings computed once.
#[derive(Clone, Debug)]
pub struct Dataset {
    pub name: String,
    pub label_set: LabelSet,
    pub train: Pool,
    pub test: Pool,
    pub descriptions: Embeddings,
    pub train_embeddings: Embeddings,
    pub test_embeddings: Embeddings,
}

impl Dataset {
    /// Encodes pool, test split and label descriptions with `encoder`.
    pub fn encode(name: &str, label_set: LabelSet, train: Pool, test: Pool, encoder: &dyn Encoder) -> Result<Self> {
        fn texts(p: &Pool) -> Vec<&str> {
            p.instances().iter().map(|i| i.text.as_str()).collect()
        }
        let descriptions: Vec<&str> = label_set.descriptions().collect();
        let ds = Self {
            name: name.into(),
            descriptions: encoder.encode_all(&descriptions)?,
            train_embeddings: encoder.encode_all(&texts(&train))?,
            test_embeddings: encoder.encode_all(&texts(&test))?,
            label_set,
            train,
            test,
        };
        ds.validate()?;
        Ok(ds)
    }

    fn validate(&self) -> Result<()> {
        for pool in [&self.train, &self.test] {
            if !pool.is_fully_labeled() {
                return Err(Error::invalid("simulation needs gold labels on every instance"));
            }
            for inst in pool.instances() {
                self.label_set.require(inst.gold_label.as_deref().unwrap_or_default())?;
            }
        }
        if self.test.is_empty() {
            return Err(Error::invalid("test split is empty"));
        }
        if let Some(id) = self.test.ids().find(|id| self.train.contains(id)) {
            return Err(Error::Conflict(format!("instance `{id}` is in both pool and test split")));
        }
        if self.train_embeddings.len() != self.train.len() || self.test_embeddings.len() != self.test.len() {
            return Err(Error::invalid("embeddings are not aligned with the instances"));
        }
        Ok(())
    }

    fn gold(&self, pool: &Pool) -> Vec<usize> {
        pool.instances()
            .iter()
            .map(|i| self.label_set.index_of(i.gold_label.as_deref().unwrap_or_default()).expect("validated"))
            .collect()
    }
}

/// One simulated experiment, repeated over `trials` seeds.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ExperimentPlan {
    pub dataset: String,
    pub model_kind: ModelKind,
    pub strategy: StrategyId,
    pub batch_k: usize,
    pub budget: usize,
    pub trials: usize,
    pub pool_cap: usize,
    /// Trial `t` runs with seed `seed_base + t`.
    pub seed_base: u64,
    pub sample_t: usize,
    /// Snapshots (cross-validation, signals on T) are skipped when false.
    pub signals: bool,
    pub train: TrainConfig,
    pub selection: SelectionConfig,
}

impl Default for ExperimentPlan {
    fn default() -> Self {
        Self {
            dataset: String::new(),
            model_kind: ModelKind::LabelTuning,
            strategy: StrategyId::Random,
            batch_k: 16,
            budget: 256,
            trials: 10,
            pool_cap: 20_000,
            seed_base: 0,
            sample_t: SAMPLE_T_SIZE,
            signals: true,
            train: TrainConfig::default(),
            selection: SelectionConfig::default(),
        }
    }
}

impl ExperimentPlan {
    pub fn validate(&self) -> Result<()> {
        if self.batch_k == 0 || self.budget % self.batch_k != 0 {
            return Err(Error::invalid("budget must be a positive multiple of batch_k"));
        }
        if self.trials == 0 {
            return Err(Error::invalid("trials must be at least 1"));
        }
        if self.pool_cap == 0 || self.sample_t == 0 {
            return Err(Error::invalid("pool_cap and sample_t must be positive"));
        }
        self.train.validate()
    }

    pub fn trial_seed(&self, trial: usize) -> u64 {
        self.seed_base.wrapping_add(trial as u64)
    }

    /// Stable name used for output files and aggregate rows.
    pub fn label(&self) -> String {
        format!("{}-{}-{}", self.dataset, self.model_kind, self.strategy)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CurvePoint {
    pub iter: usize,
    pub n_train: usize,
    pub test_f1: f64,
    pub snapshot: Option<IterationSnapshot>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LearningCurve {
    pub plan: ExperimentPlan,
    pub trial: usize,
    pub seed: u64,
    pub n_labels: usize,
    pub points: Vec<CurvePoint>,
    /// Ids in annotation order.
    pub annotated: Vec<String>,
    /// The pool ran out before the budget was reached.
    pub truncated: bool,
}

impl LearningCurve {
    pub fn final_f1(&self) -> f64 {
        self.points.last().map_or(0.0, |p| p.test_f1)
    }

    /// Curve-corpus records; fails when snapshots were not computed.
    pub fn records(&self) -> Result<Vec<CurveRecord>> {
        let run_id = format!("{}-t{}", self.plan.label(), self.trial);
        self.points
            .iter()
            .map(|p| {
                let s = p
                    .snapshot
                    .as_ref()
                    .ok_or_else(|| Error::invalid("curve was recorded without signals"))?;
                Ok(CurveRecord::new(
                    &self.plan.dataset,
                    &run_id,
                    self.plan.strategy,
                    self.n_labels,
                    s,
                    p.test_f1,
                ))
            })
            .collect()
    }
}

fn argmaxes(posteriors: &[Posterior]) -> Vec<usize> {
    posteriors.iter().map(Posterior::argmax).collect()
}

/// Runs one trial. Deterministic given `(plan, dataset, trial)`.
pub fn run_trial(plan: &ExperimentPlan, dataset: &Dataset, trial: usize) -> Result<LearningCurve> {
    plan.validate()?;
    let seed = plan.trial_seed(trial);
    let pool = cap_pool(&dataset.train, plan.pool_cap, rng::derive(seed, 1))?;
    let rows: Vec<usize> = pool
        .ids()
        .map(|id| dataset.train.position(id).expect("subset of the pool"))
        .collect();
    let pool_emb = dataset.train_embeddings.select(&rows);
    let pool_gold: Vec<usize> = {
        let all = dataset.gold(&dataset.train);
        rows.iter().map(|&r| all[r]).collect()
    };
    let test_gold = dataset.gold(&dataset.test);
    let n_labels = dataset.label_set.len();

    let t_rows: Vec<usize> = sample_t(&pool, plan.sample_t, rng::derive(seed, 2))?
        .iter()
        .map(|id| pool.position(id).expect("sampled from the pool"))
        .collect();
    let t_emb = pool_emb.select(&t_rows);

    let train_config = TrainConfig {
        seed,
        ..plan.train.clone()
    };
    let trainer = Trainer::with_descriptions(
        dataset.label_set.clone(),
        dataset.descriptions.clone(),
        plan.model_kind,
        train_config,
    )?;

    let ids: Vec<String> = pool.ids().map(String::from).collect();
    let mut labeled: Vec<usize> = Vec::new();
    let mut is_labeled = vec![false; pool.len()];
    let mut points = Vec::new();
    let mut previous: Option<Vec<Posterior>> = None;
    let mut truncated = false;

    let mut model = trainer.zero_shot()?;
    for iter in 0.. {
        let train_set = TrainingSet::new(pool_emb.select(&labeled), labeled.iter().map(|&r| pool_gold[r]).collect())?;
        let test_pred = argmaxes(&model.predict(&dataset.test_embeddings)?);
        let test_f1 = macro_f1(&test_gold, &test_pred, n_labels)?;
        let snap = if plan.signals {
            let s = snapshot(&trainer, &model, previous.as_deref(), &t_emb, &train_set, iter)?;
            previous = Some(s.posteriors_t.clone());
            Some(s)
        } else {
            None
        };
        points.push(CurvePoint {
            iter,
            n_train: labeled.len(),
            test_f1,
            snapshot: snap,
        });
        if labeled.len() >= plan.budget {
            break;
        }
        let unlabeled: Vec<usize> = (0..pool.len()).filter(|&r| !is_labeled[r]).collect();
        if unlabeled.is_empty() {
            truncated = true;
            break;
        }
        let batch = select_batch(plan, &model, &pool_emb, &ids, &unlabeled, &labeled, &pool_gold, seed, iter)?;
        if batch.len() < plan.batch_k {
            truncated = true;
        }
        for r in batch {
            is_labeled[r] = true;
            labeled.push(r);
        }
        let train_set = TrainingSet::new(pool_emb.select(&labeled), labeled.iter().map(|&r| pool_gold[r]).collect())?;
        model = trainer.fit(&train_set)?;
        if truncated {
            // Record the final model, then stop.
            let test_pred = argmaxes(&model.predict(&dataset.test_embeddings)?);
            let test_f1 = macro_f1(&test_gold, &test_pred, n_labels)?;
            let snap = if plan.signals {
                Some(snapshot(&trainer, &model, previous.as_deref(), &t_emb, &train_set, iter + 1)?)
            } else {
                None
            };
            points.push(CurvePoint {
                iter: iter + 1,
                n_train: labeled.len(),
                test_f1,
                snapshot: snap,
            });
            break;
        }
    }
    Ok(LearningCurve {
        plan: plan.clone(),
        trial,
        seed,
        n_labels,
        annotated: labeled.iter().map(|&r| ids[r].clone()).collect(),
        points,
        truncated,
    })
}

#[allow(clippy::too_many_arguments)]
fn select_batch(
    plan: &ExperimentPlan,
    model: &FewShotModel,
    pool_emb: &Embeddings,
    ids: &[String],
    unlabeled: &[usize],
    labeled: &[usize],
    gold: &[usize],
    seed: u64,
    iter: usize,
) -> Result<Vec<usize>> {
    let cand_ids: Vec<String> = unlabeled.iter().map(|&r| ids[r].clone()).collect();
    let cand_emb = pool_emb.select(unlabeled);
    let strategy = plan.strategy;
    let posteriors = if strategy.needs_posteriors() {
        Some(model.predict(&cand_emb)?)
    } else {
        None
    };
    let lab_emb = pool_emb.select(labeled);
    let lab_post = if strategy == StrategyId::Cal && !labeled.is_empty() {
        Some(model.predict(&lab_emb)?)
    } else {
        None
    };
    let lab_labels: Vec<usize> = labeled.iter().map(|&r| gold[r]).collect();
    let state = PoolState {
        ids: &cand_ids,
        posteriors: posteriors.as_deref(),
        embeddings: Some(cand_emb.matrix.view()),
        labeled: Some(LabeledView {
            embeddings: lab_emb.matrix.view(),
            posteriors: lab_post.as_deref(),
            labels: &lab_labels,
        }),
    };
    let config = SelectionConfig {
        batch_k: plan.batch_k.min(unlabeled.len()),
        seed: rng::derive(rng::derive(seed, 3), iter as u64),
        ..plan.selection.clone()
    };
    let chosen = select(&state, strategy, &config)?;
    let by_id: std::collections::HashMap<&str, usize> =
        cand_ids.iter().zip(unlabeled).map(|(id, &r)| (id.as_str(), r)).collect();
    let mut seen = HashSet::new();
    chosen
        .iter()
        .map(|id| {
            if !seen.insert(id.as_str()) {
                return Err(Error::Conflict(format!("strategy selected `{id}` twice")));
            }
            by_id
                .get(id.as_str())
                .copied()
                .ok_or_else(|| Error::invalid(format!("strategy selected unknown id `{id}`")))
        })
        .collect()
}

/// Runs every trial of a plan on up to `jobs` threads. Output order and
/// content do not depend on `jobs`.
pub fn run_plan(plan: &ExperimentPlan, dataset: &Dataset, jobs: usize) -> Result<Vec<LearningCurve>> {
    plan.validate()?;
    let jobs = jobs.clamp(1, plan.trials);
    let mut results: Vec<Option<Result<LearningCurve>>> = (0..plan.trials).map(|_| None).collect();
    std::thread::scope(|scope| {
        let chunks: Vec<_> = results
            .chunks_mut(plan.trials.div_ceil(jobs))
            .enumerate()
            .map(|(c, chunk)| {
                let start = c * plan.trials.div_ceil(jobs);
                scope.spawn(move || {
                    for (off, slot) in chunk.iter_mut().enumerate() {
                        *slot = Some(run_trial(plan, dataset, start + off));
                    }
                })
            })
            .collect();
        for h in chunks {
            h.join().expect("trial thread panicked");
        }
    });
    results.into_iter().map(|r| r.expect("every trial ran")).collect()
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AggregatePoint {
    pub n_train: usize,
    pub mean: f64,
    /// Sample standard deviation (n - 1); 0 for a single curve.
    pub std: f64,
    pub curves: usize,
}

/// Mean and sample standard deviation of test F1 per `n_train`.
pub fn aggregate(curves: &[LearningCurve]) -> Result<Vec<AggregatePoint>> {
    let first = curves.first().ok_or_else(|| Error::invalid("nothing to aggregate"))?;
    let grid: Vec<usize> = first.points.iter().map(|p| p.n_train).collect();
    for c in curves {
        if c.points.iter().map(|p| p.n_train).ne(grid.iter().copied()) {
            return Err(Error::invalid("curves are not aligned on n_train"));
        }
    }
    let n = curves.len() as f64;
    Ok(grid
        .iter()
        .enumerate()
        .map(|(i, &n_train)| {
            // Sorted so the result does not depend on curve order.
            let mut vals: Vec<f64> = curves.iter().map(|c| c.points[i].test_f1).collect();
            vals.sort_by(f64::total_cmp);
            let constant = vals.iter().all(|&v| v == vals[0]);
            let mean = if constant { vals[0] } else { vals.iter().sum::<f64>() / n };
            let std = if curves.len() > 1 && !constant {
                (vals.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1.0)).sqrt()
            } else {
                0.0
            };
            AggregatePoint {
                n_train,
                mean,
                std,
                curves: curves.len(),
            }
        })
        .collect())
}

/// Gaussian clusters on the unit sphere. Cluster `c` belongs to label
/// `c % labels`; each label's description embedding is the normalized mean
/// of its cluster centers plus `anchor_noise`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SynthSpec {
    pub name: String,
    pub clusters: usize,
    pub dims: usize,
    pub labels: usize,
    /// Exponential decay base for label skew; `None` keeps labels balanced.
    pub skew: Option<f64>,
    /// Per-coordinate standard deviation around a unit-norm center.
    pub noise: f64,
    pub anchor_noise: f64,
    /// Pool size before skew.
    pub size: usize,
    /// Test size before skew.
    pub test_size: usize,
    pub seed: u64,
}

impl Default for SynthSpec {
    fn default() -> Self {
        Self {
            name: "synthetic".into(),
            clusters: 10,
            dims: 32,
            labels: 5,
            skew: None,
            noise: 0.3,
            anchor_noise: 1.0,
            size: 4000,
            test_size: 1000,
            seed: 0,
        }
    }
}

fn gaussian(rng: &mut rng::Rng, dims: usize) -> Vec<f64> {
    (0..dims).map(|_| StandardNormal.sample(rng)).collect()
}

pub fn synth_dataset(spec: &SynthSpec) -> Result<Dataset> {
    if spec.labels < 2 || spec.labels > spec.clusters {
        return Err(Error::invalid("need 2 <= labels <= clusters"));
    }
    if spec.dims < 2 || spec.size == 0 || spec.test_size == 0 {
        return Err(Error::invalid("dims must be >= 2 and both splits non-empty"));
    }
    if !(spec.noise >= 0.0 && spec.anchor_noise >= 0.0) {
        return Err(Error::invalid("noise levels must be non-negative"));
    }
    let mut rng = rng::seeded(spec.seed);
    let centers: Vec<Vec<f64>> = (0..spec.clusters)
        .map(|_| EmbeddingVector::normalized(gaussian(&mut rng, spec.dims)).map(EmbeddingVector::into_vec))
        .collect::<Result<_>>()?;
    let label_set = LabelSet::from_pairs((0..spec.labels).map(|l| (format!("l{l}"), format!("synthetic label {l}"))))?;
    let descriptor = EncoderDescriptor {
        encoder_id: format!("synthetic/{}/s{}/d{}", spec.name, spec.seed, spec.dims),
        dim: spec.dims,
    };
    let anchors: Vec<EmbeddingVector> = (0..spec.labels)
        .map(|l| {
            let mut mean = vec![0.0; spec.dims];
            let members: Vec<&Vec<f64>> = centers.iter().skip(l).step_by(spec.labels).collect();
            for c in &members {
                for (m, x) in mean.iter_mut().zip(c.iter()) {
                    *m += x / members.len() as f64;
                }
            }
            let noise = gaussian(&mut rng, spec.dims);
            EmbeddingVector::normalized(mean.iter().zip(noise).map(|(m, z)| m + spec.anchor_noise * z / (spec.dims as f64).sqrt()).collect())
        })
        .collect::<Result<_>>()?;

    let draw = |prefix: &str, n: usize, rng: &mut rng::Rng| -> Result<(Pool, Vec<EmbeddingVector>)> {
        let mut instances = Vec::with_capacity(n);
        let mut vectors = Vec::with_capacity(n);
        for i in 0..n {
            let c = i % spec.clusters;
            let z = gaussian(rng, spec.dims);
            let v = centers[c].iter().zip(z).map(|(m, z)| m + spec.noise * z).collect();
            vectors.push(EmbeddingVector::normalized(v)?);
            instances.push(TextInstance::new(
                format!("{prefix}{i}"),
                format!("{prefix}{i}"),
                Some(format!("l{}", c % spec.labels)),
            ));
        }
        Ok((Pool::new(instances)?, vectors))
    };
    let (train, train_vecs) = draw("train-", spec.size, &mut rng)?;
    let (test, test_vecs) = draw("test-", spec.test_size, &mut rng)?;
    let (train, train_vecs, test, test_vecs) = match spec.skew {
        None => (train, train_vecs, test, test_vecs),
        Some(base) => {
            let skew = |pool: &Pool, vecs: &[EmbeddingVector], seed: u64| -> Result<(Pool, Vec<EmbeddingVector>)> {
                let kept = make_unbalanced(pool, &label_set, UnbalanceSpec { decay_base: base, seed })?;
                let vecs = kept.ids().map(|id| vecs[pool.position(id).expect("subset")].clone()).collect();
                Ok((kept, vecs))
            };
            let (tr, trv) = skew(&train, &train_vecs, rng::derive(spec.seed, 11))?;
            let (te, tev) = skew(&test, &test_vecs, rng::derive(spec.seed, 12))?;
            (tr, trv, te, tev)
        }
    };
    let ds = Dataset {
        name: spec.name.clone(),
        descriptions: Embeddings::from_vectors(descriptor.clone(), &anchors)?,
        train_embeddings: Embeddings::from_vectors(descriptor.clone(), &train_vecs)?,
        test_embeddings: Embeddings::from_vectors(descriptor, &test_vecs)?,
        label_set,
        train,
        test,
    };
    ds.validate()?;
    Ok(ds)
}

//! Simulation plan files.
//!
//! A plan is one JSON document naming the datasets and the experiments to
//! run on them:
//!
//! ```json
//! {
//!   "datasets": {
//!     "synth": { "kind": "synthetic", "labels": 5, "skew": 2.0, "size": 10400 },
//!     "news": { "kind": "files", "pool": "train.csv", "test": "test.csv" }
//!   },
//!   "experiments": [
//!     { "dataset": "synth", "strategies": ["random", "margin"], "trials": 10 }
//!   ]
//! }
//! ```
//!
//! Experiment entries take every experiment field; `strategies` expands one
//! entry into one experiment per strategy. Relative paths resolve against
//! the plan file's directory.

use std::collections::{BTreeMap, BTreeSet};
use std::fs::File;
use std::path::{Path, PathBuf};

use anyhow::Context as _;
use fewloop_core::corpus::{
    ingest, ingest_label_set, label_set_from_pool, make_unbalanced, Format, Pool, UnbalanceSpec,
};
use fewloop_core::encoder::{load_precomputed, Encoder, HashingEncoder, LookupEncoder};
use fewloop_core::rng;
use fewloop_core::select::StrategyId;
use fewloop_core::simulate::{synth_dataset, Dataset, ExperimentPlan, SynthSpec};
use serde::Deserialize;
use serde_json::Value;

use crate::error::{as_usage, usage};

#[derive(Clone, Debug, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum DatasetSource {
    Synthetic(SynthSpec),
    Files(FileDataset),
}

#[derive(Clone, Debug, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FileDataset {
    pub pool: PathBuf,
    pub test: PathBuf,
    /// Label-set lines; defaults to the pool's gold labels described by name.
    #[serde(default)]
    pub labels: Option<PathBuf>,
    /// Overrides detection from the file extension.
    #[serde(default)]
    pub format: Option<Format>,
    /// Down-samples pool and test split to a skewed label distribution.
    #[serde(default)]
    pub unbalance: Option<UnbalanceSpec>,
    #[serde(default = "default_encoder_dim")]
    pub encoder_dim: usize,
    /// Precomputed `text,v1,...,vd` rows used instead of the hashing encoder.
    #[serde(default)]
    pub vectors: Option<PathBuf>,
}

fn default_encoder_dim() -> usize {
    256
}

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
struct RawPlan {
    datasets: BTreeMap<String, DatasetSource>,
    experiments: Vec<Value>,
}

#[derive(Clone, Debug)]
pub struct Plan {
    pub datasets: BTreeMap<String, DatasetSource>,
    pub experiments: Vec<ExperimentPlan>,
    base: PathBuf,
}

/// Command-line overrides applied to every experiment.
#[derive(Clone, Debug, Default)]
pub struct Overrides {
    pub seed: Option<u64>,
    pub budget: Option<usize>,
    pub batch_k: Option<usize>,
    pub pool_cap: Option<usize>,
    pub trials: Option<usize>,
}

impl Plan {
    /// Reads and validates a plan. Every failure is a usage error.
    pub fn load(path: &Path, overrides: &Overrides) -> anyhow::Result<Self> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| usage(format!("cannot read plan {}: {e}", path.display())))?;
        let base = path.parent().map(Path::to_path_buf).unwrap_or_default();
        Self::parse(&text, base, overrides)
    }

    pub fn parse(text: &str, base: PathBuf, overrides: &Overrides) -> anyhow::Result<Self> {
        let raw: RawPlan = serde_json::from_str(text).map_err(|e| usage(format!("malformed plan: {e}")))?;
        let known = known_fields();
        let mut experiments = Vec::new();
        for (i, mut entry) in raw.experiments.into_iter().enumerate() {
            let obj = entry
                .as_object_mut()
                .ok_or_else(|| usage(format!("experiment {i} is not an object")))?;
            let strategies = match obj.remove("strategies") {
                None => None,
                Some(v) => Some(
                    serde_json::from_value::<Vec<StrategyId>>(v)
                        .map_err(|e| usage(format!("experiment {i}: {e}")))?,
                ),
            };
            if let Some(k) = obj.keys().find(|k| !known.contains(k.as_str())) {
                return Err(usage(format!("experiment {i}: unknown field `{k}`")));
            }
            let mut plan: ExperimentPlan =
                serde_json::from_value(entry).map_err(|e| usage(format!("experiment {i}: {e}")))?;
            overrides.apply(&mut plan);
            if !raw.datasets.contains_key(&plan.dataset) {
                return Err(usage(format!("experiment {i}: unknown dataset `{}`", plan.dataset)));
            }
            match strategies {
                None => experiments.push(plan),
                Some(list) if list.is_empty() => {
                    return Err(usage(format!("experiment {i}: `strategies` is empty")));
                }
                Some(list) => experiments.extend(list.into_iter().map(|strategy| ExperimentPlan {
                    strategy,
                    ..plan.clone()
                })),
            }
        }
        if experiments.is_empty() {
            return Err(usage("plan has no experiments"));
        }
        let mut labels = BTreeSet::new();
        for p in &experiments {
            p.validate().map_err(|e| usage(format!("experiment `{}`: {e}", p.label())))?;
            if !labels.insert(p.label()) {
                return Err(usage(format!("experiment `{}` appears twice", p.label())));
            }
        }
        Ok(Self {
            datasets: raw.datasets,
            experiments,
            base,
        })
    }

    /// Builds and encodes a dataset. Input errors are usage errors.
    pub fn dataset(&self, name: &str) -> anyhow::Result<Dataset> {
        match &self.datasets[name] {
            DatasetSource::Synthetic(spec) => synth_dataset(&SynthSpec {
                name: name.into(),
                ..spec.clone()
            })
            .map_err(|e| usage(format!("dataset `{name}`: {e}"))),
            DatasetSource::Files(f) => f.load(name, &self.base).map_err(as_usage),
        }
    }
}

impl Overrides {
    fn apply(&self, plan: &mut ExperimentPlan) {
        if let Some(s) = self.seed {
            plan.seed_base = s;
        }
        if let Some(b) = self.budget {
            plan.budget = b;
        }
        if let Some(k) = self.batch_k {
            plan.batch_k = k;
        }
        if let Some(c) = self.pool_cap {
            plan.pool_cap = c;
        }
        if let Some(t) = self.trials {
            plan.trials = t;
        }
    }
}

fn known_fields() -> BTreeSet<String> {
    match serde_json::to_value(ExperimentPlan::default()) {
        Ok(Value::Object(map)) => map.keys().cloned().collect(),
        _ => unreachable!("an experiment plan serializes to an object"),
    }
}

pub fn read_pool(path: &Path, format: Option<Format>) -> anyhow::Result<Pool> {
    let format = match format.or_else(|| Format::from_extension(path)) {
        Some(f) => f,
        None => anyhow::bail!("cannot tell the format of {}; use a .csv or .jsonl name", path.display()),
    };
    let file = File::open(path).with_context(|| format!("cannot open {}", path.display()))?;
    ingest(file, format).with_context(|| format!("reading {}", path.display()))
}

impl FileDataset {
    fn load(&self, name: &str, base: &Path) -> anyhow::Result<Dataset> {
        let at = |p: &Path| base.join(p);
        let mut pool = read_pool(&at(&self.pool), self.format)?;
        let mut test = read_pool(&at(&self.test), self.format)?;
        let labels = match &self.labels {
            Some(p) => {
                let file = File::open(at(p)).with_context(|| format!("cannot open {}", p.display()))?;
                ingest_label_set(file).with_context(|| format!("reading {}", p.display()))?
            }
            None => label_set_from_pool(&pool)?,
        };
        if let Some(spec) = self.unbalance {
            pool = make_unbalanced(&pool, &labels, spec)?;
            let test_spec = UnbalanceSpec {
                seed: rng::derive(spec.seed, 1),
                ..spec
            };
            test = make_unbalanced(&test, &labels, test_spec)?;
        }
        let encoder: Box<dyn Encoder> = match &self.vectors {
            Some(p) => {
                let file = File::open(at(p)).with_context(|| format!("cannot open {}", p.display()))?;
                Box::new(LookupEncoder::new(name, load_precomputed(file)?)?)
            }
            None => Box::new(HashingEncoder::new(self.encoder_dim)?),
        };
        Ok(Dataset::encode(name, labels, pool, test, encoder.as_ref())?)
    }
}

//! Request and response bodies of the HTTP API.

use fewloop_core::corpus::Label;
use fewloop_core::fsl::{ModelKind, TrainConfig};
use fewloop_core::perfpred::IterationSnapshot;
use fewloop_core::select::StrategyId;
use serde::{Deserialize, Serialize};

fn is_false(b: &bool) -> bool {
    !*b
}

/// One pool instance. `label` is an optional gold label, used only to score
/// the model on test-marked instances; `test` instances are never selected
/// or trained on.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PoolInstance {
    pub id: String,
    pub text: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub label: Option<String>,
    #[serde(default, skip_serializing_if = "is_false")]
    pub test: bool,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RegisterPool {
    #[serde(default)]
    pub name: String,
    pub instances: Vec<PoolInstance>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PoolSummary {
    pub pool_id: String,
    pub name: String,
    pub size: usize,
    pub test_size: usize,
}

/// A seed example either references a pool instance by `id` or brings its
/// own `text` (then `id` is optional).
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SeedExample {
    #[serde(default)]
    pub id: Option<String>,
    #[serde(default)]
    pub text: Option<String>,
    pub label: String,
}

fn default_strategy() -> StrategyId {
    StrategyId::Margin
}

fn default_kind() -> ModelKind {
    ModelKind::LabelTuning
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CreateModel {
    pub name: String,
    pub label_set: Vec<Label>,
    #[serde(default = "default_kind")]
    pub model_kind: ModelKind,
    pub pool_id: String,
    /// Default strategy for requests; also the strategy the stop estimate
    /// assumes.
    #[serde(default = "default_strategy")]
    pub strategy: StrategyId,
    #[serde(default)]
    pub seed: u64,
    #[serde(default)]
    pub examples: Vec<SeedExample>,
    #[serde(default)]
    pub train: Option<TrainConfig>,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ModelStatus {
    Ready,
    Training,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ModelSummary {
    pub model_id: String,
    pub name: String,
    pub model_kind: ModelKind,
    pub strategy: StrategyId,
    pub pool_id: String,
    pub label_set: Vec<Label>,
    pub status: ModelStatus,
    pub iteration: usize,
    pub n_train: usize,
    /// SHA-256 over the committed model directory.
    pub digest: String,
    pub created_at_ms: u64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub last_error: Option<String>,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RequestInstances {
    #[serde(default)]
    pub strategy: Option<StrategyId>,
    #[serde(default)]
    pub k: Option<usize>,
    #[serde(default)]
    pub reveal: bool,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Prediction {
    pub label: String,
    /// Probabilities in label-set order.
    pub posterior: Vec<f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BatchInstance {
    pub id: String,
    pub text: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub prediction: Option<Prediction>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct InstanceBatch {
    pub model_id: String,
    pub iteration: usize,
    pub strategy: StrategyId,
    pub instances: Vec<BatchInstance>,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Annotation {
    pub id: String,
    pub label: String,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AnnotationBatch {
    pub annotations: Vec<Annotation>,
    #[serde(default)]
    pub note: Option<String>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StopEstimate {
    pub predicted_normalized_f1: f64,
    pub tau: f64,
    pub stop: bool,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct IterationSummary {
    pub model_id: String,
    pub iteration: usize,
    pub n_train: usize,
    pub added: usize,
    pub snapshot: IterationSnapshot,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub stop_estimate: Option<StopEstimate>,
}

/// Reply to an update in asynchronous mode.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct UpdateAccepted {
    pub model_id: String,
    pub status: ModelStatus,
    pub added: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunRequest {
    pub texts: Vec<String>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RunResponse {
    pub model_id: String,
    pub predictions: Vec<Prediction>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Evaluation {
    pub model_id: String,
    pub iteration: usize,
    pub n_train: usize,
    /// One snapshot per iteration, starting with the initial model.
    pub history: Vec<IterationSnapshot>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub stop_estimate: Option<StopEstimate>,
    /// Macro F1 on test-marked instances with a gold label in the label set.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub test_f1: Option<f64>,
    pub test_size: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Health {
    pub status: String,
    pub version: String,
    pub pools: usize,
    pub models: usize,
    pub stop_predictor: bool,
}

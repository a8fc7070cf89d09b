//! Few-shot classifiers over fixed text embeddings.
//!
//! Two model families share one interface: label tuning, which fine-tunes a
//! matrix of label embeddings initialized from the encoded label
//! descriptions, and multinomial logistic regression. Both start from a
//! zero-shot state built from label descriptions alone, and both are
//! retrained from scratch whenever the labeled set changes.

mod codec;
mod label_tuning;
mod logreg;

use ndarray::{Array2, ArrayView1, ArrayView2, Axis};
use serde::{Deserialize, Serialize};

use crate::corpus::LabelSet;
use crate::encoder::{Embeddings, Encoder, EncoderDescriptor};
use crate::{Error, Result};

pub use label_tuning::{label_tuning_objective, lt_train, lt_train_traced, LabelTuningModel};
pub use logreg::{logreg_objective, lr_train, lr_train_traced, LogRegModel};

/// A probability distribution over the labels of a [`LabelSet`], in order.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(transparent)]
pub struct Posterior(Vec<f64>);

impl Posterior {
    /// Validates entries are non-negative and sum to one (±1e-9).
    pub fn new(probs: Vec<f64>) -> Result<Self> {
        if probs.is_empty() || probs.iter().any(|p| !p.is_finite() || *p < 0.0) {
            return Err(Error::invalid("posterior entries must be finite and non-negative"));
        }
        let sum: f64 = probs.iter().sum();
        if (sum - 1.0).abs() > 1e-9 {
            return Err(Error::invalid(format!("posterior sums to {sum}")));
        }
        Ok(Self(probs))
    }

    pub fn uniform(n: usize) -> Self {
        Self(vec![1.0 / n as f64; n])
    }

    pub fn one_hot(n: usize, idx: usize) -> Self {
        let mut v = vec![0.0; n];
        v[idx] = 1.0;
        Self(v)
    }

    /// Softmax of `logits`, computed stably.
    pub fn softmax(logits: ArrayView1<'_, f64>) -> Self {
        let max = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let exps: Vec<f64> = logits.iter().map(|z| (z - max).exp()).collect();
        let sum: f64 = exps.iter().sum();
        Self(exps.into_iter().map(|e| e / sum).collect())
    }

    pub fn probs(&self) -> &[f64] {
        &self.0
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }

    /// Most probable label; ties go to the lowest index.
    pub fn argmax(&self) -> usize {
        let mut best = 0;
        for (i, &p) in self.0.iter().enumerate() {
            if p > self.0[best] {
                best = i;
            }
        }
        best
    }

    pub fn max_prob(&self) -> f64 {
        self.0[self.argmax()]
    }

    /// The two largest probabilities, largest first. For a single label the
    /// runner-up is zero.
    pub fn top_two(&self) -> (f64, f64) {
        let mut first = f64::NEG_INFINITY;
        let mut second = f64::NEG_INFINITY;
        for &p in &self.0 {
            if p > first {
                second = first;
                first = p;
            } else if p > second {
                second = p;
            }
        }
        (first, second.max(0.0))
    }

    /// Shannon entropy in nats.
    pub fn entropy(&self) -> f64 {
        -self.0.iter().filter(|&&p| p > 0.0).map(|p| p * p.ln()).sum::<f64>()
    }
}

/// KL(p || q) in nats with both distributions clamped at `eps` before the log.
pub fn kl_divergence(p: &Posterior, q: &Posterior, eps: f64) -> f64 {
    p.0.iter()
        .zip(&q.0)
        .map(|(&a, &b)| {
            let a = a.max(eps);
            let b = b.max(eps);
            a * (a / b).ln()
        })
        .sum::<f64>()
        .max(0.0)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum ModelKind {
    #[serde(rename = "lt")]
    LabelTuning,
    #[serde(rename = "lr")]
    LogisticRegression,
}

impl std::str::FromStr for ModelKind {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "lt" | "label-tuning" | "label_tuning" => Ok(ModelKind::LabelTuning),
            "lr" | "logreg" | "logistic-regression" | "logistic_regression" => {
                Ok(ModelKind::LogisticRegression)
            }
            other => Err(Error::invalid(format!("unknown model kind `{other}`"))),
        }
    }
}

impl std::fmt::Display for ModelKind {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            ModelKind::LabelTuning => "lt",
            ModelKind::LogisticRegression => "lr",
        })
    }
}

/// Hyper-parameters for both model families.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    /// Label tuning: full-batch gradient steps.
    pub epochs: usize,
    /// Label tuning: initial step size.
    pub learning_rate: f64,
    /// Label tuning: weight of `||W - W_init||^2`.
    pub l2_to_init: f64,
    /// Label tuning: softmax scale applied to the dot-product scores.
    pub scale: f64,
    /// Logistic regression: L2 strength (inverse of scikit-learn's `C`).
    pub lr_l2: f64,
    /// Logistic regression: gradient-descent iterations.
    pub max_iter: usize,
    /// Logistic regression: stop once the max absolute gradient entry is below this.
    pub tol: f64,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            epochs: 100,
            learning_rate: 0.05,
            l2_to_init: 0.01,
            scale: 10.0,
            lr_l2: 1.0,
            max_iter: 500,
            tol: 1e-5,
            seed: 0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let positive = [
            ("learning_rate", self.learning_rate),
            ("scale", self.scale),
            ("lr_l2", self.lr_l2),
        ];
        for (name, v) in positive {
            if !(v > 0.0 && v.is_finite()) {
                return Err(Error::invalid(format!("{name} must be positive")));
            }
        }
        if !(self.l2_to_init >= 0.0) || !(self.tol >= 0.0) {
            return Err(Error::invalid("l2_to_init and tol must be non-negative"));
        }
        if self.max_iter == 0 {
            return Err(Error::invalid("max_iter must be positive"));
        }
        Ok(())
    }
}

/// Embedded examples with label indices into a [`LabelSet`].
#[derive(Clone, Debug)]
pub struct TrainingSet {
    pub embeddings: Embeddings,
    pub labels: Vec<usize>,
}

impl TrainingSet {
    pub fn new(embeddings: Embeddings, labels: Vec<usize>) -> Result<Self> {
        if embeddings.len() != labels.len() {
            return Err(Error::invalid("one label per embedded example is required"));
        }
        Ok(Self { embeddings, labels })
    }

    pub fn from_names(embeddings: Embeddings, names: &[&str], label_set: &LabelSet) -> Result<Self> {
        let labels = names.iter().map(|n| label_set.require(n)).collect::<Result<Vec<_>>>()?;
        Self::new(embeddings, labels)
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn subset(&self, rows: &[usize]) -> TrainingSet {
        TrainingSet {
            embeddings: self.embeddings.select(rows),
            labels: rows.iter().map(|&r| self.labels[r]).collect(),
        }
    }

    fn check(&self, n_labels: usize, encoder: &EncoderDescriptor) -> Result<()> {
        if self.embeddings.encoder.encoder_id != encoder.encoder_id {
            return Err(Error::EncoderMismatch {
                expected: encoder.encoder_id.clone(),
                found: self.embeddings.encoder.encoder_id.clone(),
            });
        }
        if let Some(&bad) = self.labels.iter().find(|&&l| l >= n_labels) {
            return Err(Error::UnknownLabel(format!("#{bad}")));
        }
        Ok(())
    }
}

/// A trained classifier of either family.
#[derive(Clone, Debug, PartialEq)]
pub enum FewShotModel {
    LabelTuning(LabelTuningModel),
    LogisticRegression(LogRegModel),
}

impl FewShotModel {
    pub fn kind(&self) -> ModelKind {
        match self {
            FewShotModel::LabelTuning(_) => ModelKind::LabelTuning,
            FewShotModel::LogisticRegression(_) => ModelKind::LogisticRegression,
        }
    }

    pub fn label_set(&self) -> &LabelSet {
        match self {
            FewShotModel::LabelTuning(m) => &m.label_set,
            FewShotModel::LogisticRegression(m) => &m.label_set,
        }
    }

    pub fn encoder(&self) -> &EncoderDescriptor {
        match self {
            FewShotModel::LabelTuning(m) => &m.encoder,
            FewShotModel::LogisticRegression(m) => &m.encoder,
        }
    }

    /// One posterior per row of `inputs`, in order.
    pub fn predict(&self, inputs: &Embeddings) -> Result<Vec<Posterior>> {
        let enc = self.encoder();
        if inputs.encoder.encoder_id != enc.encoder_id {
            return Err(Error::EncoderMismatch {
                expected: enc.encoder_id.clone(),
                found: inputs.encoder.encoder_id.clone(),
            });
        }
        if inputs.dim() != enc.dim {
            return Err(Error::DimensionMismatch {
                expected: enc.dim,
                found: inputs.dim(),
            });
        }
        let logits = match self {
            FewShotModel::LabelTuning(m) => m.logits(inputs.matrix.view()),
            FewShotModel::LogisticRegression(m) => m.logits(inputs.matrix.view()),
        };
        Ok(logits.rows().into_iter().map(Posterior::softmax).collect())
    }

    /// Versioned binary record; see [`FewShotModel::from_bytes`].
    pub fn to_bytes(&self) -> Vec<u8> {
        codec::encode(self)
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        codec::decode(bytes)
    }

    /// The model as it reads back from its serialized form (32-bit parameters).
    pub fn quantized(&self) -> Self {
        codec::decode(&codec::encode(self)).expect("round-trip of a freshly encoded model")
    }
}

/// Everything needed to build models for one task: label set, encoded label
/// descriptions and hyper-parameters. Training always starts from the
/// zero-shot model.
#[derive(Clone, Debug)]
pub struct Trainer {
    pub kind: ModelKind,
    pub label_set: LabelSet,
    pub descriptions: Embeddings,
    pub config: TrainConfig,
}

impl Trainer {
    pub fn new(label_set: LabelSet, encoder: &dyn Encoder, kind: ModelKind, config: TrainConfig) -> Result<Self> {
        config.validate()?;
        let texts: Vec<&str> = label_set.descriptions().collect();
        if texts.iter().any(|t| t.trim().is_empty()) {
            return Err(Error::invalid("every label needs a description"));
        }
        let descriptions = encoder.encode_all(&texts)?;
        Ok(Self {
            kind,
            label_set,
            descriptions,
            config,
        })
    }

    /// Uses already-encoded label descriptions (row `i` describes label `i`).
    pub fn with_descriptions(
        label_set: LabelSet,
        descriptions: Embeddings,
        kind: ModelKind,
        config: TrainConfig,
    ) -> Result<Self> {
        config.validate()?;
        if descriptions.len() != label_set.len() {
            return Err(Error::invalid("one description embedding per label is required"));
        }
        Ok(Self {
            kind,
            label_set,
            descriptions,
            config,
        })
    }

    pub fn encoder(&self) -> &EncoderDescriptor {
        &self.descriptions.encoder
    }

    pub fn zero_shot(&self) -> Result<FewShotModel> {
        zero_shot_init(&self.label_set, &self.descriptions, self.kind, &self.config)
    }

    /// Trains from scratch on `examples`.
    pub fn fit(&self, examples: &TrainingSet) -> Result<FewShotModel> {
        match self.zero_shot()? {
            FewShotModel::LabelTuning(m) => {
                Ok(FewShotModel::LabelTuning(lt_train(&m, examples, &self.config)?))
            }
            FewShotModel::LogisticRegression(_) => {
                examples.check(self.label_set.len(), self.encoder())?;
                let combined = with_descriptions(&self.descriptions, examples);
                Ok(FewShotModel::LogisticRegression(lr_train(
                    &self.label_set,
                    &combined,
                    &self.config,
                )?))
            }
        }
    }
}

/// Description embeddings stacked on top of the examples, one per label.
fn with_descriptions(descriptions: &Embeddings, examples: &TrainingSet) -> TrainingSet {
    let n_labels = descriptions.len();
    let matrix = ndarray::concatenate(
        Axis(0),
        &[descriptions.matrix.view(), examples.embeddings.matrix.view()],
    )
    .expect("same embedding width");
    TrainingSet {
        embeddings: Embeddings {
            encoder: descriptions.encoder.clone(),
            matrix,
        },
        labels: (0..n_labels).chain(examples.labels.iter().copied()).collect(),
    }
}

/// Zero-shot model from encoded label descriptions.
///
/// Label tuning uses the description embeddings directly as label matrix.
/// Logistic regression is trained on one example per label: its description.
pub fn zero_shot_init(
    label_set: &LabelSet,
    descriptions: &Embeddings,
    kind: ModelKind,
    config: &TrainConfig,
) -> Result<FewShotModel> {
    if descriptions.len() != label_set.len() {
        return Err(Error::invalid("one description embedding per label is required"));
    }
    match kind {
        ModelKind::LabelTuning => Ok(FewShotModel::LabelTuning(LabelTuningModel::zero_shot(
            label_set.clone(),
            descriptions,
            config.scale,
        ))),
        ModelKind::LogisticRegression => {
            let set = TrainingSet::new(descriptions.clone(), (0..label_set.len()).collect())?;
            Ok(FewShotModel::LogisticRegression(lr_train(label_set, &set, config)?))
        }
    }
}

/// Mean cross-entropy of softmax rows of `logits` against `labels`, and the
/// gradient of that mean w.r.t. the logits (`(P - Y) / n`).
pub(crate) fn softmax_cross_entropy(logits: ArrayView2<'_, f64>, labels: &[usize]) -> (f64, Array2<f64>) {
    let n = labels.len() as f64;
    let mut grad = Array2::zeros(logits.raw_dim());
    let mut loss = 0.0;
    for ((row, mut g), &y) in logits.rows().into_iter().zip(grad.rows_mut()).zip(labels) {
        let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let sum: f64 = row.iter().map(|z| (z - max).exp()).sum();
        let log_z = max + sum.ln();
        loss += log_z - row[y];
        for (j, (gj, z)) in g.iter_mut().zip(row.iter()).enumerate() {
            let p = (z - log_z).exp();
            *gj = (p - if j == y { 1.0 } else { 0.0 }) / n;
        }
    }
    (loss / n, grad)
}

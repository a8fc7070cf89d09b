use ndarray::{Array2, ArrayView2};

use super::{softmax_cross_entropy, TrainConfig, TrainingSet};
use crate::corpus::LabelSet;
use crate::encoder::{Embeddings, EncoderDescriptor};
use crate::{Error, Result};

/// Label tuning: scores are `scale * <e, w_l>` against one tunable embedding
/// per label. Only `label_matrix` is ever trained.
#[derive(Clone, Debug, PartialEq)]
pub struct LabelTuningModel {
    pub label_set: LabelSet,
    pub label_matrix: Array2<f64>,
    /// Zero-shot label embeddings, the anchor of the `l2_to_init` penalty.
    pub init_matrix: Array2<f64>,
    pub scale: f64,
    pub encoder: EncoderDescriptor,
}

impl LabelTuningModel {
    pub fn zero_shot(label_set: LabelSet, descriptions: &Embeddings, scale: f64) -> Self {
        Self {
            label_set,
            label_matrix: descriptions.matrix.clone(),
            init_matrix: descriptions.matrix.clone(),
            scale,
            encoder: descriptions.encoder.clone(),
        }
    }

    pub(crate) fn logits(&self, inputs: ArrayView2<'_, f64>) -> Array2<f64> {
        inputs.dot(&self.label_matrix.t()) * self.scale
    }
}

/// Training objective and its gradient w.r.t. `label_matrix`:
///
/// `mean_i CE(softmax(scale * E W^T)_i, y_i) + l2_to_init * ||W - W_init||^2`
pub fn label_tuning_objective(
    label_matrix: ArrayView2<'_, f64>,
    init_matrix: ArrayView2<'_, f64>,
    inputs: ArrayView2<'_, f64>,
    labels: &[usize],
    scale: f64,
    l2_to_init: f64,
) -> (f64, Array2<f64>) {
    let logits = inputs.dot(&label_matrix.t()) * scale;
    let (ce, dlogits) = softmax_cross_entropy(logits.view(), labels);
    let diff = &label_matrix - &init_matrix;
    let penalty = l2_to_init * diff.iter().map(|d| d * d).sum::<f64>();
    let grad = dlogits.t().dot(&inputs) * scale + diff * (2.0 * l2_to_init);
    (ce + penalty, grad)
}

/// Full-batch gradient descent for `config.epochs` steps. A step that would
/// raise the objective is retried with half the step size, so the loss
/// trace is non-increasing.
pub fn lt_train(model: &LabelTuningModel, examples: &TrainingSet, config: &TrainConfig) -> Result<LabelTuningModel> {
    lt_train_traced(model, examples, config).map(|(m, _)| m)
}

/// As [`lt_train`], also returning the objective before training and after
/// every epoch.
pub fn lt_train_traced(
    model: &LabelTuningModel,
    examples: &TrainingSet,
    config: &TrainConfig,
) -> Result<(LabelTuningModel, Vec<f64>)> {
    if examples.is_empty() {
        return Err(Error::invalid("label tuning needs at least one example"));
    }
    examples.check(model.label_set.len(), &model.encoder)?;
    let inputs = examples.embeddings.matrix.view();
    let objective = |w: ArrayView2<'_, f64>| {
        label_tuning_objective(
            w,
            model.init_matrix.view(),
            inputs,
            &examples.labels,
            model.scale,
            config.l2_to_init,
        )
    };

    let mut weights = model.label_matrix.clone();
    let (mut loss, mut grad) = objective(weights.view());
    let mut trace = Vec::with_capacity(config.epochs + 1);
    trace.push(loss);
    let mut step = config.learning_rate;
    for _ in 0..config.epochs {
        let mut accepted = false;
        for _ in 0..30 {
            let candidate = &weights - &(&grad * step);
            let (c_loss, c_grad) = objective(candidate.view());
            if c_loss <= loss {
                weights = candidate;
                loss = c_loss;
                grad = c_grad;
                accepted = true;
                break;
            }
            step *= 0.5;
        }
        trace.push(loss);
        if !accepted {
            break;
        }
    }
    Ok((
        LabelTuningModel {
            label_matrix: weights,
            ..model.clone()
        },
        trace,
    ))
}

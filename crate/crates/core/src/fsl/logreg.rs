use ndarray::{Array1, Array2, ArrayView1, ArrayView2, Axis};

use super::{softmax_cross_entropy, TrainConfig, TrainingSet};
use crate::corpus::LabelSet;
use crate::encoder::EncoderDescriptor;
use crate::{Error, Result};

/// Multinomial logistic regression on embeddings.
#[derive(Clone, Debug, PartialEq)]
pub struct LogRegModel {
    pub label_set: LabelSet,
    pub weights: Array2<f64>,
    pub bias: Array1<f64>,
    pub l2: f64,
    pub encoder: EncoderDescriptor,
}

impl LogRegModel {
    pub(crate) fn logits(&self, inputs: ArrayView2<'_, f64>) -> Array2<f64> {
        inputs.dot(&self.weights.t()) + &self.bias
    }
}

/// `mean_i CE + l2 / (2n) * ||W||^2` (bias unregularized), which has the same
/// minimizer as scikit-learn's `C * sum CE + ||W||^2 / 2` with `C = 1 / l2`.
/// Returns the objective and the gradients for weights and bias.
pub fn logreg_objective(
    weights: ArrayView2<'_, f64>,
    bias: ArrayView1<'_, f64>,
    inputs: ArrayView2<'_, f64>,
    labels: &[usize],
    l2: f64,
) -> (f64, Array2<f64>, Array1<f64>) {
    let n = labels.len() as f64;
    let logits = inputs.dot(&weights.t()) + bias;
    let (ce, dlogits) = softmax_cross_entropy(logits.view(), labels);
    let reg = l2 / (2.0 * n) * weights.iter().map(|w| w * w).sum::<f64>();
    let grad_w = dlogits.t().dot(&inputs) + &weights * (l2 / n);
    let grad_b = dlogits.sum_axis(Axis(0));
    (ce + reg, grad_w, grad_b)
}

pub fn lr_train(label_set: &LabelSet, examples: &TrainingSet, config: &TrainConfig) -> Result<LogRegModel> {
    lr_train_traced(label_set, examples, config).map(|(m, _)| m)
}

/// Gradient descent from zero weights with the fixed step `1 / L`, where `L`
/// bounds the objective's curvature: `max_i (||x_i||^2 + 1) / 2 + l2 / n`.
/// That step guarantees a non-increasing objective. Returns the objective
/// before training and after every iteration.
pub fn lr_train_traced(
    label_set: &LabelSet,
    examples: &TrainingSet,
    config: &TrainConfig,
) -> Result<(LogRegModel, Vec<f64>)> {
    if examples.is_empty() {
        return Err(Error::invalid("logistic regression needs at least one example"));
    }
    let encoder = examples.embeddings.encoder.clone();
    examples.check(label_set.len(), &encoder)?;
    let inputs = examples.embeddings.matrix.view();
    let n = examples.len() as f64;
    let max_sq = inputs
        .rows()
        .into_iter()
        .map(|r| r.dot(&r))
        .fold(0.0f64, f64::max);
    let lipschitz = 0.5 * (max_sq + 1.0) + config.lr_l2 / n;
    let step = 1.0 / lipschitz;

    let mut weights = Array2::<f64>::zeros((label_set.len(), inputs.ncols()));
    let mut bias = Array1::<f64>::zeros(label_set.len());
    let mut trace = Vec::with_capacity(config.max_iter + 1);
    for _ in 0..config.max_iter {
        let (obj, gw, gb) = logreg_objective(weights.view(), bias.view(), inputs, &examples.labels, config.lr_l2);
        trace.push(obj);
        let gmax = gw.iter().chain(gb.iter()).fold(0.0f64, |m, g| m.max(g.abs()));
        if gmax < config.tol {
            break;
        }
        weights.scaled_add(-step, &gw);
        bias.scaled_add(-step, &gb);
    }
    let (obj, _, _) = logreg_objective(weights.view(), bias.view(), inputs, &examples.labels, config.lr_l2);
    trace.push(obj);
    Ok((
        LogRegModel {
            label_set: label_set.clone(),
            weights,
            bias,
            l2: config.lr_l2,
            encoder,
        },
        trace,
    ))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::encoder::{EmbeddingVector, Embeddings};
    use crate::fsl::FewShotModel;

    fn set(rows: &[Vec<f64>], labels: Vec<usize>) -> TrainingSet {
        let vs: Vec<_> = rows.iter().map(|r| EmbeddingVector::normalized(r.clone()).unwrap()).collect();
        let emb = Embeddings::from_vectors(
            EncoderDescriptor {
                encoder_id: "fixture".into(),
                dim: rows[0].len(),
            },
            &vs,
        )
        .unwrap();
        TrainingSet::new(emb, labels).unwrap()
    }

    fn two_labels() -> LabelSet {
        LabelSet::from_pairs([("neg", "negative"), ("pos", "positive")]).unwrap()
    }

    #[test]
    fn objective_never_increases() {
        let rows: Vec<Vec<f64>> = (0..12)
            .map(|i| vec![(i as f64 * 0.7).sin(), (i as f64 * 1.3).cos(), 0.3])
            .collect();
        let labels = (0..12).map(|i| i % 2).collect();
        let (_, trace) = lr_train_traced(&two_labels(), &set(&rows, labels), &TrainConfig::default()).unwrap();
        assert!(trace.windows(2).all(|w| w[1] <= w[0] + 1e-15));
    }

    #[test]
    fn single_class_dominates_everywhere() {
        let rows = vec![vec![1.0, 0.2], vec![0.3, 1.0], vec![-0.5, 0.5]];
        let m = lr_train(&two_labels(), &set(&rows, vec![1, 1, 1]), &TrainConfig::default()).unwrap();
        let probe = set(&[vec![-1.0, 0.0], vec![0.0, -1.0], vec![1.0, 1.0]], vec![0, 0, 0]);
        for p in FewShotModel::LogisticRegression(m).predict(&probe.embeddings).unwrap() {
            assert!(p.probs()[1] > p.probs()[0]);
        }
    }

    #[test]
    fn stronger_regularization_flattens_posteriors() {
        let rows: Vec<Vec<f64>> = (0..20)
            .map(|i| {
                let s = if i % 2 == 0 { 1.0 } else { -1.0 };
                vec![s, 0.1 * i as f64, 0.5]
            })
            .collect();
        let labels: Vec<usize> = (0..20).map(|i| i % 2).collect();
        let data = set(&rows, labels);
        let gap = |l2: f64| {
            let cfg = TrainConfig { lr_l2: l2, ..TrainConfig::default() };
            let m = FewShotModel::LogisticRegression(lr_train(&two_labels(), &data, &cfg).unwrap());
            m.predict(&data.embeddings)
                .unwrap()
                .iter()
                .map(|p| {
                    let (a, b) = p.top_two();
                    a - b
                })
                .fold(0.0f64, f64::max)
        };
        let gaps = [gap(0.01), gap(1.0), gap(100.0)];
        assert!(gaps[0] > gaps[1] && gaps[1] > gaps[2], "{gaps:?}");
    }
}

//! Stopping rule and predictor evaluation.

use serde::{Deserialize, Serialize};

use crate::{Error, Result};

/// Stop annotating once the predicted normalized F1 exceeds `tau`.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct StoppingRule {
    pub tau: f64,
}

impl Default for StoppingRule {
    fn default() -> Self {
        Self { tau: 0.95 }
    }
}

impl StoppingRule {
    /// Accepts `0 <= tau <= 1`; the closed ends are kept for degenerate
    /// checks (0 always stops at the first eligible point, 1 never stops).
    pub fn new(tau: f64) -> Result<Self> {
        if !(0.0..=1.0).contains(&tau) {
            return Err(Error::invalid(format!("tau must lie in [0, 1], got {tau}")));
        }
        Ok(Self { tau })
    }

    /// Index of the first point with `n_train > 0` whose prediction exceeds
    /// tau. The zero-shot point is never a stop: nothing has been annotated.
    pub fn stop_index(&self, n_train: &[usize], predictions: &[f64]) -> Option<usize> {
        n_train
            .iter()
            .zip(predictions)
            .position(|(&n, &p)| n > 0 && p > self.tau)
    }
}

/// One run of a learning curve with the predictor's output at every point.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RunCurve {
    pub run_id: String,
    pub n_train: Vec<usize>,
    /// Raw test macro F1.
    pub test_f1: Vec<f64>,
    /// Normalized test F1 (the regression target).
    pub target: Vec<f64>,
    pub prediction: Vec<f64>,
}

impl RunCurve {
    fn check(&self) -> Result<()> {
        let n = self.n_train.len();
        if n == 0 {
            return Err(Error::invalid(format!("run `{}` is empty", self.run_id)));
        }
        if self.test_f1.len() != n || self.target.len() != n || self.prediction.len() != n {
            return Err(Error::invalid(format!("run `{}` has misaligned series", self.run_id)));
        }
        Ok(())
    }

    /// Same run with predictions replaced by a fixed-step baseline.
    pub fn with_baseline(&self, instances: usize) -> RunCurve {
        RunCurve {
            prediction: baseline_predictions(&self.n_train, instances),
            ..self.clone()
        }
    }
}

/// Fixed-step baseline: predicts 1 once `n_train >= instances`, else 0.
pub fn baseline_predictions(n_train: &[usize], instances: usize) -> Vec<f64> {
    n_train
        .iter()
        .map(|&n| if n >= instances { 1.0 } else { 0.0 })
        .collect()
}

/// Where a run stopped.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StopPoint {
    pub run_id: String,
    /// `None` when the rule never fired within the run.
    pub index: Option<usize>,
    pub n_train: usize,
    pub test_f1: f64,
    pub normalized_f1: f64,
}

/// Averages over runs. A run where the rule never fires is charged its last
/// point (the whole budget was spent) and counted in `no_stop`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StopStats {
    pub test_f1: f64,
    pub normalized_f1: f64,
    /// `(1 - normalized F1 at stop) * 100`.
    pub err: f64,
    pub instances: f64,
    pub no_stop: usize,
    pub runs: Vec<StopPoint>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PredictorReport {
    pub mse: f64,
    /// `None` when all pooled points fall on one side of tau.
    pub auc: Option<f64>,
    pub precision: f64,
    pub recall: f64,
    pub f1: f64,
    pub stop: StopStats,
    pub points: usize,
}

impl PredictorReport {
    /// Columns for tabular output, in percent (MSE in 1e-4 units). `test_f1`
    /// is the raw test F1 at stop, `norm_f1` the normalized one.
    pub const COLUMNS: [&'static str; 9] = ["mse_bp", "auc", "f1", "p", "r", "test_f1", "norm_f1", "err", "instances"];

    pub fn row(&self) -> [f64; 9] {
        [
            self.mse * 1e4,
            self.auc.map_or(f64::NAN, |a| a * 100.0),
            self.f1 * 100.0,
            self.precision * 100.0,
            self.recall * 100.0,
            self.stop.test_f1 * 100.0,
            self.stop.normalized_f1 * 100.0,
            self.stop.err,
            self.stop.instances,
        ]
    }
}

/// Mann-Whitney AUC with average ranks for ties.
pub fn auc(scores: &[f64], positive: &[bool]) -> Option<f64> {
    let n_pos = positive.iter().filter(|&&p| p).count();
    let n_neg = positive.len() - n_pos;
    if n_pos == 0 || n_neg == 0 {
        return None;
    }
    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_by(|&a, &b| scores[a].total_cmp(&scores[b]));
    let mut rank_sum = 0.0;
    let mut i = 0;
    while i < order.len() {
        let mut j = i;
        while j + 1 < order.len() && scores[order[j + 1]] == scores[order[i]] {
            j += 1;
        }
        let avg_rank = (i + j) as f64 / 2.0 + 1.0;
        rank_sum += order[i..=j].iter().filter(|&&k| positive[k]).count() as f64 * avg_rank;
        i = j + 1;
    }
    let u = rank_sum - (n_pos * (n_pos + 1)) as f64 / 2.0;
    Some(u / (n_pos * n_neg) as f64)
}

/// Scores predictions against targets, pooling every point of every run.
pub fn evaluate_predictor(runs: &[RunCurve], rule: StoppingRule) -> Result<PredictorReport> {
    if runs.is_empty() {
        return Err(Error::invalid("no runs to evaluate"));
    }
    for r in runs {
        r.check()?;
    }
    let preds: Vec<f64> = runs.iter().flat_map(|r| r.prediction.iter().copied()).collect();
    let targets: Vec<f64> = runs.iter().flat_map(|r| r.target.iter().copied()).collect();
    let n = preds.len() as f64;
    let mse = preds.iter().zip(&targets).map(|(p, t)| (p - t).powi(2)).sum::<f64>() / n;

    let actual: Vec<bool> = targets.iter().map(|&t| t > rule.tau).collect();
    let predicted: Vec<bool> = preds.iter().map(|&p| p > rule.tau).collect();
    let tp = actual.iter().zip(&predicted).filter(|(a, p)| **a && **p).count() as f64;
    let fp = actual.iter().zip(&predicted).filter(|(a, p)| !**a && **p).count() as f64;
    let fn_ = actual.iter().zip(&predicted).filter(|(a, p)| **a && !**p).count() as f64;
    let ratio = |a: f64, b: f64| if b > 0.0 { a / b } else { 0.0 };
    let precision = ratio(tp, tp + fp);
    let recall = ratio(tp, tp + fn_);
    let f1 = ratio(2.0 * precision * recall, precision + recall);

    let stops: Vec<StopPoint> = runs
        .iter()
        .map(|r| {
            let index = rule.stop_index(&r.n_train, &r.prediction);
            let at = index.unwrap_or(r.n_train.len() - 1);
            StopPoint {
                run_id: r.run_id.clone(),
                index,
                n_train: r.n_train[at],
                test_f1: r.test_f1[at],
                normalized_f1: r.target[at],
            }
        })
        .collect();
    let m = stops.len() as f64;
    let normalized_f1 = stops.iter().map(|s| s.normalized_f1).sum::<f64>() / m;
    let stop = StopStats {
        test_f1: stops.iter().map(|s| s.test_f1).sum::<f64>() / m,
        normalized_f1,
        err: stops.iter().map(|s| (1.0 - s.normalized_f1) * 100.0).sum::<f64>() / m,
        instances: stops.iter().map(|s| s.n_train as f64).sum::<f64>() / m,
        no_stop: stops.iter().filter(|s| s.index.is_none()).count(),
        runs: stops,
    };
    Ok(PredictorReport {
        mse,
        auc: auc(&preds, &actual),
        precision,
        recall,
        f1,
        stop,
        points: preds.len(),
    })
}

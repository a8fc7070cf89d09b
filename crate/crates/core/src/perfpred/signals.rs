use rand::seq::index;
use serde::{Deserialize, Serialize};

use crate::corpus::Pool;
use crate::encoder::Embeddings;
use crate::fsl::{kl_divergence, FewShotModel, Posterior, Trainer, TrainingSet};
use crate::rng;
use crate::select::{StrategyId, KL_EPS};
use crate::simulate::per_label_f1;
use crate::{Error, Result};

/// Default size of the unlabeled sample the signals are averaged over.
pub const SAMPLE_T_SIZE: usize = 1000;

/// Convergence signals after one iteration, averaged over the sample T.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct IterationSnapshot {
    pub iter: usize,
    pub n_train: usize,
    /// Stratified cross-validation macro F1 on the labeled set; absent with
    /// fewer than two labeled classes.
    pub cv_f1: Option<f64>,
    pub neg_entropy: f64,
    pub max_prob: f64,
    pub margin: f64,
    /// Fraction of T whose predicted label did not change.
    pub agreement: f64,
    /// `-mean KL(P_i || P_{i-1})` over T.
    pub neg_kl: f64,
    /// Posteriors on T, kept for the next iteration's deltas.
    #[serde(skip)]
    pub posteriors_t: Vec<Posterior>,
}

impl IterationSnapshot {
    /// Signal values in [`SIGNALS`] order; absent cv F1 reads as 0.
    pub fn signal_values(&self) -> [f64; 6] {
        [
            self.cv_f1.unwrap_or(0.0),
            self.neg_entropy,
            self.max_prob,
            self.margin,
            self.agreement,
            self.neg_kl,
        ]
    }
}

/// Signal names, in feature order.
pub const SIGNALS: [&str; 6] = ["cv_f1", "neg_entropy", "max_prob", "margin", "agreement", "neg_kl"];

/// Uniform sample without replacement of `min(size, |pool|)` ids, reported in
/// pool order.
pub fn sample_t(pool: &Pool, size: usize, seed: u64) -> Result<Vec<String>> {
    if pool.is_empty() {
        return Err(Error::invalid("cannot sample from an empty pool"));
    }
    let take = size.min(pool.len());
    let mut rng = rng::seeded(seed);
    let mut picks = index::sample(&mut rng, pool.len(), take).into_vec();
    picks.sort_unstable();
    Ok(picks.into_iter().map(|i| pool.instances()[i].id.clone()).collect())
}

/// Builds a snapshot from posteriors already computed on T.
pub fn snapshot_from_posteriors(
    posteriors_t: Vec<Posterior>,
    previous: Option<&[Posterior]>,
    cv_f1: Option<f64>,
    iter: usize,
    n_train: usize,
) -> Result<IterationSnapshot> {
    if posteriors_t.is_empty() {
        return Err(Error::invalid("sample T is empty"));
    }
    if let Some(prev) = previous {
        if prev.len() != posteriors_t.len() {
            return Err(Error::invalid("previous posteriors are not aligned with T"));
        }
    }
    let n = posteriors_t.len() as f64;
    let mean = |f: &dyn Fn(&Posterior) -> f64| posteriors_t.iter().map(f).sum::<f64>() / n;
    let neg_entropy = -mean(&|p| p.entropy());
    let max_prob = mean(&|p| p.max_prob());
    let margin = mean(&|p| {
        let (a, b) = p.top_two();
        a - b
    });
    let (agreement, neg_kl) = match previous {
        None => (1.0, 0.0),
        Some(prev) => {
            let same = posteriors_t
                .iter()
                .zip(prev)
                .filter(|(p, q)| p.argmax() == q.argmax())
                .count() as f64;
            let kl: f64 = posteriors_t
                .iter()
                .zip(prev)
                .map(|(p, q)| kl_divergence(p, q, KL_EPS))
                .sum();
            (same / n, -(kl / n))
        }
    };
    Ok(IterationSnapshot {
        iter,
        n_train,
        cv_f1,
        neg_entropy,
        max_prob,
        margin,
        agreement,
        neg_kl: if neg_kl == 0.0 { 0.0 } else { neg_kl },
        posteriors_t,
    })
}

/// Signals for `model` on the sample `t`, with deltas against the previous
/// iteration's posteriors and cross-validation on `labeled`.
pub fn snapshot(
    trainer: &Trainer,
    model: &FewShotModel,
    previous: Option<&[Posterior]>,
    t: &Embeddings,
    labeled: &TrainingSet,
    iter: usize,
) -> Result<IterationSnapshot> {
    if t.is_empty() {
        return Err(Error::invalid("sample T is empty"));
    }
    let posteriors = model.predict(t)?;
    let cv = cv_f1(trainer, labeled)?;
    snapshot_from_posteriors(posteriors, previous, cv, iter, labeled.len())
}

pub const CV_FOLDS: usize = 5;

/// Stratified 5-fold cross-validated macro F1 over the labeled classes.
///
/// Within each class, examples are dealt to folds round-robin in order, so a
/// class with fewer than five examples is effectively left-one-out. A class
/// with a single example is never held out: it is always trained on and
/// scores 0 for its own F1. Returns `None` with fewer than two classes.
pub fn cv_f1(trainer: &Trainer, labeled: &TrainingSet) -> Result<Option<f64>> {
    let n_labels = trainer.label_set.len();
    let mut counts = vec![0usize; n_labels];
    for &l in &labeled.labels {
        if l >= n_labels {
            return Err(Error::UnknownLabel(format!("#{l}")));
        }
        counts[l] += 1;
    }
    let present: Vec<usize> = (0..n_labels).filter(|&l| counts[l] > 0).collect();
    if present.len() < 2 {
        return Ok(None);
    }
    let mut seen = vec![0usize; n_labels];
    let folds: Vec<Option<usize>> = labeled
        .labels
        .iter()
        .map(|&l| {
            let pos = seen[l];
            seen[l] += 1;
            (counts[l] > 1).then_some(pos % CV_FOLDS)
        })
        .collect();

    let mut gold = Vec::new();
    let mut pred = Vec::new();
    for fold in 0..CV_FOLDS {
        let test: Vec<usize> = (0..labeled.len()).filter(|&i| folds[i] == Some(fold)).collect();
        if test.is_empty() {
            continue;
        }
        let train: Vec<usize> = (0..labeled.len()).filter(|&i| folds[i] != Some(fold)).collect();
        let model = trainer.fit(&labeled.subset(&train))?;
        let held_out = labeled.subset(&test);
        for (p, &g) in model.predict(&held_out.embeddings)?.iter().zip(&held_out.labels) {
            pred.push(p.argmax());
            gold.push(g);
        }
    }
    let f1 = per_label_f1(&gold, &pred, n_labels);
    Ok(Some(present.iter().map(|&l| f1[l]).sum::<f64>() / present.len() as f64))
}

/// Divides a test-F1 curve by its maximum.
pub fn normalize_curve(f1_by_iter: &[f64]) -> Result<Vec<f64>> {
    let max = f1_by_iter.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    if !(max > 0.0) {
        return Err(Error::invalid("cannot normalize a curve without a positive value"));
    }
    Ok(f1_by_iter.iter().map(|v| v / max).collect())
}

/// Features for one iteration of a run.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(transparent)]
pub struct FeatureVector(pub Vec<f64>);

/// Layout: `n_train`, one-hot strategy over [`StrategyId::ALL`], label
/// count, then for each signal in [`SIGNALS`] order the current value
/// followed by the `history` previous values (most recent first). Missing
/// history repeats the earliest available value.
pub fn feature_len(history: usize) -> usize {
    2 + StrategyId::ALL.len() + SIGNALS.len() * (history + 1)
}

pub fn feature_names(history: usize) -> Vec<String> {
    let mut names = vec!["n_train".to_string()];
    names.extend(StrategyId::ALL.iter().map(|s| format!("strategy={s}")));
    names.push("n_labels".into());
    for s in SIGNALS {
        names.push(s.to_string());
        names.extend((1..=history).map(|h| format!("{s}[-{h}]")));
    }
    names
}

/// Feature vectors for every iteration of one run.
pub fn curve_features(
    curve: &[IterationSnapshot],
    strategy: StrategyId,
    n_labels: usize,
    history: usize,
) -> Vec<FeatureVector> {
    (0..curve.len())
        .map(|i| {
            let mut v = Vec::with_capacity(feature_len(history));
            v.push(curve[i].n_train as f64);
            v.extend(StrategyId::ALL.iter().map(|&s| if s == strategy { 1.0 } else { 0.0 }));
            v.push(n_labels as f64);
            for s in 0..SIGNALS.len() {
                for h in 0..=history {
                    let j = i.saturating_sub(h);
                    v.push(curve[j].signal_values()[s]);
                }
            }
            FeatureVector(v)
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::corpus::TextInstance;

    #[test]
    fn identical_models_agree_fully() {
        let ps = vec![
            Posterior::new(vec![0.7, 0.3]).unwrap(),
            Posterior::new(vec![0.2, 0.8]).unwrap(),
        ];
        let s = snapshot_from_posteriors(ps.clone(), Some(&ps), None, 3, 48).unwrap();
        assert_eq!(s.agreement, 1.0);
        assert_eq!(s.neg_kl, 0.0);
    }

    #[test]
    fn uniform_closed_forms() {
        let s = snapshot_from_posteriors(vec![Posterior::uniform(4); 10], None, None, 0, 0).unwrap();
        assert!((s.neg_entropy + 4f64.ln()).abs() < 1e-12);
        assert!((s.max_prob - 0.25).abs() < 1e-12);
        assert_eq!(s.margin, 0.0);
        assert_eq!(s.agreement, 1.0);
    }

    #[test]
    fn agreement_counts_argmax_changes() {
        let prev = vec![
            Posterior::new(vec![0.9, 0.1]).unwrap(),
            Posterior::new(vec![0.6, 0.4]).unwrap(),
            Posterior::new(vec![0.3, 0.7]).unwrap(),
        ];
        let cur = vec![
            Posterior::new(vec![0.8, 0.2]).unwrap(),
            Posterior::new(vec![0.4, 0.6]).unwrap(),
            Posterior::new(vec![0.1, 0.9]).unwrap(),
        ];
        let s = snapshot_from_posteriors(cur, Some(&prev), None, 1, 16).unwrap();
        assert!((s.agreement - 2.0 / 3.0).abs() < 1e-12);
        assert!(s.neg_kl < 0.0);
    }

    #[test]
    fn empty_t_is_an_error() {
        assert!(snapshot_from_posteriors(vec![], None, None, 0, 0).is_err());
    }

    #[test]
    fn sample_t_caps_and_repeats() {
        let pool = Pool::new((0..600).map(|i| TextInstance::new(format!("p{i}"), "x", None)).collect()).unwrap();
        assert_eq!(sample_t(&pool, 1000, 1).unwrap().len(), 600);
        let big = Pool::new((0..5000).map(|i| TextInstance::new(format!("p{i}"), "x", None)).collect()).unwrap();
        let a = sample_t(&big, 1000, 4).unwrap();
        assert_eq!(a.len(), 1000);
        assert_eq!(a, sample_t(&big, 1000, 4).unwrap());
        assert!(a.iter().all(|id| big.contains(id)));
    }

    #[test]
    fn normalization() {
        assert_eq!(normalize_curve(&[0.2, 0.4, 0.5]).unwrap(), vec![0.4, 0.8, 1.0]);
        assert_eq!(normalize_curve(&[0.3, 0.3]).unwrap(), vec![1.0, 1.0]);
        assert_eq!(normalize_curve(&[0.5, 0.4, 0.5]).unwrap(), vec![1.0, 0.8, 1.0]);
        assert!(normalize_curve(&[0.0, 0.0]).is_err());
    }

    #[test]
    fn feature_layout_pads_with_earliest() {
        let mk = |i: usize, a: f64| IterationSnapshot {
            iter: i,
            n_train: 16 * i,
            cv_f1: None,
            neg_entropy: -1.0,
            max_prob: 0.5,
            margin: 0.1,
            agreement: a,
            neg_kl: 0.0,
            posteriors_t: vec![],
        };
        let curve = vec![mk(0, 1.0), mk(1, 0.5), mk(2, 0.8)];
        let f = curve_features(&curve, StrategyId::Margin, 4, 5);
        assert_eq!(f[2].0.len(), feature_len(5));
        assert_eq!(feature_names(5).len(), feature_len(5));
        let agreement_at = 2 + StrategyId::ALL.len() + 4 * 6;
        assert_eq!(&f[2].0[agreement_at..agreement_at + 6], &[0.8, 0.5, 1.0, 1.0, 1.0, 1.0]);
        assert_eq!(f[2].0[1 + StrategyId::Margin.index()], 1.0);
    }
}

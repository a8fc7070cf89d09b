//! Bagged regression trees.

use rand::seq::index;
use rand::Rng as _;
use serde::{Deserialize, Serialize};

use super::FeatureVector;
use crate::rng;
use crate::{Error, Result};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ForestConfig {
    pub n_trees: usize,
    /// `None` grows trees until leaves are pure or too small.
    pub max_depth: Option<usize>,
    pub min_leaf: usize,
    /// Features tried per split; `None` means `ceil(sqrt(d))`.
    pub feature_subsample: Option<usize>,
    pub bootstrap: bool,
}

impl Default for ForestConfig {
    fn default() -> Self {
        Self {
            n_trees: 200,
            max_depth: Some(8),
            min_leaf: 2,
            feature_subsample: None,
            bootstrap: true,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "snake_case")]
enum Node {
    Leaf { value: f64 },
    Split { feature: usize, threshold: f64, left: usize, right: usize },
}

/// Axis-aligned regression tree; leaves hold the mean target.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RegressionTree {
    nodes: Vec<Node>,
}

impl RegressionTree {
    pub fn predict(&self, x: &[f64]) -> f64 {
        let mut at = 0;
        loop {
            match self.nodes[at] {
                Node::Leaf { value } => return value,
                Node::Split {
                    feature,
                    threshold,
                    left,
                    right,
                } => at = if x[feature] <= threshold { left } else { right },
            }
        }
    }

    pub fn depth(&self) -> usize {
        fn go(nodes: &[Node], at: usize) -> usize {
            match nodes[at] {
                Node::Leaf { .. } => 0,
                Node::Split { left, right, .. } => 1 + go(nodes, left).max(go(nodes, right)),
            }
        }
        go(&self.nodes, 0)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ForestModel {
    pub trees: Vec<RegressionTree>,
    pub config: ForestConfig,
    pub seed: u64,
    pub n_features: usize,
}

impl ForestModel {
    /// Mean tree output clamped to `[0, 1]`.
    pub fn predict(&self, x: &FeatureVector) -> Result<f64> {
        if x.0.len() != self.n_features {
            return Err(Error::DimensionMismatch {
                expected: self.n_features,
                found: x.0.len(),
            });
        }
        let sum: f64 = self.trees.iter().map(|t| t.predict(&x.0)).sum();
        Ok((sum / self.trees.len() as f64).clamp(0.0, 1.0))
    }
}

pub fn forest_predict(model: &ForestModel, x: &FeatureVector) -> Result<f64> {
    model.predict(x)
}

/// Fits a forest. Rows are first put in a canonical order (features, then
/// target), so the result depends only on the row multiset and the seed.
/// Tree `t` draws its bootstrap sample and feature subsets from a stream
/// derived from `(seed, t)`.
pub fn forest_fit(rows: &[(FeatureVector, f64)], config: &ForestConfig, seed: u64) -> Result<ForestModel> {
    if rows.is_empty() {
        return Err(Error::invalid("cannot fit a forest on an empty training set"));
    }
    if config.n_trees == 0 || config.min_leaf == 0 {
        return Err(Error::invalid("n_trees and min_leaf must be positive"));
    }
    let d = rows[0].0 .0.len();
    if let Some(bad) = rows.iter().find(|r| r.0 .0.len() != d) {
        return Err(Error::DimensionMismatch {
            expected: d,
            found: bad.0 .0.len(),
        });
    }
    if rows.iter().any(|(x, y)| !y.is_finite() || x.0.iter().any(|v| !v.is_finite())) {
        return Err(Error::invalid("forest rows must be finite"));
    }
    let mut order: Vec<usize> = (0..rows.len()).collect();
    order.sort_by(|&a, &b| {
        let (xa, ya) = &rows[a];
        let (xb, yb) = &rows[b];
        xa.0.iter()
            .zip(&xb.0)
            .map(|(p, q)| p.total_cmp(q))
            .find(|o| o.is_ne())
            .unwrap_or(std::cmp::Ordering::Equal)
            .then(ya.total_cmp(yb))
    });
    let xs: Vec<&[f64]> = order.iter().map(|&i| rows[i].0 .0.as_slice()).collect();
    let ys: Vec<f64> = order.iter().map(|&i| rows[i].1).collect();
    let mtry = config
        .feature_subsample
        .unwrap_or_else(|| (d as f64).sqrt().ceil() as usize)
        .clamp(1, d.max(1));

    let trees = (0..config.n_trees)
        .map(|t| {
            let mut rng = rng::seeded(rng::derive(seed, t as u64));
            let n = xs.len();
            let sample: Vec<usize> = if config.bootstrap {
                (0..n).map(|_| rng.random_range(0..n)).collect()
            } else {
                (0..n).collect()
            };
            let mut builder = TreeBuilder {
                xs: &xs,
                ys: &ys,
                config,
                mtry,
                n_features: d,
                rng,
                nodes: Vec::new(),
            };
            builder.grow(sample, 0);
            RegressionTree { nodes: builder.nodes }
        })
        .collect();
    Ok(ForestModel {
        trees,
        config: config.clone(),
        seed,
        n_features: d,
    })
}

struct TreeBuilder<'a> {
    xs: &'a [&'a [f64]],
    ys: &'a [f64],
    config: &'a ForestConfig,
    mtry: usize,
    n_features: usize,
    rng: rng::Rng,
    nodes: Vec<Node>,
}

struct Split {
    feature: usize,
    threshold: f64,
    sse: f64,
}

impl TreeBuilder<'_> {
    fn grow(&mut self, sample: Vec<usize>, depth: usize) -> usize {
        let id = self.nodes.len();
        let n = sample.len() as f64;
        let mean = sample.iter().map(|&i| self.ys[i]).sum::<f64>() / n;
        self.nodes.push(Node::Leaf { value: mean });
        let sse: f64 = sample.iter().map(|&i| (self.ys[i] - mean).powi(2)).sum();
        let depth_ok = self.config.max_depth.is_none_or(|m| depth < m);
        if !depth_ok || sample.len() < 2 * self.config.min_leaf || sse <= 1e-14 {
            return id;
        }
        let Some(split) = self.best_split(&sample, sse) else {
            return id;
        };
        let (left, right): (Vec<usize>, Vec<usize>) = sample
            .into_iter()
            .partition(|&i| self.xs[i][split.feature] <= split.threshold);
        let l = self.grow(left, depth + 1);
        let r = self.grow(right, depth + 1);
        self.nodes[id] = Node::Split {
            feature: split.feature,
            threshold: split.threshold,
            left: l,
            right: r,
        };
        id
    }

    fn best_split(&mut self, sample: &[usize], parent_sse: f64) -> Option<Split> {
        let mut features = index::sample(&mut self.rng, self.n_features, self.mtry).into_vec();
        features.sort_unstable();
        let min_leaf = self.config.min_leaf;
        let mut best: Option<Split> = None;
        let mut sorted = sample.to_vec();
        for f in features {
            sorted.sort_by(|&a, &b| self.xs[a][f].total_cmp(&self.xs[b][f]));
            let total: f64 = sorted.iter().map(|&i| self.ys[i]).sum();
            let total_sq: f64 = sorted.iter().map(|&i| self.ys[i] * self.ys[i]).sum();
            let n = sorted.len();
            let (mut s, mut sq) = (0.0, 0.0);
            for pos in 0..n - 1 {
                let y = self.ys[sorted[pos]];
                s += y;
                sq += y * y;
                let nl = pos + 1;
                let nr = n - nl;
                let (a, b) = (self.xs[sorted[pos]][f], self.xs[sorted[pos + 1]][f]);
                if nl < min_leaf || nr < min_leaf || a == b {
                    continue;
                }
                let sse_l = sq - s * s / nl as f64;
                let sse_r = (total_sq - sq) - (total - s).powi(2) / nr as f64;
                let sse = sse_l.max(0.0) + sse_r.max(0.0);
                if best.as_ref().is_none_or(|bs| sse < bs.sse) {
                    let mut threshold = a + (b - a) / 2.0;
                    if threshold >= b {
                        threshold = a;
                    }
                    best = Some(Split {
                        feature: f,
                        threshold,
                        sse,
                    });
                }
            }
        }
        best.filter(|s| s.sse < parent_sse - 1e-12 * parent_sse.max(1.0))
    }
}

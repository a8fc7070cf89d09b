//! Acquisition strategies: which unlabeled instances to annotate next.

use std::collections::HashSet;

use ndarray::{ArrayView1, ArrayView2};
use rand::seq::index;
use serde::{Deserialize, Serialize};

use crate::cluster::{self, Clustering};
use crate::fsl::{kl_divergence, Posterior};
use crate::rng;
use crate::{Error, Result};

/// Probability floor applied before taking logs in KL scores.
pub const KL_EPS: f64 = 1e-12;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(try_from = "String", into = "String")]
pub enum StrategyId {
    Random,
    LeastConfidence,
    Margin,
    Entropy,
    KMeans,
    KMedoids,
    SingleLink,
    KMeansMargin,
    KMedoidsMargin,
    KMedoidsLeast,
    KMedoidsEntropy,
    Cal,
}

impl StrategyId {
    pub const ALL: [StrategyId; 12] = [
        StrategyId::Random,
        StrategyId::LeastConfidence,
        StrategyId::Margin,
        StrategyId::Entropy,
        StrategyId::KMeans,
        StrategyId::KMedoids,
        StrategyId::SingleLink,
        StrategyId::KMeansMargin,
        StrategyId::KMedoidsMargin,
        StrategyId::KMedoidsLeast,
        StrategyId::KMedoidsEntropy,
        StrategyId::Cal,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            StrategyId::Random => "random",
            StrategyId::LeastConfidence => "least_confidence",
            StrategyId::Margin => "margin",
            StrategyId::Entropy => "entropy",
            StrategyId::KMeans => "kmeans",
            StrategyId::KMedoids => "kmedoids",
            StrategyId::SingleLink => "single_link",
            StrategyId::KMeansMargin => "kmeans+margin",
            StrategyId::KMedoidsMargin => "kmedoids+margin",
            StrategyId::KMedoidsLeast => "kmedoids+least",
            StrategyId::KMedoidsEntropy => "kmedoids+entropy",
            StrategyId::Cal => "cal",
        }
    }

    /// Position in [`StrategyId::ALL`]; used for one-hot features.
    pub fn index(self) -> usize {
        Self::ALL.iter().position(|&s| s == self).unwrap()
    }

    pub fn uncertainty(self) -> Option<UncertaintyKind> {
        match self {
            StrategyId::LeastConfidence | StrategyId::KMedoidsLeast => Some(UncertaintyKind::LeastConfidence),
            StrategyId::Margin | StrategyId::KMeansMargin | StrategyId::KMedoidsMargin => Some(UncertaintyKind::Margin),
            StrategyId::Entropy | StrategyId::KMedoidsEntropy => Some(UncertaintyKind::Entropy),
            _ => None,
        }
    }

    pub fn needs_posteriors(self) -> bool {
        self.uncertainty().is_some() || self == StrategyId::Cal
    }

    pub fn needs_embeddings(self) -> bool {
        !matches!(
            self,
            StrategyId::Random | StrategyId::LeastConfidence | StrategyId::Margin | StrategyId::Entropy
        )
    }

    /// Strategies ranked by a per-instance score, the ones subject to
    /// 2k-randomization.
    pub fn is_score_ranked(self) -> bool {
        matches!(
            self,
            StrategyId::LeastConfidence | StrategyId::Margin | StrategyId::Entropy | StrategyId::Cal
        )
    }
}

impl std::fmt::Display for StrategyId {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.as_str())
    }
}

impl std::str::FromStr for StrategyId {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        Self::ALL
            .iter()
            .copied()
            .find(|id| id.as_str() == s)
            .ok_or_else(|| Error::UnknownStrategy(s.to_string()))
    }
}

impl TryFrom<String> for StrategyId {
    type Error = Error;
    fn try_from(s: String) -> Result<Self> {
        s.parse()
    }
}

impl From<StrategyId> for String {
    fn from(s: StrategyId) -> Self {
        s.as_str().to_string()
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum UncertaintyKind {
    LeastConfidence,
    Margin,
    Entropy,
}

/// Higher means more uncertain.
///
/// - least confidence: `-P(y_hat | x)`
/// - margin: `-(P(y_1 | x) - P(y_2 | x))` for the two most probable labels
/// - entropy: `-sum_j P(y_j | x) ln P(y_j | x)`
pub fn uncertainty_score(p: &Posterior, kind: UncertaintyKind) -> f64 {
    match kind {
        UncertaintyKind::LeastConfidence => -p.max_prob(),
        UncertaintyKind::Margin => {
            let (a, b) = p.top_two();
            -(a - b)
        }
        UncertaintyKind::Entropy => p.entropy(),
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum KlDirection {
    /// `KL(neighbor || candidate)`
    #[default]
    NeighborToCandidate,
    /// `KL(candidate || neighbor)`
    CandidateToNeighbor,
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum NeighborDistribution {
    /// Current model posterior on the labeled neighbor.
    #[default]
    ModelPosterior,
    /// One-hot distribution of the neighbor's annotated label.
    GoldOneHot,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SelectionConfig {
    pub batch_k: usize,
    pub randomize_2k: bool,
    pub cal_neighbors: usize,
    pub cal_kl_direction: KlDirection,
    pub cal_neighbor_distribution: NeighborDistribution,
    pub seed: u64,
}

impl Default for SelectionConfig {
    fn default() -> Self {
        Self {
            batch_k: 16,
            randomize_2k: true,
            cal_neighbors: 10,
            cal_kl_direction: KlDirection::default(),
            cal_neighbor_distribution: NeighborDistribution::default(),
            seed: 0,
        }
    }
}

/// The labeled side of the pool, needed by CAL.
#[derive(Clone, Copy, Debug)]
pub struct LabeledView<'a> {
    pub embeddings: ArrayView2<'a, f64>,
    /// Model posteriors on the labeled instances (row-aligned).
    pub posteriors: Option<&'a [Posterior]>,
    /// Annotated label index per row.
    pub labels: &'a [usize],
}

/// Candidates for selection. `ids`, `posteriors` and `embeddings` are
/// row-aligned and cover only unlabeled instances.
#[derive(Clone, Copy, Debug)]
pub struct PoolState<'a> {
    pub ids: &'a [String],
    pub posteriors: Option<&'a [Posterior]>,
    pub embeddings: Option<ArrayView2<'a, f64>>,
    pub labeled: Option<LabeledView<'a>>,
}

/// A selection plus, when 2k-randomization applied, the ranked shortlist the
/// batch was drawn from.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Selection {
    pub ids: Vec<String>,
    pub shortlist: Option<Vec<String>>,
}

pub fn select(state: &PoolState<'_>, strategy: StrategyId, config: &SelectionConfig) -> Result<Vec<String>> {
    select_traced(state, strategy, config).map(|s| s.ids)
}

pub fn select_traced(state: &PoolState<'_>, strategy: StrategyId, config: &SelectionConfig) -> Result<Selection> {
    let n = state.ids.len();
    let k = config.batch_k;
    if k == 0 {
        return Err(Error::invalid("batch size must be at least 1"));
    }
    if config.cal_neighbors == 0 {
        return Err(Error::invalid("cal_neighbors must be at least 1"));
    }
    if k > n {
        return Err(Error::invalid(format!("requested {k} instances but only {n} are unlabeled")));
    }
    let mut seen = HashSet::with_capacity(n);
    if let Some(dup) = state.ids.iter().find(|id| !seen.insert(id.as_str())) {
        return Err(Error::Conflict(format!("duplicate candidate id `{dup}`")));
    }
    let posteriors = if strategy.needs_posteriors() {
        let p = state
            .posteriors
            .ok_or_else(|| Error::invalid(format!("strategy `{strategy}` needs model posteriors")))?;
        if p.len() != n {
            return Err(Error::invalid("posteriors are not aligned with candidate ids"));
        }
        Some(p)
    } else {
        None
    };
    let embeddings = if strategy.needs_embeddings() {
        let e = state
            .embeddings
            .ok_or_else(|| Error::invalid(format!("strategy `{strategy}` needs embeddings")))?;
        if e.nrows() != n {
            return Err(Error::invalid("embeddings are not aligned with candidate ids"));
        }
        Some(e)
    } else {
        None
    };

    let mut rng = rng::seeded(config.seed);
    let positions: Vec<usize>;
    let mut shortlist = None;
    match strategy {
        StrategyId::Random => {
            positions = index::sample(&mut rng, n, k).into_vec();
        }
        StrategyId::LeastConfidence | StrategyId::Margin | StrategyId::Entropy | StrategyId::Cal => {
            let scores = if strategy == StrategyId::Cal {
                cal_scores(state, embeddings.unwrap(), posteriors.unwrap(), config)?
            } else {
                let kind = strategy.uncertainty().unwrap();
                posteriors.unwrap().iter().map(|p| uncertainty_score(p, kind)).collect()
            };
            let ranked = rank_by_score(&scores, state.ids);
            if config.randomize_2k && n >= 2 * k {
                let top: Vec<usize> = ranked[..2 * k].to_vec();
                let mut picks = index::sample(&mut rng, 2 * k, k).into_vec();
                picks.sort_unstable();
                positions = picks.into_iter().map(|i| top[i]).collect();
                shortlist = Some(top.iter().map(|&i| state.ids[i].clone()).collect());
            } else {
                positions = ranked[..k].to_vec();
            }
        }
        StrategyId::KMeans | StrategyId::KMedoids | StrategyId::SingleLink => {
            positions = cluster_for(strategy, embeddings.unwrap(), k, config.seed)?.representatives;
        }
        StrategyId::KMeansMargin
        | StrategyId::KMedoidsMargin
        | StrategyId::KMedoidsLeast
        | StrategyId::KMedoidsEntropy => {
            let kind = strategy.uncertainty().unwrap();
            let scores: Vec<f64> = posteriors.unwrap().iter().map(|p| uncertainty_score(p, kind)).collect();
            let clustering = cluster_for(strategy, embeddings.unwrap(), k, config.seed)?;
            let mut best: Vec<Option<usize>> = vec![None; k];
            for (i, &c) in clustering.assignment.iter().enumerate() {
                let better = match best[c] {
                    None => true,
                    Some(b) => score_order(scores[i], &state.ids[i], scores[b], &state.ids[b]).is_lt(),
                };
                if better {
                    best[c] = Some(i);
                }
            }
            positions = best.into_iter().map(|b| b.expect("clusters are non-empty")).collect();
        }
    }
    Ok(Selection {
        ids: positions.iter().map(|&i| state.ids[i].clone()).collect(),
        shortlist,
    })
}

fn cluster_for(strategy: StrategyId, points: ArrayView2<'_, f64>, k: usize, seed: u64) -> Result<Clustering> {
    let seed = rng::derive(seed, 0xC1);
    match strategy {
        StrategyId::KMeans | StrategyId::KMeansMargin => cluster::kmeans(points, k, seed, 100),
        StrategyId::SingleLink => cluster::single_link(points, k),
        _ => cluster::kmedoids(points, k, seed, 100),
    }
}

/// Higher score first, then ascending id.
fn score_order(sa: f64, ida: &str, sb: f64, idb: &str) -> std::cmp::Ordering {
    sb.total_cmp(&sa).then_with(|| ida.cmp(idb))
}

/// Candidate positions sorted by descending score, ties by ascending id.
pub fn rank_by_score(scores: &[f64], ids: &[String]) -> Vec<usize> {
    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_by(|&a, &b| score_order(scores[a], &ids[a], scores[b], &ids[b]));
    order
}

/// Mean KL divergence between each candidate's posterior and the
/// distributions of its nearest labeled neighbors.
pub fn cal_scores(
    state: &PoolState<'_>,
    embeddings: ArrayView2<'_, f64>,
    posteriors: &[Posterior],
    config: &SelectionConfig,
) -> Result<Vec<f64>> {
    let labeled = state
        .labeled
        .filter(|l| !l.labels.is_empty())
        .ok_or_else(|| {
            Error::invalid("CAL needs labeled instances; annotate a first batch with another strategy")
        })?;
    let n_labels = posteriors.first().map(Posterior::len).unwrap_or(0);
    let neighbor_dists: Vec<Posterior> = match config.cal_neighbor_distribution {
        NeighborDistribution::ModelPosterior => labeled
            .posteriors
            .ok_or_else(|| Error::invalid("CAL needs model posteriors on the labeled instances"))?
            .to_vec(),
        NeighborDistribution::GoldOneHot => labeled
            .labels
            .iter()
            .map(|&l| Posterior::one_hot(n_labels, l))
            .collect(),
    };
    if neighbor_dists.len() != labeled.embeddings.nrows() || labeled.labels.len() != labeled.embeddings.nrows() {
        return Err(Error::invalid("labeled view is not row-aligned"));
    }
    let m = config.cal_neighbors.min(labeled.labels.len());
    Ok(embeddings
        .rows()
        .into_iter()
        .zip(posteriors)
        .map(|(row, p)| {
            let neighbors = nearest_labeled(row, labeled.embeddings, m);
            neighbors
                .iter()
                .map(|&j| match config.cal_kl_direction {
                    KlDirection::NeighborToCandidate => kl_divergence(&neighbor_dists[j], p, KL_EPS),
                    KlDirection::CandidateToNeighbor => kl_divergence(p, &neighbor_dists[j], KL_EPS),
                })
                .sum::<f64>()
                / m as f64
        })
        .collect())
}

/// Indices of the `m` nearest rows; ties go to the lower row index.
fn nearest_labeled(x: ArrayView1<'_, f64>, labeled: ArrayView2<'_, f64>, m: usize) -> Vec<usize> {
    let mut d: Vec<(f64, usize)> = labeled
        .rows()
        .into_iter()
        .enumerate()
        .map(|(j, r)| (cluster::euclidean(x, r), j))
        .collect();
    d.sort_by(|a, b| a.0.total_cmp(&b.0).then(a.1.cmp(&b.1)));
    d.truncate(m);
    d.into_iter().map(|(_, j)| j).collect()
}

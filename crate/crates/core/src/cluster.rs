//! Clustering in embedding space: k-means, k-medoids and single-link.
//!
//! All three use Euclidean distance. Point `i` is row `i` of the input.
//! k-medoids and single-link need O(n^2) distance evaluations and refuse
//! inputs above [`MAX_PAIRWISE_POINTS`].

use ndarray::{Array2, ArrayView1, ArrayView2, Axis};
use rand::Rng as _;
use serde::{Deserialize, Serialize};

use crate::rng;
use crate::{Error, Result};

/// Upper bound on points for the quadratic algorithms.
pub const MAX_PAIRWISE_POINTS: usize = 20_000;

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Clustering {
    /// Cluster id per point, in `0..k`.
    pub assignment: Vec<usize>,
    /// One member point per cluster, indexed by cluster id.
    pub representatives: Vec<usize>,
}

impl Clustering {
    pub fn k(&self) -> usize {
        self.representatives.len()
    }

    pub fn members(&self, cluster: usize) -> Vec<usize> {
        self.assignment
            .iter()
            .enumerate()
            .filter(|(_, &c)| c == cluster)
            .map(|(i, _)| i)
            .collect()
    }
}

pub fn euclidean(a: ArrayView1<'_, f64>, b: ArrayView1<'_, f64>) -> f64 {
    a.iter().zip(b.iter()).map(|(x, y)| (x - y) * (x - y)).sum::<f64>().sqrt()
}

fn sq_dist(a: ArrayView1<'_, f64>, b: ArrayView1<'_, f64>) -> f64 {
    a.iter().zip(b.iter()).map(|(x, y)| (x - y) * (x - y)).sum()
}

fn check_k(n: usize, k: usize) -> Result<()> {
    if k == 0 {
        return Err(Error::invalid("k must be positive"));
    }
    if k > n {
        return Err(Error::invalid(format!("k = {k} exceeds the {n} available points")));
    }
    Ok(())
}

fn check_pairwise(n: usize) -> Result<()> {
    if n > MAX_PAIRWISE_POINTS {
        return Err(Error::invalid(format!(
            "{n} points exceed the pairwise limit of {MAX_PAIRWISE_POINTS}"
        )));
    }
    Ok(())
}

/// Lloyd's k-means with k-means++ seeding.
pub fn kmeans(points: ArrayView2<'_, f64>, k: usize, seed: u64, max_iter: usize) -> Result<Clustering> {
    kmeans_traced(points, k, seed, max_iter).map(|(c, _)| c)
}

/// As [`kmeans`], also returning the within-cluster sum of squares after
/// every iteration.
pub fn kmeans_traced(
    points: ArrayView2<'_, f64>,
    k: usize,
    seed: u64,
    max_iter: usize,
) -> Result<(Clustering, Vec<f64>)> {
    let n = points.nrows();
    check_k(n, k)?;
    let mut rng = rng::seeded(seed);
    let mut centroids = kmeans_plus_plus(points, k, &mut rng);
    let mut assignment = vec![usize::MAX; n];
    let mut trace = Vec::new();

    for _ in 0..max_iter.max(1) {
        let mut next: Vec<usize> = points
            .rows()
            .into_iter()
            .map(|p| nearest(p, centroids.view()).0)
            .collect();
        repair_empty(points, centroids.view(), &mut next, k);
        centroids = means(points, &next, k);
        let wcss = points
            .rows()
            .into_iter()
            .zip(&next)
            .map(|(p, &c)| sq_dist(p, centroids.row(c)))
            .sum();
        trace.push(wcss);
        let converged = next == assignment;
        assignment = next;
        if converged {
            break;
        }
    }

    let representatives = (0..k)
        .map(|c| {
            let mut best = (f64::INFINITY, usize::MAX);
            for (i, &a) in assignment.iter().enumerate() {
                if a == c {
                    let d = sq_dist(points.row(i), centroids.row(c));
                    if d < best.0 {
                        best = (d, i);
                    }
                }
            }
            best.1
        })
        .collect();
    Ok((
        Clustering {
            assignment,
            representatives,
        },
        trace,
    ))
}

fn kmeans_plus_plus(points: ArrayView2<'_, f64>, k: usize, rng: &mut rng::Rng) -> Array2<f64> {
    let n = points.nrows();
    let mut chosen = vec![rng.random_range(0..n)];
    let mut d2: Vec<f64> = points.rows().into_iter().map(|p| sq_dist(p, points.row(chosen[0]))).collect();
    while chosen.len() < k {
        let total: f64 = d2.iter().sum();
        let next = if total > 0.0 {
            let mut target = rng.random::<f64>() * total;
            let mut pick = n - 1;
            for (i, &w) in d2.iter().enumerate() {
                if w > 0.0 && target < w {
                    pick = i;
                    break;
                }
                target -= w;
            }
            while d2[pick] == 0.0 {
                pick -= 1;
            }
            pick
        } else {
            let free: Vec<usize> = (0..n).filter(|i| !chosen.contains(i)).collect();
            free[rng.random_range(0..free.len())]
        };
        chosen.push(next);
        for (i, p) in points.rows().into_iter().enumerate() {
            d2[i] = d2[i].min(sq_dist(p, points.row(next)));
        }
    }
    points.select(Axis(0), &chosen)
}

/// Nearest centroid; ties go to the lowest cluster id.
fn nearest(p: ArrayView1<'_, f64>, centroids: ArrayView2<'_, f64>) -> (usize, f64) {
    let mut best = (0, f64::INFINITY);
    for (c, row) in centroids.rows().into_iter().enumerate() {
        let d = sq_dist(p, row);
        if d < best.1 {
            best = (c, d);
        }
    }
    best
}

/// Fills each empty cluster with the point farthest from its centroid in the
/// currently largest cluster.
fn repair_empty(points: ArrayView2<'_, f64>, centroids: ArrayView2<'_, f64>, assignment: &mut [usize], k: usize) {
    loop {
        let mut sizes = vec![0usize; k];
        for &a in assignment.iter() {
            sizes[a] += 1;
        }
        let Some(empty) = sizes.iter().position(|&s| s == 0) else {
            return;
        };
        let largest = (0..k).fold(0, |best, c| if sizes[c] > sizes[best] { c } else { best });
        let mut far = (f64::NEG_INFINITY, usize::MAX);
        for (i, &a) in assignment.iter().enumerate() {
            if a == largest {
                let d = sq_dist(points.row(i), centroids.row(largest));
                if d > far.0 {
                    far = (d, i);
                }
            }
        }
        assignment[far.1] = empty;
    }
}

fn means(points: ArrayView2<'_, f64>, assignment: &[usize], k: usize) -> Array2<f64> {
    let mut sums = Array2::<f64>::zeros((k, points.ncols()));
    let mut counts = vec![0usize; k];
    for (p, &c) in points.rows().into_iter().zip(assignment) {
        let mut row = sums.row_mut(c);
        row += &p;
        counts[c] += 1;
    }
    for (mut row, &n) in sums.rows_mut().into_iter().zip(&counts) {
        if n > 0 {
            row /= n as f64;
        }
    }
    sums
}

/// Number of seeded restarts run in addition to the Park-Jun start.
pub const KMEDOIDS_RESTARTS: usize = 3;

/// k-medoids. Starts from the Park-Jun initialization and from
/// [`KMEDOIDS_RESTARTS`] seeded k-means++ style initializations; each start
/// runs alternating assignment / medoid-update steps followed by greedy
/// medoid swaps, and the lowest-cost result wins (earliest start on ties).
pub fn kmedoids(points: ArrayView2<'_, f64>, k: usize, seed: u64, max_iter: usize) -> Result<Clustering> {
    kmedoids_traced(points, k, seed, max_iter).map(|(c, _)| c)
}

/// As [`kmedoids`], also returning the total distance to assigned medoids
/// after every step of the winning start.
pub fn kmedoids_traced(
    points: ArrayView2<'_, f64>,
    k: usize,
    seed: u64,
    max_iter: usize,
) -> Result<(Clustering, Vec<f64>)> {
    let n = points.nrows();
    check_k(n, k)?;
    check_pairwise(n)?;
    let dist = |i: usize, j: usize| euclidean(points.row(i), points.row(j));

    let mut best = refine_medoids(n, park_jun_init(n, k, &dist), &dist, max_iter);
    let mut rng = rng::seeded(seed);
    for _ in 0..KMEDOIDS_RESTARTS {
        let start = plus_plus_init(n, k, &dist, &mut rng);
        let candidate = refine_medoids(n, start, &dist, max_iter);
        if candidate.1.last() < best.1.last() {
            best = candidate;
        }
    }
    Ok(best)
}

/// `v_j = sum_i d_ij / sum_l d_il`, lowest first, skipping points that
/// coincide with an already chosen medoid while distinct ones remain.
fn park_jun_init(n: usize, k: usize, dist: &dyn Fn(usize, usize) -> f64) -> Vec<usize> {
    let row_sums: Vec<f64> = (0..n).map(|i| (0..n).map(|l| dist(i, l)).sum()).collect();
    let mut score: Vec<(f64, usize)> = (0..n)
        .map(|j| {
            let v = (0..n)
                .filter(|&i| row_sums[i] > 0.0)
                .map(|i| dist(i, j) / row_sums[i])
                .sum();
            (v, j)
        })
        .collect();
    score.sort_by(|a, b| a.0.total_cmp(&b.0).then(a.1.cmp(&b.1)));
    let mut medoids: Vec<usize> = Vec::with_capacity(k);
    for &(_, j) in &score {
        if medoids.len() == k {
            break;
        }
        if medoids.iter().all(|&m| dist(m, j) > 0.0) {
            medoids.push(j);
        }
    }
    fill_medoids(medoids, n, k)
}

/// First medoid uniform, then each next one with probability proportional
/// to the distance to the nearest chosen medoid.
fn plus_plus_init(n: usize, k: usize, dist: &dyn Fn(usize, usize) -> f64, rng: &mut rng::Rng) -> Vec<usize> {
    let mut medoids = vec![rng.random_range(0..n)];
    let mut nearest: Vec<f64> = (0..n).map(|i| dist(i, medoids[0])).collect();
    while medoids.len() < k {
        let total: f64 = nearest.iter().sum();
        if !(total > 0.0) {
            break;
        }
        let mut target = rng.random_range(0.0..total);
        let mut pick = n - 1;
        for (i, &d) in nearest.iter().enumerate() {
            if target < d {
                pick = i;
                break;
            }
            target -= d;
        }
        medoids.push(pick);
        for (i, slot) in nearest.iter_mut().enumerate() {
            *slot = slot.min(dist(i, pick));
        }
    }
    fill_medoids(medoids, n, k)
}

/// Tops up with the lowest unused indices when too few distinct points exist.
fn fill_medoids(mut medoids: Vec<usize>, n: usize, k: usize) -> Vec<usize> {
    for j in 0..n {
        if medoids.len() == k {
            break;
        }
        if !medoids.contains(&j) {
            medoids.push(j);
        }
    }
    medoids
}

fn refine_medoids(
    n: usize,
    mut medoids: Vec<usize>,
    dist: &dyn Fn(usize, usize) -> f64,
    max_iter: usize,
) -> (Clustering, Vec<f64>) {
    let assign = |medoids: &[usize]| -> (Vec<usize>, f64) {
        let mut cost = 0.0;
        let assignment = (0..n)
            .map(|i| {
                if let Some(c) = medoids.iter().position(|&m| m == i) {
                    return c;
                }
                let mut best = (0, f64::INFINITY);
                for (c, &m) in medoids.iter().enumerate() {
                    let d = dist(i, m);
                    if d < best.1 {
                        best = (c, d);
                    }
                }
                cost += best.1;
                best.0
            })
            .collect();
        (assignment, cost)
    };

    let mut trace = Vec::new();
    let (mut assignment, cost) = assign(&medoids);
    trace.push(cost);
    for _ in 0..max_iter {
        let mut changed = false;
        for (c, medoid) in medoids.iter_mut().enumerate() {
            let members: Vec<usize> = (0..n).filter(|&i| assignment[i] == c).collect();
            let total = |j: usize| members.iter().map(|&i| dist(i, j)).sum::<f64>();
            let mut best = (total(*medoid), *medoid);
            for &j in &members {
                let t = total(j);
                if t < best.0 {
                    best = (t, j);
                }
            }
            if best.1 != *medoid {
                *medoid = best.1;
                changed = true;
            }
        }
        if !changed {
            break;
        }
        let (a, cost) = assign(&medoids);
        assignment = a;
        trace.push(cost);
    }

    // Swap refinement: apply the single (medoid, non-medoid) exchange that
    // lowers the cost most, until none does. Each pass is O(n^2) using the
    // nearest and second-nearest medoid distances.
    for _ in 0..max_iter {
        let Some((c, x)) = best_swap(n, &medoids, dist) else {
            break;
        };
        medoids[c] = x;
        let (a, cost) = assign(&medoids);
        assignment = a;
        trace.push(cost);
    }
    (
        Clustering {
            assignment,
            representatives: medoids,
        },
        trace,
    )
}

fn best_swap(n: usize, medoids: &[usize], dist: &dyn Fn(usize, usize) -> f64) -> Option<(usize, usize)> {
    let k = medoids.len();
    let mut nearest = vec![(0usize, 0.0f64); n];
    let mut second = vec![f64::INFINITY; n];
    let mut total = 0.0;
    for (o, slot) in nearest.iter_mut().enumerate() {
        let mut d1 = (0, f64::INFINITY);
        for (c, &m) in medoids.iter().enumerate() {
            let d = dist(o, m);
            if d < d1.1 {
                second[o] = d1.1;
                d1 = (c, d);
            } else if d < second[o] {
                second[o] = d;
            }
        }
        *slot = d1;
        total += d1.1;
    }
    let tol = 1e-12 * total.max(1.0);
    let mut best: Option<(f64, usize, usize)> = None;
    let mut delta = vec![0.0; k];
    for x in (0..n).filter(|x| !medoids.contains(x)) {
        delta.iter_mut().for_each(|d| *d = 0.0);
        let mut shared = 0.0;
        for o in 0..n {
            let (c, d1) = nearest[o];
            let dox = dist(o, x);
            let gain = (dox - d1).min(0.0);
            shared += gain;
            delta[c] += dox.min(second[o]) - d1 - gain;
        }
        for (c, d) in delta.iter().enumerate() {
            let change = shared + d;
            if change < -tol && best.is_none_or(|b| change < b.0) {
                best = Some((change, c, x));
            }
        }
    }
    best.map(|(_, c, x)| (c, x))
}

/// Agglomerative single-link clustering.
///
/// Clusters are merged closest-pair first, where the distance between two
/// clusters is their minimum inter-point distance and ties are broken by the
/// lexicographic order of the original index pair. The merge sequence is
/// computed through the minimum spanning tree under that same total order
/// (Prim, O(n) memory), then the first `n - k` tree edges are merged. Cluster
/// ids are ordered by each cluster's smallest member; the representative is
/// the cluster medoid.
pub fn single_link(points: ArrayView2<'_, f64>, k: usize) -> Result<Clustering> {
    let n = points.nrows();
    check_k(n, k)?;
    check_pairwise(n)?;
    let dist = |i: usize, j: usize| euclidean(points.row(i), points.row(j));
    type Key = (f64, usize, usize);
    let key = |d: f64, a: usize, b: usize| -> Key { (d, a.min(b), a.max(b)) };
    let less = |a: &Key, b: &Key| a.0.total_cmp(&b.0).then(a.1.cmp(&b.1)).then(a.2.cmp(&b.2)).is_lt();

    let mut in_tree = vec![false; n];
    let mut best: Vec<Key> = vec![(f64::INFINITY, usize::MAX, usize::MAX); n];
    let mut edges: Vec<Key> = Vec::with_capacity(n.saturating_sub(1));
    in_tree[0] = true;
    for u in 1..n {
        best[u] = key(dist(0, u), 0, u);
    }
    for _ in 1..n {
        let mut v = usize::MAX;
        for u in 0..n {
            if !in_tree[u] && (v == usize::MAX || less(&best[u], &best[v])) {
                v = u;
            }
        }
        in_tree[v] = true;
        edges.push(best[v]);
        for u in 0..n {
            if !in_tree[u] {
                let cand = key(dist(v, u), v, u);
                if less(&cand, &best[u]) {
                    best[u] = cand;
                }
            }
        }
    }
    edges.sort_by(|a, b| a.0.total_cmp(&b.0).then(a.1.cmp(&b.1)).then(a.2.cmp(&b.2)));

    let mut parent: Vec<usize> = (0..n).collect();
    fn find(parent: &mut [usize], mut x: usize) -> usize {
        while parent[x] != x {
            parent[x] = parent[parent[x]];
            x = parent[x];
        }
        x
    }
    for &(_, a, b) in edges.iter().take(n - k) {
        let (ra, rb) = (find(&mut parent, a), find(&mut parent, b));
        parent[ra.max(rb)] = ra.min(rb);
    }

    let mut ids = vec![usize::MAX; n];
    let mut next = 0;
    let mut assignment = vec![0; n];
    for i in 0..n {
        let r = find(&mut parent, i);
        if ids[r] == usize::MAX {
            ids[r] = next;
            next += 1;
        }
        assignment[i] = ids[r];
    }
    let representatives = (0..k)
        .map(|c| {
            let members: Vec<usize> = (0..n).filter(|&i| assignment[i] == c).collect();
            medoid_of(&members, &dist)
        })
        .collect();
    Ok(Clustering {
        assignment,
        representatives,
    })
}

/// Member minimizing the summed distance to all members; ties to the lowest index.
fn medoid_of(members: &[usize], dist: &impl Fn(usize, usize) -> f64) -> usize {
    let mut best = (f64::INFINITY, usize::MAX);
    for &j in members {
        let t: f64 = members.iter().map(|&i| dist(i, j)).sum();
        if t < best.0 {
            best = (t, j);
        }
    }
    best.1
}

//! Acceptance suite. Runs every criterion, prints one PASS/FAIL line per
//! criterion and exits non-zero if any failed.
//!
//! Run a subset with `cargo test -p fewloop-cli --test acceptance -- P1 P12`.

use std::collections::BTreeSet;
use std::io::{BufRead, BufReader, Read, Write};
use std::net::TcpStream;
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::path::Path;
use std::process::{Child, Command, ExitCode, Stdio};
use std::time::{Duration, Instant};

use anyhow::{ensure, Context as _};
use fewloop_core::cluster::{kmeans_traced, kmedoids, single_link};
use fewloop_core::corpus::{
    cap_pool, compute_stats, make_unbalanced, uniformness, LabelSet, Pool, TextInstance, UnbalanceSpec,
};
use fewloop_core::fsl::{kl_divergence, label_tuning_objective, ModelKind, Posterior};
use fewloop_core::perfpred::{
    evaluate_predictor, group_runs, leave_one_out_report, sample_t, snapshot_from_posteriors, LooConfig, RunCurve,
    StoppingRule,
};
use fewloop_core::rng;
use fewloop_core::select::{
    rank_by_score, select, select_traced, uncertainty_score, LabeledView, PoolState, SelectionConfig, StrategyId,
    UncertaintyKind,
};
use fewloop_core::simulate::{run_plan, run_trial, synth_dataset, ExperimentPlan, LearningCurve, SynthSpec};
use ndarray::Array2;
use rand::Rng;
use serde_json::{json, Value};

type Outcome = anyhow::Result<String>;

struct Criterion {
    id: &'static str,
    limit: Duration,
    run: fn() -> Outcome,
}

const CRITERIA: &[Criterion] = &[
    Criterion { id: "P1", limit: Duration::from_secs(1), run: p1_uncertainty_closed_forms },
    Criterion { id: "P2", limit: Duration::from_secs(1), run: p2_binary_coincidence },
    Criterion { id: "P3", limit: Duration::from_secs(5), run: p3_lt_gradient },
    Criterion { id: "P4", limit: Duration::from_secs(10), run: p4_clustering_oracles },
    Criterion { id: "P5", limit: Duration::from_secs(5), run: p5_cal_oracle },
    Criterion { id: "P6", limit: Duration::from_secs(300), run: p6_margin_beats_random },
    Criterion { id: "P7", limit: Duration::from_secs(600), run: p7_protocol },
    Criterion { id: "P8", limit: Duration::from_secs(600), run: p8_signals },
    Criterion { id: "P9", limit: Duration::from_secs(600), run: p9_predictor_beats_baselines },
    Criterion { id: "P10", limit: Duration::from_secs(600), run: p10_predictor_metrics },
    Criterion { id: "P11", limit: Duration::from_secs(600), run: p11_service_flow },
    Criterion { id: "P12", limit: Duration::from_secs(600), run: p12_unbalancer_and_stats },
];

fn main() -> ExitCode {
    let filters: Vec<String> = std::env::args().skip(1).filter(|a| !a.starts_with('-')).collect();
    let selected: Vec<&Criterion> = CRITERIA
        .iter()
        .filter(|c| filters.is_empty() || filters.iter().any(|f| f == c.id))
        .collect();
    let mut failed = Vec::new();
    for c in &selected {
        let start = Instant::now();
        let result = catch_unwind(AssertUnwindSafe(c.run))
            .unwrap_or_else(|p| Err(anyhow::anyhow!("panicked: {}", panic_message(&p))));
        let elapsed = start.elapsed();
        let result = result.and_then(|detail| {
            ensure!(elapsed <= c.limit, "took {:.1}s, limit {}s; {detail}", elapsed.as_secs_f64(), c.limit.as_secs());
            Ok(detail)
        });
        match result {
            Ok(detail) => println!("{:<4} PASS {:>7.2}s  {detail}", c.id, elapsed.as_secs_f64()),
            Err(e) => {
                println!("{:<4} FAIL {:>7.2}s  {e:#}", c.id, elapsed.as_secs_f64());
                failed.push(c.id);
            }
        }
    }
    println!("acceptance: {}/{} passed", selected.len() - failed.len(), selected.len());
    if failed.is_empty() {
        ExitCode::SUCCESS
    } else {
        println!("failed: {}", failed.join(", "));
        ExitCode::FAILURE
    }
}

fn panic_message(p: &Box<dyn std::any::Any + Send>) -> String {
    p.downcast_ref::<String>()
        .cloned()
        .or_else(|| p.downcast_ref::<&str>().map(|s| s.to_string()))
        .unwrap_or_else(|| "unknown panic".into())
}

// Fixture helpers.

fn random_matrix(rows: usize, cols: usize, seed: u64) -> Array2<f64> {
    let mut r = rng::seeded(seed);
    Array2::from_shape_fn((rows, cols), |_| r.random_range(-1.0..1.0))
}

fn unit_rows(mut m: Array2<f64>) -> Array2<f64> {
    for mut row in m.rows_mut() {
        let n = row.dot(&row).sqrt();
        row /= n;
    }
    m
}

fn dist(p: &Array2<f64>, i: usize, j: usize) -> f64 {
    let d = &p.row(i) - &p.row(j);
    d.dot(&d).sqrt()
}

fn random_posterior(r: &mut rng::Rng, n: usize) -> Posterior {
    let raw: Vec<f64> = (0..n).map(|_| r.random_range(0.01..1.0)).collect();
    let s: f64 = raw.iter().sum();
    Posterior::new(raw.iter().map(|v| v / s).collect()).unwrap()
}

fn ids(n: usize) -> Vec<String> {
    (0..n).map(|i| format!("x{i:04}")).collect()
}

fn mean(xs: impl IntoIterator<Item = f64>) -> f64 {
    let v: Vec<f64> = xs.into_iter().collect();
    v.iter().sum::<f64>() / v.len() as f64
}

// P1: closed forms of the uncertainty scores.
fn p1_uncertainty_closed_forms() -> Outcome {
    let uniform = Posterior::uniform(4);
    let h = uncertainty_score(&uniform, UncertaintyKind::Entropy);
    ensure!((h - 4f64.ln()).abs() <= 1e-12, "entropy(uniform4) = {h}");
    for n in [2, 3, 4, 7] {
        for idx in [0, n - 1] {
            let one_hot = Posterior::one_hot(n, idx);
            let m = uncertainty_score(&one_hot, UncertaintyKind::Margin);
            let lc = uncertainty_score(&one_hot, UncertaintyKind::LeastConfidence);
            ensure!(m == -1.0, "margin(one-hot {n}) = {m}");
            ensure!(lc == -1.0, "least-confidence(one-hot {n}) = {lc}");
        }
    }
    Ok(format!("entropy(uniform4) = {h:.15}, margin = least-confidence = -1 on one-hot"))
}

// P2: on binary posteriors the three uncertainty strategies coincide.
fn p2_binary_coincidence() -> Outcome {
    let mut r = rng::seeded(2);
    let mut seen = BTreeSet::new();
    let posteriors: Vec<Posterior> = std::iter::from_fn(|| {
        let p: f64 = r.random_range(0.0..1.0);
        Some(p)
    })
    .filter(|p| seen.insert(((p - 0.5).abs() * 1e12) as u64) && (p - 0.5).abs() > 1e-9)
    .take(500)
    .map(|p| Posterior::new(vec![p, 1.0 - p]).unwrap())
    .collect();
    let ids = ids(500);
    let state = PoolState {
        ids: &ids,
        posteriors: Some(&posteriors),
        embeddings: None,
        labeled: None,
    };
    for k in [1, 5, 16] {
        let config = SelectionConfig {
            batch_k: k,
            randomize_2k: false,
            ..Default::default()
        };
        let sets: Vec<BTreeSet<String>> = [StrategyId::Margin, StrategyId::Entropy, StrategyId::LeastConfidence]
            .iter()
            .map(|&s| select(&state, s, &config).map(|v| v.into_iter().collect()))
            .collect::<Result<_, _>>()?;
        ensure!(sets[0] == sets[1] && sets[1] == sets[2], "top-{k} sets differ");
        // Independent oracle: the k posteriors closest to 0.5.
        let mut by_gap: Vec<(f64, &String)> =
            posteriors.iter().zip(&ids).map(|(p, id)| ((p.probs()[0] - 0.5).abs(), id)).collect();
        by_gap.sort_by(|a, b| a.0.total_cmp(&b.0));
        let oracle: BTreeSet<String> = by_gap[..k].iter().map(|(_, id)| (*id).clone()).collect();
        ensure!(sets[0] == oracle, "top-{k} differs from the closest-to-0.5 oracle");
    }
    Ok("500 binary posteriors, identical top-k for k = 1, 5, 16".into())
}

// P3: label-tuning gradient against central finite differences.
fn p3_lt_gradient() -> Outcome {
    let w = unit_rows(random_matrix(4, 16, 31));
    let w0 = unit_rows(random_matrix(4, 16, 32));
    let e = unit_rows(random_matrix(20, 16, 33));
    let labels: Vec<usize> = (0..20).map(|i| i % 4).collect();
    let (_, grad) = label_tuning_objective(w.view(), w0.view(), e.view(), &labels, 10.0, 0.01);
    let f = |w: &Array2<f64>| label_tuning_objective(w.view(), w0.view(), e.view(), &labels, 10.0, 0.01).0;
    let h = 1e-5;
    let mut worst: f64 = 0.0;
    for r in 0..4 {
        for c in 0..16 {
            let mut plus = w.clone();
            plus[[r, c]] += h;
            let mut minus = w.clone();
            minus[[r, c]] -= h;
            let numeric = (f(&plus) - f(&minus)) / (2.0 * h);
            let analytic = grad[[r, c]];
            let rel = (numeric - analytic).abs() / numeric.abs().max(analytic.abs()).max(1e-8);
            worst = worst.max(rel);
        }
    }
    ensure!(worst < 1e-4, "max relative error {worst:e}");
    Ok(format!("max relative error {worst:.2e} over 64 coordinates"))
}

/// Kruskal on all pairs, stopping once `k` components remain.
fn mst_cut(p: &Array2<f64>, k: usize) -> Vec<Vec<usize>> {
    let n = p.nrows();
    let mut edges = Vec::new();
    for i in 0..n {
        for j in i + 1..n {
            edges.push((dist(p, i, j), i, j));
        }
    }
    edges.sort_by(|a, b| a.0.total_cmp(&b.0));
    let mut comp: Vec<usize> = (0..n).collect();
    let mut components = n;
    for (_, i, j) in edges {
        if components == k {
            break;
        }
        let (a, b) = (comp[i], comp[j]);
        if a != b {
            comp.iter_mut().filter(|c| **c == b).for_each(|c| *c = a);
            components -= 1;
        }
    }
    let mut groups: std::collections::BTreeMap<usize, Vec<usize>> = Default::default();
    for (i, c) in comp.iter().enumerate() {
        groups.entry(*c).or_default().push(i);
    }
    let mut out: Vec<Vec<usize>> = groups.into_values().collect();
    out.sort();
    out
}

// P4: clustering against exhaustive and MST oracles.
fn p4_clustering_oracles() -> Outcome {
    let mut worst_ratio: f64 = 0.0;
    for seed in 0..20 {
        let p = random_matrix(8, 2, 4000 + seed);
        let cost = |medoids: &[usize]| -> f64 {
            (0..8).map(|i| medoids.iter().map(|&m| dist(&p, i, m)).fold(f64::INFINITY, f64::min)).sum()
        };
        let mut best = f64::INFINITY;
        for a in 0..8 {
            for b in a + 1..8 {
                best = best.min(cost(&[a, b]));
            }
        }
        let c = kmedoids(p.view(), 2, seed, 100)?;
        let got: f64 = (0..8).map(|i| dist(&p, i, c.representatives[c.assignment[i]])).sum();
        worst_ratio = worst_ratio.max(got / best);
        ensure!(got <= best * 1.10 + 1e-12, "k-medoids fixture {seed}: cost {got} vs optimum {best}");
    }
    for seed in 0..20 {
        let p = random_matrix(12, 3, 4100 + seed);
        for k in [2, 3, 4] {
            let c = single_link(p.view(), k)?;
            let mut got: Vec<Vec<usize>> = (0..k).map(|g| c.members(g)).collect();
            got.sort();
            ensure!(got == mst_cut(&p, k), "single-link fixture {seed}, k = {k} differs from the MST cut");
        }
    }
    let mut steps = 0;
    for seed in 0..10 {
        let p = random_matrix(80, 4, 4200 + seed);
        let (_, trace) = kmeans_traced(p.view(), 5, seed, 100)?;
        ensure!(trace.windows(2).all(|w| w[1] <= w[0] + 1e-12), "k-means WCSS increased: {trace:?}");
        steps += trace.len();
    }
    Ok(format!(
        "k-medoids worst cost ratio {worst_ratio:.4}; single-link = MST cut on 20 fixtures; k-means WCSS monotone over {steps} steps"
    ))
}

// P5: CAL selection against a brute-force average-KL ranking.
fn p5_cal_oracle() -> Outcome {
    let (n, n_lab, m, k) = (30, 8, 3, 5);
    for seed in 0..20 {
        let mut r = rng::seeded(5000 + seed);
        let emb = random_matrix(n, 6, 5100 + seed);
        let lab_emb = random_matrix(n_lab, 6, 5200 + seed);
        let post: Vec<Posterior> = (0..n).map(|_| random_posterior(&mut r, 4)).collect();
        let lab_post: Vec<Posterior> = (0..n_lab).map(|_| random_posterior(&mut r, 4)).collect();
        let labels: Vec<usize> = (0..n_lab).map(|i| i % 4).collect();
        let ids = ids(n);
        let state = PoolState {
            ids: &ids,
            posteriors: Some(&post),
            embeddings: Some(emb.view()),
            labeled: Some(LabeledView {
                embeddings: lab_emb.view(),
                posteriors: Some(&lab_post),
                labels: &labels,
            }),
        };
        let config = SelectionConfig {
            batch_k: k,
            randomize_2k: false,
            cal_neighbors: m,
            seed,
            ..Default::default()
        };
        let got = select(&state, StrategyId::Cal, &config)?;
        let mut scored: Vec<(f64, &String)> = (0..n)
            .map(|i| {
                let mut d: Vec<(f64, usize)> = (0..n_lab)
                    .map(|j| {
                        let diff = &emb.row(i) - &lab_emb.row(j);
                        (diff.dot(&diff).sqrt(), j)
                    })
                    .collect();
                d.sort_by(|a, b| a.0.total_cmp(&b.0));
                let avg = mean(d[..m].iter().map(|&(_, j)| kl_divergence(&lab_post[j], &post[i], 1e-12)));
                (avg, &ids[i])
            })
            .collect();
        scored.sort_by(|a, b| b.0.total_cmp(&a.0).then(a.1.cmp(b.1)));
        let expect: Vec<String> = scored[..k].iter().map(|s| s.1.clone()).collect();
        ensure!(got == expect, "seed {seed}: CAL picked {got:?}, brute force {expect:?}");
    }
    Ok(format!("CAL = brute-force argmax average KL on {n}-instance pools, 20 seeds"))
}

fn final_mean(curves: &[LearningCurve]) -> f64 {
    mean(curves.iter().map(LearningCurve::final_f1))
}

// P6: margin beats random on a skewed benchmark and is no worse on a
// balanced one.
fn p6_margin_beats_random() -> Outcome {
    let base = SynthSpec {
        name: "p6".into(),
        clusters: 10,
        dims: 32,
        labels: 5,
        noise: 0.3,
        anchor_noise: 1.0,
        test_size: 2000,
        seed: 7,
        ..Default::default()
    };
    let unbalanced = synth_dataset(&SynthSpec {
        skew: Some(2.0),
        size: 10_400,
        ..base.clone()
    })?;
    let balanced = synth_dataset(&SynthSpec {
        size: 4000,
        ..base
    })?;
    let skew = compute_stats(&unbalanced.train, &unbalanced.label_set)?.uniformness;
    let run = |ds, strategy, pool_cap| -> anyhow::Result<f64> {
        let plan = ExperimentPlan {
            dataset: "p6".into(),
            model_kind: ModelKind::LabelTuning,
            strategy,
            batch_k: 16,
            budget: 256,
            trials: 10,
            pool_cap,
            signals: false,
            ..Default::default()
        };
        Ok(final_mean(&run_plan(&plan, ds, 1)?))
    };
    let (ur, um) = (run(&unbalanced, StrategyId::Random, 4000)?, run(&unbalanced, StrategyId::Margin, 4000)?);
    let (br, bm) = (run(&balanced, StrategyId::Random, 20_000)?, run(&balanced, StrategyId::Margin, 20_000)?);
    let detail = format!(
        "unbalanced (U = {skew:.3}) margin {um:.4} vs random {ur:.4}; balanced margin {bm:.4} vs random {br:.4}"
    );
    ensure!(um > ur, "margin does not beat random on the unbalanced benchmark: {detail}");
    ensure!(bm >= br - 0.02, "margin falls more than 0.02 behind random on the balanced benchmark: {detail}");
    Ok(detail)
}

// P7: protocol exactness.
fn p7_protocol() -> Outcome {
    let ds = synth_dataset(&SynthSpec {
        name: "p7".into(),
        clusters: 6,
        dims: 16,
        labels: 3,
        size: 1200,
        test_size: 300,
        seed: 70,
        ..Default::default()
    })?;
    let plan = ExperimentPlan {
        dataset: "p7".into(),
        strategy: StrategyId::Margin,
        seed_base: 700,
        sample_t: 300,
        ..Default::default()
    };
    ensure!(plan.batch_k == 16 && plan.budget == 256 && plan.trials == 10, "default protocol is not k=16/256/10");
    ensure!(plan.pool_cap == 20_000, "default pool cap is {}", plan.pool_cap);

    let a = run_plan(&plan, &ds, 1)?;
    let b = run_plan(&plan, &ds, 3)?;
    ensure!(a.len() == 10, "{} trials", a.len());
    ensure!(serde_json::to_vec(&a)? == serde_json::to_vec(&b)?, "trials differ between runs or job counts");
    let grid: Vec<usize> = (0..=16).map(|i| 16 * i).collect();
    for c in &a {
        let steps: Vec<usize> = c.points.iter().map(|p| p.n_train).collect();
        ensure!(steps == grid, "trial {} advanced as {steps:?}", c.trial);
        ensure!(c.annotated.iter().collect::<BTreeSet<_>>().len() == 256, "duplicate annotations");
    }
    ensure!(a[0].annotated != a[1].annotated, "different seeds gave the same trial");
    let single = run_trial(&plan, &ds, 4)?;
    ensure!(single == a[4], "trial 4 is not reproducible on its own");

    // Pool cap: 25,000 instances shrink to exactly 20,000 distinct ones.
    let big = Pool::new((0..25_000).map(|i| TextInstance::new(format!("i{i}"), "t", None)).collect())?;
    let capped = cap_pool(&big, plan.pool_cap, 1)?;
    ensure!(capped.len() == 20_000 && capped.ids().collect::<BTreeSet<_>>().len() == 20_000, "cap_pool size");
    ensure!(cap_pool(&ds.train, 20_000, 1)?.len() == ds.train.len(), "small pools must not be capped");
    // A trial only ever annotates from its capped pool.
    let tight = ExperimentPlan {
        pool_cap: 40,
        budget: 64,
        trials: 1,
        signals: false,
        ..plan.clone()
    };
    let t = run_trial(&tight, &ds, 0)?;
    let allowed: BTreeSet<String> =
        cap_pool(&ds.train, 40, rng::derive(tight.trial_seed(0), 1))?.ids().map(String::from).collect();
    ensure!(t.truncated && t.annotated.len() == 40, "capped trial annotated {}", t.annotated.len());
    ensure!(t.annotated.iter().all(|id| allowed.contains(id)), "trial left its capped pool");

    // 2k randomization, observed through the instrumented selection.
    let mut r = rng::seeded(77);
    let n = 200;
    let post: Vec<Posterior> = (0..n).map(|_| random_posterior(&mut r, 4)).collect();
    let ids = ids(n);
    let state = PoolState {
        ids: &ids,
        posteriors: Some(&post),
        embeddings: None,
        labeled: None,
    };
    let scores: Vec<f64> = post.iter().map(|p| uncertainty_score(p, UncertaintyKind::Margin)).collect();
    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by(|&x, &y| scores[y].total_cmp(&scores[x]).then(ids[x].cmp(&ids[y])));
    let top_2k: Vec<String> = order[..32].iter().map(|&i| ids[i].clone()).collect();
    ensure!(rank_by_score(&scores, &ids)[..32] == order[..32], "ranking differs from the oracle");
    let mut batches = BTreeSet::new();
    for seed in 0..20 {
        let config = SelectionConfig {
            seed,
            ..Default::default()
        };
        let s = select_traced(&state, StrategyId::Margin, &config)?;
        ensure!(s.shortlist.as_ref() == Some(&top_2k), "shortlist is not the top 2k");
        ensure!(s.ids.len() == 16 && s.ids.iter().collect::<BTreeSet<_>>().len() == 16, "batch is not 16 distinct ids");
        ensure!(s.ids.iter().all(|id| top_2k.contains(id)), "pick outside the top 2k");
        batches.insert(s.ids);
    }
    ensure!(batches.len() > 1, "2k randomization never varied the batch");
    Ok(format!(
        "10 trials on the 0..256 step-16 grid, bit-identical across runs and job counts; cap 20,000; {} distinct 2k draws in 20 seeds",
        batches.len()
    ))
}

// P8: signal ranges and degenerate cases.
fn p8_signals() -> Outcome {
    let mut r = rng::seeded(8);
    for trial in 0..50 {
        let n = 1 + trial * 3;
        let a: Vec<Posterior> = (0..n).map(|_| random_posterior(&mut r, 3)).collect();
        let b: Vec<Posterior> = (0..n).map(|_| random_posterior(&mut r, 3)).collect();
        let s = snapshot_from_posteriors(a.clone(), Some(&b), None, 1, 16)?;
        ensure!((0.0..=1.0).contains(&s.agreement), "agreement {}", s.agreement);
        ensure!(s.neg_kl <= 0.0, "neg_kl {}", s.neg_kl);
        let same = snapshot_from_posteriors(a.clone(), Some(&a), None, 1, 16)?;
        ensure!(same.agreement == 1.0, "identical models agree {}", same.agreement);
        ensure!(same.neg_kl == 0.0, "identical models neg_kl {}", same.neg_kl);
    }
    // Signals recorded along real learning curves.
    let ds = synth_dataset(&SynthSpec {
        name: "p8".into(),
        clusters: 6,
        dims: 16,
        labels: 3,
        size: 600,
        test_size: 200,
        seed: 80,
        ..Default::default()
    })?;
    let plan = ExperimentPlan {
        dataset: "p8".into(),
        strategy: StrategyId::Entropy,
        budget: 128,
        trials: 2,
        ..Default::default()
    };
    let mut points = 0;
    for c in run_plan(&plan, &ds, 1)? {
        for p in &c.points {
            let s = p.snapshot.as_ref().context("missing snapshot")?;
            ensure!((0.0..=1.0).contains(&s.agreement) && s.neg_kl <= 0.0, "out of range at n_train {}", p.n_train);
            points += 1;
        }
    }
    let pool = |n: usize| Pool::new((0..n).map(|i| TextInstance::new(format!("i{i}"), "t", None)).collect());
    for (n, want) in [(1, 1), (500, 500), (1000, 1000), (1001, 1000), (5000, 1000)] {
        let t = sample_t(&pool(n)?, 1000, 3)?;
        ensure!(t.len() == want, "|T| = {} for a pool of {n}", t.len());
        ensure!(t.iter().collect::<BTreeSet<_>>().len() == want, "T has duplicates");
    }
    Ok(format!("50 random pairs plus {points} curve points in range; identical models give 1 and 0; |T| = min(1000, pool)"))
}

// P9: the forest stopping rule against fixed-step baselines.
fn p9_predictor_beats_baselines() -> Outcome {
    let groups = [
        (0.20, 4, 2),
        (0.22, 4, 2),
        (0.25, 6, 3),
        (0.27, 6, 3),
        (0.30, 12, 6),
        (0.32, 12, 6),
        (0.33, 16, 8),
        (0.35, 16, 8),
    ];
    let mut records = Vec::new();
    for (g, &(noise, clusters, labels)) in groups.iter().enumerate() {
        let name = format!("g{g}");
        let ds = synth_dataset(&SynthSpec {
            name: name.clone(),
            clusters,
            dims: 32,
            labels,
            noise,
            anchor_noise: 0.8,
            size: 3000,
            test_size: 1000,
            seed: 100 + g as u64,
            ..Default::default()
        })?;
        for strategy in [StrategyId::Random, StrategyId::Margin, StrategyId::Entropy] {
            let plan = ExperimentPlan {
                dataset: name.clone(),
                strategy,
                budget: 512,
                trials: 2,
                seed_base: 1000 * g as u64,
                ..Default::default()
            };
            for c in run_plan(&plan, &ds, 1)? {
                records.extend(c.records()?);
            }
        }
    }
    let runs = group_runs(&records)?;
    let config = LooConfig {
        baselines: (1..=32).map(|i| 16 * i).collect(),
        ..Default::default()
    };
    let report = leave_one_out_report(&runs, &config)?;
    let forest = &report.all.stop;
    let eligible = report
        .baselines
        .iter()
        .filter(|(_, r)| r.stop.instances <= forest.instances + 16.0)
        .max_by(|a, b| a.1.stop.normalized_f1.total_cmp(&b.1.stop.normalized_f1))
        .context("no baseline within the instance allowance")?;
    let detail = format!(
        "{} groups, {} runs: forest {:.4} at {:.1} instances vs baseline {} {:.4} at {:.1}; MSE {:.5} vs variance {:.5}",
        report.groups.len(),
        runs.len(),
        forest.normalized_f1,
        forest.instances,
        eligible.0,
        eligible.1.stop.normalized_f1,
        eligible.1.stop.instances,
        report.all.mse,
        report.variance_mse
    );
    ensure!(report.groups.len() >= 6, "only {} groups: {detail}", report.groups.len());
    ensure!(forest.normalized_f1 > eligible.1.stop.normalized_f1, "forest does not beat the best baseline: {detail}");
    ensure!(report.all.mse < report.variance_mse, "forest MSE is not below the variance baseline: {detail}");
    Ok(detail)
}

// P10: predictor metrics against a brute-force reference.
fn p10_predictor_metrics() -> Outcome {
    let tau = 0.95;
    let runs = vec![
        RunCurve {
            run_id: "a".into(),
            n_train: vec![0, 16, 32, 48, 64, 80],
            test_f1: vec![0.20, 0.45, 0.61, 0.66, 0.64, 0.65],
            target: vec![0.20 / 0.66, 0.45 / 0.66, 0.61 / 0.66, 1.0, 0.64 / 0.66, 0.65 / 0.66],
            prediction: vec![0.30, 0.70, 0.96, 0.96, 0.93, 0.99],
        },
        RunCurve {
            run_id: "b".into(),
            n_train: vec![0, 16, 32, 48, 64, 80],
            test_f1: vec![0.10, 0.30, 0.50, 0.70, 0.78, 0.80],
            target: vec![0.125, 0.375, 0.625, 0.875, 0.975, 1.0],
            prediction: vec![0.20, 0.40, 0.60, 0.80, 0.90, 0.94],
        },
    ];
    let report = evaluate_predictor(&runs, StoppingRule::new(tau)?)?;

    let pairs: Vec<(f64, f64)> = runs
        .iter()
        .flat_map(|r| r.prediction.iter().copied().zip(r.target.iter().copied()))
        .collect();
    let mse_bp = mean(pairs.iter().map(|(p, t)| (p - t) * (p - t))) * 1e4;
    let (mut wins, mut total) = (0.0, 0.0);
    for &(pp, tp) in &pairs {
        for &(pn, tn) in &pairs {
            if tp > tau && tn <= tau {
                total += 1.0;
                wins += if pp > pn { 1.0 } else if pp == pn { 0.5 } else { 0.0 };
            }
        }
    }
    let auc = 100.0 * wins / total;
    let count = |f: &dyn Fn(f64, f64) -> bool| pairs.iter().filter(|(p, t)| f(*p, *t)).count() as f64;
    let tp = count(&|p, t| p > tau && t > tau);
    let fp = count(&|p, t| p > tau && t <= tau);
    let fn_ = count(&|p, t| p <= tau && t > tau);
    let (prec, rec) = (tp / (tp + fp), tp / (tp + fn_));
    let f1 = 2.0 * prec * rec / (prec + rec);
    // Run a stops at index 2 (first prediction above tau with n_train > 0);
    // run b never stops and is charged its final point.
    let stop_idx = |r: &RunCurve| {
        (0..r.n_train.len())
            .find(|&i| r.n_train[i] > 0 && r.prediction[i] > tau)
            .unwrap_or(r.n_train.len() - 1)
    };
    let stops: Vec<(usize, &RunCurve)> = runs.iter().map(|r| (stop_idx(r), r)).collect();
    let test_f1 = 100.0 * mean(stops.iter().map(|(i, r)| r.test_f1[*i]));
    let norm_f1 = 100.0 * mean(stops.iter().map(|(i, r)| r.target[*i]));
    let err = mean(stops.iter().map(|(i, r)| (1.0 - r.target[*i]) * 100.0));
    let instances = mean(stops.iter().map(|(i, r)| r.n_train[*i] as f64));
    let expect = [mse_bp, auc, 100.0 * f1, 100.0 * prec, 100.0 * rec, test_f1, norm_f1, err, instances];

    let got = report.row();
    for (name, (g, e)) in fewloop_core::perfpred::PredictorReport::COLUMNS.iter().zip(got.iter().zip(expect)) {
        ensure!((g - e).abs() <= 1e-9, "{name}: {g} vs brute force {e}");
    }
    ensure!(report.stop.no_stop == 1, "no_stop = {}", report.stop.no_stop);
    ensure!(report.stop.runs[0].index == Some(2) && report.stop.runs[1].index.is_none(), "stop indices");
    Ok(format!(
        "mse_bp {:.4}, auc {:.4}, f1 {:.4}, p {:.4}, r {:.4}, stop at {:.1} instances; all within 1e-9",
        got[0], got[1], got[2], got[3], got[4], got[8]
    ))
}

struct Server {
    child: Child,
    addr: String,
}

impl Server {
    fn start(data: &Path) -> anyhow::Result<Server> {
        let mut child = Command::new(env!("CARGO_BIN_EXE_fewloop"))
            .args(["serve", "--addr", "127.0.0.1:0", "--data-dir"])
            .arg(data)
            .stdout(Stdio::piped())
            .stderr(Stdio::null())
            .spawn()?;
        let mut line = String::new();
        BufReader::new(child.stdout.take().context("no stdout")?).read_line(&mut line)?;
        let addr = line.trim().strip_prefix("listening on ").context("no address line")?.to_string();
        Ok(Server { child, addr })
    }

    fn call(&self, method: &str, path: &str, body: &Value) -> anyhow::Result<(u16, Value)> {
        let body = if body.is_null() { String::new() } else { body.to_string() };
        let mut s = TcpStream::connect(&self.addr)?;
        write!(
            s,
            "{method} {path} HTTP/1.1\r\nHost: x\r\nContent-Type: application/json\r\nContent-Length: {}\r\nConnection: close\r\n\r\n{body}",
            body.len()
        )?;
        let mut resp = String::new();
        s.read_to_string(&mut resp)?;
        let status = resp.get(9..12).context("short response")?.parse()?;
        let payload = resp.split_once("\r\n\r\n").map(|x| x.1).unwrap_or_default();
        Ok((status, serde_json::from_str(payload).unwrap_or(Value::Null)))
    }

    /// Simulates a crash: no graceful shutdown.
    fn kill(mut self) {
        let _ = self.child.kill();
        let _ = self.child.wait();
    }
}

impl Drop for Server {
    fn drop(&mut self) {
        let _ = self.child.kill();
        let _ = self.child.wait();
    }
}

// P11: end-to-end service flow on a 5,000-instance pool.
fn p11_service_flow() -> Outcome {
    const TOPICS: [(&str, &str, [&str; 6]); 3] = [
        ("sports", "sports games and matches", ["goal", "team", "match", "coach", "league", "score"]),
        ("politics", "politics and elections", ["vote", "party", "senate", "policy", "minister", "law"]),
        ("tech", "technology and software", ["code", "chip", "cloud", "app", "server", "robot"]),
    ];
    let instances: Vec<Value> = (0..5000)
        .map(|i| {
            let (_, _, words) = TOPICS[i % 3];
            json!({ "id": format!("d{i:05}"), "text": format!("{} {} {} item {i}", words[i % 6], words[(i / 3) % 6], words[(i / 7) % 6]) })
        })
        .collect();
    let label_set: Vec<Value> = TOPICS.iter().map(|(n, d, _)| json!({ "name": n, "description": d })).collect();
    let gold = |id: &str| TOPICS[id[1..].parse::<usize>().unwrap() % 3].0;

    let dir = tempfile::tempdir()?;
    let data = dir.path().join("data");
    let server = Server::start(&data)?;
    let start = Instant::now();
    let (s, pool) = server.call("POST", "/pools", &json!({ "name": "p11", "instances": instances }))?;
    ensure!(s == 201, "register pool: {s} {pool}");
    let create = json!({ "name": "p11", "label_set": label_set, "pool_id": pool["pool_id"] });
    let (s, model) = server.call("POST", "/models", &create)?;
    ensure!(s == 201 && model["n_train"] == 0, "create: {s} {model}");
    let id = model["model_id"].as_str().context("model id")?.to_string();
    let (s, batch) = server.call("POST", &format!("/models/{id}/request-instances"), &json!({ "k": 16 }))?;
    let items = batch["instances"].as_array().context("instances")?.clone();
    ensure!(s == 200 && items.len() == 16, "request: {s}");
    ensure!(items.iter().all(|i| i.get("prediction").is_none()), "predictions leaked into the batch");
    let annotations: Vec<Value> = items
        .iter()
        .map(|i| {
            let id = i["id"].as_str().unwrap();
            json!({ "id": id, "label": gold(id) })
        })
        .collect();
    let (s, upd) = server.call("POST", &format!("/models/{id}/update"), &json!({ "annotations": annotations }))?;
    ensure!(s == 200 && upd["n_train"] == 16, "update: {s} {upd}");
    let texts = json!({ "texts": ["the team scored a late goal", "the senate passed the policy", "a new chip for the cloud"] });
    let (s, run) = server.call("POST", &format!("/models/{id}/run"), &texts)?;
    ensure!(s == 200 && run["predictions"].as_array().map(Vec::len) == Some(3), "run: {s} {run}");
    let flow = start.elapsed();
    ensure!(flow < Duration::from_secs(5), "flow took {:.2}s", flow.as_secs_f64());

    // Atomic rejection of a batch that relabels an annotated id.
    let (_, before) = server.call("GET", &format!("/models/{id}"), &Value::Null)?;
    let (_, offered) = server.call("POST", &format!("/models/{id}/request-instances"), &json!({ "k": 1 }))?;
    let fresh = offered["instances"][0]["id"].as_str().context("fresh id")?.to_string();
    let labeled = annotations[0]["id"].as_str().unwrap().to_string();
    let conflicting = json!({ "annotations": [
        { "id": fresh, "label": gold(&fresh) },
        { "id": labeled, "label": "tech" },
    ] });
    let (s, err) = server.call("POST", &format!("/models/{id}/update"), &conflicting)?;
    ensure!(s == 409 && err["details"]["ids"] == json!([labeled]), "conflict: {s} {err}");
    let (_, after) = server.call("GET", &format!("/models/{id}"), &Value::Null)?;
    ensure!(before == after, "rejected batch changed the model");
    let (_, offered_again) = server.call("POST", &format!("/models/{id}/request-instances"), &json!({ "k": 1 }))?;
    ensure!(offered_again["instances"][0]["id"] == fresh.as_str(), "rejected batch consumed `{fresh}`");

    // Kill without shutdown, restart on the same data directory.
    let (_, history) = server.call("GET", &format!("/models/{id}/evaluate"), &Value::Null)?;
    server.kill();
    let server = Server::start(&data)?;
    let (_, restored) = server.call("GET", &format!("/models/{id}"), &Value::Null)?;
    ensure!(restored == after, "restart changed the model summary: {restored} vs {after}");
    let (_, history_again) = server.call("GET", &format!("/models/{id}/evaluate"), &Value::Null)?;
    ensure!(history == history_again, "restart changed the history");
    let (s, rerun) = server.call("POST", &format!("/models/{id}/run"), &texts)?;
    ensure!(s == 200 && rerun == run, "restart changed predictions");
    Ok(format!(
        "flow {:.2}s on 5,000 instances; digest {} survives kill and restart; conflicting batch rejected with 409",
        flow.as_secs_f64(),
        &after["digest"].as_str().unwrap_or_default()[..12]
    ))
}

// P12: unbalancer counts and uniformness.
fn p12_unbalancer_and_stats() -> Outcome {
    let labels = LabelSet::from_pairs([("a", "a"), ("b", "b"), ("c", "c")])?;
    let mut instances = Vec::new();
    for (name, n) in [("a", 1000), ("b", 900), ("c", 800)] {
        instances.extend((0..n).map(|i| TextInstance::new(format!("{name}{i}"), "t", Some(name.to_string()))));
    }
    let pool = Pool::new(instances)?;
    let mut seen = Vec::new();
    for seed in 0..3 {
        let out = make_unbalanced(&pool, &labels, UnbalanceSpec { decay_base: 2.0, seed })?;
        let counts = compute_stats(&out, &labels)?.counts;
        let got: Vec<usize> = counts.values().copied().collect();
        ensure!(got == vec![1000, 500, 250], "seed {seed}: counts {got:?}");
        ensure!(out.ids().all(|id| pool.contains(id)), "unbalancer invented instances");
        seen.push(out.ids().map(String::from).collect::<BTreeSet<_>>());
    }
    ensure!(seen[0] != seen[1], "the kept subset does not depend on the seed");
    let u0 = uniformness(&[1.0 / 3.0; 3]);
    let u_hate = uniformness(&[0.889, 0.111]);
    ensure!(u0.abs() <= 1e-12, "U(uniform) = {u0}");
    ensure!((u_hate - 0.778).abs() <= 1e-9, "U(0.889/0.111) = {u_hate}");
    let balanced = compute_stats(&pool, &labels)?;
    ensure!(balanced.uniformness > 0.0, "the 1000/900/800 fixture is not uniform");
    Ok(format!("(1000, 900, 800) -> (1000, 500, 250); U(uniform) = {u0}; U(0.889/0.111) = {u_hate:.3}"))
}

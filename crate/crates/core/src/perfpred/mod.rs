//! Convergence signals, the stopping predictor and its evaluation.
//!
//! Learning curves are stored as a curve corpus: one JSON record per
//! (run, iteration). A regression forest learns to map an iteration's
//! features to the run's normalized test F1 and is evaluated by leaving
//! out one dataset group at a time.

mod evaluate;
mod forest;
mod signals;

use std::collections::BTreeMap;
use std::io::{BufRead, Write};

use serde::{Deserialize, Serialize};

pub use evaluate::{
    auc, baseline_predictions, evaluate_predictor, PredictorReport, RunCurve, StopPoint, StopStats, StoppingRule,
};
pub use forest::{forest_fit, forest_predict, ForestConfig, ForestModel, RegressionTree};
pub use signals::{
    curve_features, cv_f1, feature_len, feature_names, normalize_curve, sample_t, snapshot, snapshot_from_posteriors,
    FeatureVector, IterationSnapshot, CV_FOLDS, SAMPLE_T_SIZE, SIGNALS,
};

use crate::select::StrategyId;
use crate::{Error, Result};

/// Default number of previous iterations included in the features.
pub const DEFAULT_HISTORY: usize = 5;

/// One line of a curve corpus.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CurveRecord {
    pub dataset: String,
    pub run_id: String,
    pub strategy: StrategyId,
    pub n_labels: usize,
    pub iter: usize,
    pub n_train: usize,
    pub cv_f1: Option<f64>,
    pub neg_entropy: f64,
    pub max_prob: f64,
    pub margin: f64,
    pub agreement: f64,
    pub neg_kl: f64,
    pub test_f1: f64,
}

impl CurveRecord {
    pub fn new(
        dataset: &str,
        run_id: &str,
        strategy: StrategyId,
        n_labels: usize,
        snapshot: &IterationSnapshot,
        test_f1: f64,
    ) -> Self {
        Self {
            dataset: dataset.into(),
            run_id: run_id.into(),
            strategy,
            n_labels,
            iter: snapshot.iter,
            n_train: snapshot.n_train,
            cv_f1: snapshot.cv_f1,
            neg_entropy: snapshot.neg_entropy,
            max_prob: snapshot.max_prob,
            margin: snapshot.margin,
            agreement: snapshot.agreement,
            neg_kl: snapshot.neg_kl,
            test_f1,
        }
    }

    fn snapshot(&self) -> IterationSnapshot {
        IterationSnapshot {
            iter: self.iter,
            n_train: self.n_train,
            cv_f1: self.cv_f1,
            neg_entropy: self.neg_entropy,
            max_prob: self.max_prob,
            margin: self.margin,
            agreement: self.agreement,
            neg_kl: self.neg_kl,
            posteriors_t: Vec::new(),
        }
    }
}

pub fn write_curve_records<W: Write>(mut out: W, records: &[CurveRecord]) -> Result<()> {
    for r in records {
        serde_json::to_writer(&mut out, r)?;
        out.write_all(b"\n")?;
    }
    Ok(())
}

/// Reads a record-lines curve corpus; blank lines are skipped.
pub fn read_curve_records<R: BufRead>(input: R) -> Result<Vec<CurveRecord>> {
    let mut out = Vec::new();
    for (i, line) in input.lines().enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        out.push(serde_json::from_str(&line).map_err(|e| Error::Parse {
            line: i + 1,
            message: e.to_string(),
        })?);
    }
    Ok(out)
}

/// A complete learning curve from the corpus, ordered by iteration.
#[derive(Clone, Debug, PartialEq)]
pub struct CorpusRun {
    pub dataset: String,
    pub run_id: String,
    pub strategy: StrategyId,
    pub n_labels: usize,
    pub snapshots: Vec<IterationSnapshot>,
    pub test_f1: Vec<f64>,
}

impl CorpusRun {
    pub fn features(&self, history: usize) -> Vec<FeatureVector> {
        curve_features(&self.snapshots, self.strategy, self.n_labels, history)
    }

    pub fn targets(&self) -> Result<Vec<f64>> {
        normalize_curve(&self.test_f1)
    }

    pub fn n_train(&self) -> Vec<usize> {
        self.snapshots.iter().map(|s| s.n_train).collect()
    }
}

/// Groups records into runs keyed by `(dataset, run_id)`. Iterations must
/// be exactly `0..len` once sorted, and per-run metadata must agree.
pub fn group_runs(records: &[CurveRecord]) -> Result<Vec<CorpusRun>> {
    let mut by_run: BTreeMap<(&str, &str), Vec<&CurveRecord>> = BTreeMap::new();
    for r in records {
        by_run.entry((&r.dataset, &r.run_id)).or_default().push(r);
    }
    by_run
        .into_iter()
        .map(|((dataset, run_id), mut rs)| {
            rs.sort_by_key(|r| r.iter);
            let first = rs[0];
            for (i, r) in rs.iter().enumerate() {
                if r.iter != i {
                    return Err(Error::invalid(format!(
                        "run `{dataset}/{run_id}` has a gap or duplicate at iteration {i}"
                    )));
                }
                if r.strategy != first.strategy || r.n_labels != first.n_labels {
                    return Err(Error::invalid(format!("run `{dataset}/{run_id}` mixes strategies or label counts")));
                }
            }
            Ok(CorpusRun {
                dataset: dataset.into(),
                run_id: run_id.into(),
                strategy: first.strategy,
                n_labels: first.n_labels,
                snapshots: rs.iter().map(|r| r.snapshot()).collect(),
                test_f1: rs.iter().map(|r| r.test_f1).collect(),
            })
        })
        .collect()
}

/// Feature/target rows for forest training.
pub fn training_rows(runs: &[&CorpusRun], history: usize) -> Result<Vec<(FeatureVector, f64)>> {
    let mut rows = Vec::new();
    for run in runs {
        rows.extend(run.features(history).into_iter().zip(run.targets()?));
    }
    Ok(rows)
}

fn datasets(runs: &[CorpusRun]) -> Result<Vec<String>> {
    let mut names: Vec<String> = runs.iter().map(|r| r.dataset.clone()).collect();
    names.dedup();
    names.sort();
    names.dedup();
    if names.len() < 2 {
        return Err(Error::invalid("leave-one-out needs at least two dataset groups"));
    }
    Ok(names)
}

/// One forest per dataset group, each trained on every other group.
pub fn leave_one_out_train(
    runs: &[CorpusRun],
    config: &ForestConfig,
    history: usize,
    seed: u64,
) -> Result<BTreeMap<String, ForestModel>> {
    datasets(runs)?
        .into_iter()
        .map(|held_out| {
            let train: Vec<&CorpusRun> = runs.iter().filter(|r| r.dataset != held_out).collect();
            let model = forest_fit(&training_rows(&train, history)?, config, seed)?;
            Ok((held_out, model))
        })
        .collect()
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GroupReport {
    pub dataset: String,
    pub forest: PredictorReport,
    /// MSE of predicting the mean training target everywhere.
    pub variance_mse: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LooReport {
    pub groups: Vec<GroupReport>,
    /// Pooled over every held-out prediction.
    pub all: PredictorReport,
    pub variance_mse: f64,
    pub baselines: Vec<(usize, PredictorReport)>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LooConfig {
    pub forest: ForestConfig,
    pub history: usize,
    pub seed: u64,
    pub rule: StoppingRule,
    pub baselines: Vec<usize>,
}

impl Default for LooConfig {
    fn default() -> Self {
        Self {
            forest: ForestConfig::default(),
            history: DEFAULT_HISTORY,
            seed: 0,
            rule: StoppingRule::default(),
            baselines: vec![272, 288, 304],
        }
    }
}

/// Leave-one-group-out training plus held-out evaluation of the forest,
/// the mean-target baseline and the fixed-step baselines.
pub fn leave_one_out_report(runs: &[CorpusRun], config: &LooConfig) -> Result<LooReport> {
    let models = leave_one_out_train(runs, &config.forest, config.history, config.seed)?;
    let mut groups = Vec::new();
    let mut all_curves = Vec::new();
    let (mut sq_sum, mut sq_n) = (0.0, 0usize);
    for (dataset, model) in &models {
        let train: Vec<&CorpusRun> = runs.iter().filter(|r| &r.dataset != dataset).collect();
        let train_rows = training_rows(&train, config.history)?;
        let mean_target = train_rows.iter().map(|r| r.1).sum::<f64>() / train_rows.len() as f64;
        let mut curves = Vec::new();
        for run in runs.iter().filter(|r| &r.dataset == dataset) {
            let prediction = run
                .features(config.history)
                .iter()
                .map(|x| model.predict(x))
                .collect::<Result<Vec<_>>>()?;
            curves.push(RunCurve {
                run_id: format!("{}/{}", run.dataset, run.run_id),
                n_train: run.n_train(),
                test_f1: run.test_f1.clone(),
                target: run.targets()?,
                prediction,
            });
        }
        let sq: f64 = curves
            .iter()
            .flat_map(|c| c.target.iter())
            .map(|t| (t - mean_target).powi(2))
            .sum();
        let n: usize = curves.iter().map(|c| c.target.len()).sum();
        sq_sum += sq;
        sq_n += n;
        groups.push(GroupReport {
            dataset: dataset.clone(),
            forest: evaluate_predictor(&curves, config.rule)?,
            variance_mse: sq / n as f64,
        });
        all_curves.extend(curves);
    }
    let baselines = config
        .baselines
        .iter()
        .map(|&i| {
            let curves: Vec<RunCurve> = all_curves.iter().map(|c| c.with_baseline(i)).collect();
            Ok((i, evaluate_predictor(&curves, config.rule)?))
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(LooReport {
        groups,
        all: evaluate_predictor(&all_curves, config.rule)?,
        variance_mse: sq_sum / sq_n as f64,
        baselines,
    })
}

/// Writes the report as a delimited table: one row per held-out group, a
/// pooled `all` row, then one `baseline <i>` row per fixed step.
pub fn write_report_table<W: Write>(out: W, report: &LooReport) -> Result<()> {
    let mut w = csv::Writer::from_writer(out);
    let csv_err = |e: csv::Error| Error::Io(std::io::Error::other(e));
    let mut header = vec!["model"];
    header.extend(PredictorReport::COLUMNS);
    header.push("no_stop");
    w.write_record(&header).map_err(csv_err)?;
    let mut emit = |name: String, r: &PredictorReport| {
        let mut rec = vec![name];
        rec.extend(r.row().iter().map(|v| format!("{v:.4}")));
        rec.push(r.stop.no_stop.to_string());
        w.write_record(&rec).map_err(csv_err)
    };
    for g in &report.groups {
        emit(g.dataset.clone(), &g.forest)?;
    }
    emit("all".into(), &report.all)?;
    for (i, r) in &report.baselines {
        emit(format!("baseline {i}"), r)?;
    }
    w.flush()?;
    Ok(())
}

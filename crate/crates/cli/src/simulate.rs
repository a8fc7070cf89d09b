//! `fewloop simulate`: runs a plan and writes curves, aggregates and plot data.
//!
//! Output layout:
//! - `curves/<experiment>-t<trial>.json`, one learning curve per trial;
//! - `curves.jsonl`, the curve corpus for `train-predictor` (experiments
//!   recorded with signals only);
//! - `aggregate.csv`, one row per experiment with the final-point statistics;
//! - `plot.csv`, mean and standard deviation of test F1 per experiment and
//!   `n_train`.

use std::fs;
use std::io::BufWriter;
use std::path::Path;

use anyhow::Context as _;
use fewloop_core::perfpred::write_curve_records;
use fewloop_core::simulate::{aggregate, run_plan, AggregatePoint, Dataset, LearningCurve};
use fewloop_core::simulate::ExperimentPlan;

use crate::plan::{Overrides, Plan};

pub struct SimulateArgs<'a> {
    pub plan: &'a Path,
    pub out: &'a Path,
    pub jobs: usize,
    pub overrides: Overrides,
}

struct Finished {
    plan: ExperimentPlan,
    curves: Vec<LearningCurve>,
    aggregate: Vec<AggregatePoint>,
}

pub fn run(args: SimulateArgs<'_>) -> anyhow::Result<()> {
    let plan = Plan::load(args.plan, &args.overrides)?;
    let curve_dir = args.out.join("curves");
    fs::create_dir_all(&curve_dir).with_context(|| format!("cannot create {}", curve_dir.display()))?;

    let mut loaded: Option<(String, Dataset)> = None;
    let mut finished = Vec::new();
    for exp in &plan.experiments {
        if loaded.as_ref().is_none_or(|(name, _)| name != &exp.dataset) {
            loaded = Some((exp.dataset.clone(), plan.dataset(&exp.dataset)?));
        }
        let (_, dataset) = loaded.as_ref().expect("loaded above");
        tracing::info!(experiment = %exp.label(), trials = exp.trials, "running");
        let curves = run_plan(exp, dataset, args.jobs).with_context(|| format!("experiment `{}`", exp.label()))?;
        for c in &curves {
            let path = curve_dir.join(format!("{}-t{:02}.json", exp.label(), c.trial));
            fs::write(&path, serde_json::to_vec_pretty(c)?).with_context(|| format!("writing {}", path.display()))?;
        }
        let aggregate = aggregate(&curves).with_context(|| format!("aggregating `{}`", exp.label()))?;
        finished.push(Finished {
            plan: exp.clone(),
            curves,
            aggregate,
        });
    }

    let corpus = BufWriter::new(fs::File::create(args.out.join("curves.jsonl"))?);
    let mut records = Vec::new();
    for f in finished.iter().filter(|f| f.plan.signals) {
        for c in &f.curves {
            records.extend(c.records()?);
        }
    }
    write_curve_records(corpus, &records)?;
    write_aggregate(&args.out.join("aggregate.csv"), &finished)?;
    write_plot(&args.out.join("plot.csv"), &finished)?;
    for f in &finished {
        let last = f.aggregate.last().expect("curves have at least one point");
        println!(
            "{}\tn_train={}\tf1={:.4}±{:.4}",
            f.plan.label(),
            last.n_train,
            last.mean,
            last.std
        );
    }
    Ok(())
}

fn write_aggregate(path: &Path, finished: &[Finished]) -> anyhow::Result<()> {
    let mut w = csv::Writer::from_path(path)?;
    w.write_record([
        "experiment", "dataset", "model", "strategy", "trials", "n_train", "mean_f1", "std_f1", "truncated",
    ])?;
    for f in finished {
        let last = f.aggregate.last().expect("curves have at least one point");
        let truncated = f.curves.iter().filter(|c| c.truncated).count();
        w.write_record([
            f.plan.label(),
            f.plan.dataset.clone(),
            f.plan.model_kind.to_string(),
            f.plan.strategy.to_string(),
            f.curves.len().to_string(),
            last.n_train.to_string(),
            format!("{:.6}", last.mean),
            format!("{:.6}", last.std),
            truncated.to_string(),
        ])?;
    }
    w.flush()?;
    Ok(())
}

fn write_plot(path: &Path, finished: &[Finished]) -> anyhow::Result<()> {
    let mut w = csv::Writer::from_path(path)?;
    w.write_record(["experiment", "n_train", "mean_f1", "std_f1", "curves"])?;
    for f in finished {
        for p in &f.aggregate {
            w.write_record([
                f.plan.label(),
                p.n_train.to_string(),
                format!("{:.6}", p.mean),
                format!("{:.6}", p.std),
                p.curves.to_string(),
            ])?;
        }
    }
    w.flush()?;
    Ok(())
}

//! `fewloop train-predictor`: leave-one-dataset-out evaluation of the
//! stopping predictor, then a final forest trained on the whole corpus.

use std::fs::File;
use std::io::BufReader;
use std::path::{Path, PathBuf};

use anyhow::Context as _;
use fewloop_core::perfpred::{
    forest_fit, group_runs, leave_one_out_report, read_curve_records, training_rows, write_report_table,
    CorpusRun, ForestConfig, LooConfig, StoppingRule,
};

use crate::error::{as_usage, usage};

pub struct PredictorArgs {
    pub corpus: Vec<PathBuf>,
    pub model_out: PathBuf,
    pub report: Option<PathBuf>,
    pub report_json: Option<PathBuf>,
    pub tau: f64,
    pub history: usize,
    pub seed: u64,
    pub baselines: Vec<usize>,
    pub forest: ForestConfig,
}

fn load_runs(paths: &[PathBuf]) -> anyhow::Result<Vec<CorpusRun>> {
    let mut records = Vec::new();
    for p in paths {
        let file = File::open(p).map_err(|e| usage(format!("cannot open {}: {e}", p.display())))?;
        let mut part = read_curve_records(BufReader::new(file))
            .map_err(|e| usage(format!("{}: {e}", p.display())))?;
        records.append(&mut part);
    }
    if records.is_empty() {
        return Err(usage("the curve corpus is empty"));
    }
    let runs = group_runs(&records).map_err(as_usage)?;
    let groups: std::collections::BTreeSet<&str> = runs.iter().map(|r| r.dataset.as_str()).collect();
    if groups.len() < 2 {
        return Err(usage("leave-one-out needs curves from at least two datasets"));
    }
    Ok(runs)
}

pub fn run(args: PredictorArgs) -> anyhow::Result<()> {
    let rule = StoppingRule::new(args.tau).map_err(as_usage)?;
    if args.forest.n_trees == 0 {
        return Err(usage("--trees must be at least 1"));
    }
    let runs = load_runs(&args.corpus)?;
    let config = LooConfig {
        forest: args.forest.clone(),
        history: args.history,
        seed: args.seed,
        rule,
        baselines: args.baselines.clone(),
    };
    let report = leave_one_out_report(&runs, &config).context("leave-one-out evaluation")?;

    let mut table = Vec::new();
    write_report_table(&mut table, &report)?;
    print!("{}", String::from_utf8(table.clone())?);
    println!("variance_mse\t{:.4}", report.variance_mse * 1e4);
    if let Some(p) = &args.report {
        std::fs::write(p, &table).with_context(|| format!("writing {}", p.display()))?;
    }
    if let Some(p) = &args.report_json {
        std::fs::write(p, serde_json::to_vec_pretty(&report)?).with_context(|| format!("writing {}", p.display()))?;
    }

    let all: Vec<&CorpusRun> = runs.iter().collect();
    let model = forest_fit(&training_rows(&all, args.history)?, &args.forest, args.seed)?;
    write_json(&args.model_out, &model)?;
    tracing::info!(path = %args.model_out.display(), runs = runs.len(), "stopping predictor written");
    Ok(())
}

fn write_json(path: &Path, value: &impl serde::Serialize) -> anyhow::Result<()> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        std::fs::create_dir_all(dir)?;
    }
    std::fs::write(path, serde_json::to_vec(value)?).with_context(|| format!("writing {}", path.display()))
}

//! `fewloop ingest`: reads a pool, reports label statistics and optionally
//! writes a capped or unbalanced copy.

use std::io::{BufWriter, Write};
use std::path::PathBuf;

use anyhow::Context as _;
use fewloop_core::corpus::{
    cap_pool, compute_stats, ingest_label_set, label_set_from_pool, make_unbalanced, DatasetStats, Format, Pool,
    UnbalanceSpec,
};
use serde::Serialize;

use crate::error::{as_usage, usage};
use crate::plan::read_pool;

pub struct IngestArgs {
    pub input: PathBuf,
    pub format: Option<Format>,
    pub labels: Option<PathBuf>,
    pub unbalance: Option<f64>,
    pub pool_cap: Option<usize>,
    pub seed: u64,
    pub out: Option<PathBuf>,
}

#[derive(Serialize)]
struct Summary {
    instances: usize,
    labeled: usize,
    /// Present when every instance carries a gold label.
    #[serde(skip_serializing_if = "Option::is_none")]
    stats: Option<DatasetStats>,
}

#[derive(Serialize)]
struct Row<'a> {
    id: &'a str,
    text: &'a str,
    #[serde(skip_serializing_if = "Option::is_none")]
    label: Option<&'a str>,
}

pub fn run(args: IngestArgs) -> anyhow::Result<()> {
    let mut pool = read_pool(&args.input, args.format).map_err(as_usage)?;
    let labeled = pool.instances().iter().filter(|i| i.gold_label.is_some()).count();
    let labels = match &args.labels {
        Some(p) => {
            let file = std::fs::File::open(p).map_err(|e| usage(format!("cannot open {}: {e}", p.display())))?;
            Some(ingest_label_set(file).map_err(as_usage)?)
        }
        None if labeled == pool.len() => Some(label_set_from_pool(&pool).map_err(as_usage)?),
        None => None,
    };
    if let Some(base) = args.unbalance {
        let labels = labels
            .as_ref()
            .ok_or_else(|| usage("--unbalance needs gold labels on every instance"))?;
        pool = make_unbalanced(&pool, labels, UnbalanceSpec { decay_base: base, seed: args.seed }).map_err(as_usage)?;
    }
    if let Some(cap) = args.pool_cap {
        pool = cap_pool(&pool, cap, args.seed).map_err(as_usage)?;
    }
    let stats = match &labels {
        Some(l) if pool.is_fully_labeled() => Some(compute_stats(&pool, l).map_err(as_usage)?),
        _ => None,
    };
    let summary = Summary {
        instances: pool.len(),
        labeled: pool.instances().iter().filter(|i| i.gold_label.is_some()).count(),
        stats,
    };
    println!("{}", serde_json::to_string_pretty(&summary)?);
    if let Some(out) = &args.out {
        write_lines(&pool, out).with_context(|| format!("writing {}", out.display()))?;
    }
    Ok(())
}

/// Writes the pool as record lines (`{"id", "text", "label"}` per line).
fn write_lines(pool: &Pool, path: &PathBuf) -> anyhow::Result<()> {
    let mut w = BufWriter::new(std::fs::File::create(path)?);
    for i in pool.instances() {
        let row = Row {
            id: &i.id,
            text: &i.text,
            label: i.gold_label.as_deref(),
        };
        serde_json::to_writer(&mut w, &row)?;
        w.write_all(b"\n")?;
    }
    w.flush()?;
    Ok(())
}

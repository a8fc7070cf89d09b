//! Dataset ingestion, pool sampling and label-distribution statistics.

use std::collections::{BTreeMap, HashMap, HashSet};
use std::io::{BufRead, BufReader, Read};

use rand::seq::index;
use serde::{Deserialize, Serialize};

use crate::rng;
use crate::{Error, Result};

/// A single text in a pool. `gold_label` is only set for simulation corpora.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct TextInstance {
    pub id: String,
    pub text: String,
    #[serde(default, rename = "label", skip_serializing_if = "Option::is_none")]
    pub gold_label: Option<String>,
}

impl TextInstance {
    pub fn new(id: impl Into<String>, text: impl Into<String>, gold_label: Option<String>) -> Self {
        Self {
            id: id.into(),
            text: text.into(),
            gold_label,
        }
    }
}

/// An immutable collection of instances with unique ids.
#[derive(Clone, Debug, Default)]
pub struct Pool {
    instances: Vec<TextInstance>,
    index: HashMap<String, usize>,
}

impl Pool {
    pub fn new(instances: Vec<TextInstance>) -> Result<Self> {
        let mut index = HashMap::with_capacity(instances.len());
        for (i, inst) in instances.iter().enumerate() {
            if inst.text.is_empty() {
                return Err(Error::invalid(format!("instance `{}` has empty text", inst.id)));
            }
            if index.insert(inst.id.clone(), i).is_some() {
                return Err(Error::Conflict(format!("duplicate id `{}`", inst.id)));
            }
        }
        Ok(Self { instances, index })
    }

    pub fn len(&self) -> usize {
        self.instances.len()
    }

    pub fn is_empty(&self) -> bool {
        self.instances.is_empty()
    }

    pub fn instances(&self) -> &[TextInstance] {
        &self.instances
    }

    pub fn get(&self, id: &str) -> Option<&TextInstance> {
        self.index.get(id).map(|&i| &self.instances[i])
    }

    pub fn position(&self, id: &str) -> Option<usize> {
        self.index.get(id).copied()
    }

    pub fn contains(&self, id: &str) -> bool {
        self.index.contains_key(id)
    }

    pub fn ids(&self) -> impl Iterator<Item = &str> {
        self.instances.iter().map(|i| i.id.as_str())
    }

    pub fn is_fully_labeled(&self) -> bool {
        self.instances.iter().all(|i| i.gold_label.is_some())
    }

    /// Keeps the instances at the given positions, in ascending position order.
    fn subset(&self, mut positions: Vec<usize>) -> Pool {
        positions.sort_unstable();
        positions.dedup();
        let instances: Vec<_> = positions.iter().map(|&p| self.instances[p].clone()).collect();
        let index = instances
            .iter()
            .enumerate()
            .map(|(i, inst)| (inst.id.clone(), i))
            .collect();
        Pool { instances, index }
    }
}

/// One label with the description text used for zero-shot initialization.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Label {
    pub name: String,
    pub description: String,
}

/// Ordered labels; order defines the posterior layout everywhere.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(try_from = "Vec<Label>", into = "Vec<Label>")]
pub struct LabelSet {
    entries: Vec<Label>,
}

impl LabelSet {
    pub fn new(entries: Vec<Label>) -> Result<Self> {
        if entries.len() < 2 {
            return Err(Error::invalid("a label set needs at least two labels"));
        }
        let mut seen = HashSet::new();
        for e in &entries {
            if e.name.is_empty() {
                return Err(Error::invalid("label with empty name"));
            }
            if e.description.trim().is_empty() {
                return Err(Error::invalid(format!("label `{}` has no description", e.name)));
            }
            if !seen.insert(e.name.as_str()) {
                return Err(Error::Conflict(format!("duplicate label `{}`", e.name)));
            }
        }
        Ok(Self { entries })
    }

    /// Convenience constructor from `(name, description)` pairs.
    pub fn from_pairs<N: Into<String>, D: Into<String>>(
        pairs: impl IntoIterator<Item = (N, D)>,
    ) -> Result<Self> {
        Self::new(
            pairs
                .into_iter()
                .map(|(n, d)| Label {
                    name: n.into(),
                    description: d.into(),
                })
                .collect(),
        )
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn entries(&self) -> &[Label] {
        &self.entries
    }

    pub fn name(&self, idx: usize) -> &str {
        &self.entries[idx].name
    }

    pub fn names(&self) -> impl Iterator<Item = &str> {
        self.entries.iter().map(|e| e.name.as_str())
    }

    pub fn descriptions(&self) -> impl Iterator<Item = &str> {
        self.entries.iter().map(|e| e.description.as_str())
    }

    pub fn index_of(&self, name: &str) -> Option<usize> {
        self.entries.iter().position(|e| e.name == name)
    }

    pub fn require(&self, name: &str) -> Result<usize> {
        self.index_of(name).ok_or_else(|| Error::UnknownLabel(name.to_string()))
    }
}

impl TryFrom<Vec<Label>> for LabelSet {
    type Error = Error;
    fn try_from(v: Vec<Label>) -> Result<Self> {
        LabelSet::new(v)
    }
}

impl From<LabelSet> for Vec<Label> {
    fn from(l: LabelSet) -> Self {
        l.entries
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Format {
    /// Comma-separated with an `id,text[,label]` header.
    DelimitedTable,
    /// One JSON object per line with keys `id`, `text` and optional `label`.
    RecordLines,
}

impl std::str::FromStr for Format {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "csv" | "delimited-table" | "table" => Ok(Format::DelimitedTable),
            "jsonl" | "record-lines" | "lines" => Ok(Format::RecordLines),
            other => Err(Error::invalid(format!("unknown format `{other}`"))),
        }
    }
}

impl Format {
    /// Guesses the format from a file extension.
    pub fn from_extension(path: &std::path::Path) -> Option<Self> {
        match path.extension()?.to_str()? {
            "csv" => Some(Format::DelimitedTable),
            "jsonl" | "ndjson" => Some(Format::RecordLines),
            _ => None,
        }
    }
}

#[derive(Deserialize)]
struct Row {
    id: String,
    text: String,
    #[serde(default)]
    label: Option<String>,
}

/// Reads a pool. Line numbers in errors are 1-based and count the header.
pub fn ingest<R: Read>(source: R, format: Format) -> Result<Pool> {
    let rows = match format {
        Format::DelimitedTable => read_table(source)?,
        Format::RecordLines => read_lines(source)?,
    };
    let mut seen = HashSet::with_capacity(rows.len());
    let mut instances = Vec::with_capacity(rows.len());
    for (line, row) in rows {
        if row.text.is_empty() {
            return Err(Error::Parse {
                line,
                message: format!("empty text for id `{}`", row.id),
            });
        }
        if !seen.insert(row.id.clone()) {
            return Err(Error::Conflict(format!("duplicate id `{}` at line {line}", row.id)));
        }
        let label = row.label.filter(|l| !l.is_empty());
        instances.push(TextInstance::new(row.id, row.text, label));
    }
    Pool::new(instances)
}

fn read_table<R: Read>(source: R) -> Result<Vec<(usize, Row)>> {
    let mut reader = csv::ReaderBuilder::new().has_headers(true).from_reader(source);
    let headers = reader
        .headers()
        .map_err(|e| Error::Parse {
            line: 1,
            message: e.to_string(),
        })?
        .clone();
    for required in ["id", "text"] {
        if !headers.iter().any(|h| h == required) {
            return Err(Error::Parse {
                line: 1,
                message: format!("missing `{required}` column"),
            });
        }
    }
    let mut out = Vec::new();
    for (i, rec) in reader.records().enumerate() {
        let line = i + 2;
        let rec = rec.map_err(|e| Error::Parse {
            line: e.position().map(|p| p.line() as usize).unwrap_or(line),
            message: e.to_string(),
        })?;
        let row: Row = rec.deserialize(Some(&headers)).map_err(|e| Error::Parse {
            line,
            message: e.to_string(),
        })?;
        out.push((line, row));
    }
    Ok(out)
}

fn read_lines<R: Read>(source: R) -> Result<Vec<(usize, Row)>> {
    let mut out = Vec::new();
    for (i, line) in BufReader::new(source).lines().enumerate() {
        let line_no = i + 1;
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let row: Row = serde_json::from_str(&line).map_err(|e| Error::Parse {
            line: line_no,
            message: e.to_string(),
        })?;
        out.push((line_no, row));
    }
    Ok(out)
}

/// Reads a label-set file: one `{"name": ..., "description": ...}` per line.
pub fn ingest_label_set<R: Read>(source: R) -> Result<LabelSet> {
    let mut entries = Vec::new();
    for (i, line) in BufReader::new(source).lines().enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let label: Label = serde_json::from_str(&line).map_err(|e| Error::Parse {
            line: i + 1,
            message: e.to_string(),
        })?;
        entries.push(label);
    }
    LabelSet::new(entries)
}

/// Label-set derived from the gold labels of a pool, each label described by
/// its own name. Sorted by name.
pub fn label_set_from_pool(pool: &Pool) -> Result<LabelSet> {
    let names: std::collections::BTreeSet<&str> =
        pool.instances().iter().filter_map(|i| i.gold_label.as_deref()).collect();
    LabelSet::from_pairs(names.into_iter().map(|n| (n, n)))
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DatasetStats {
    /// Relative frequency per label, in label-set order.
    pub frequencies: BTreeMap<String, f64>,
    pub counts: BTreeMap<String, usize>,
    /// Sum over labels of `|f(l) - 1/|L||`.
    pub uniformness: f64,
}

/// Uniformness of a frequency vector: `sum |f_l - 1/|L||`.
pub fn uniformness(frequencies: &[f64]) -> f64 {
    let uniform = 1.0 / frequencies.len() as f64;
    frequencies.iter().map(|f| (f - uniform).abs()).sum()
}

fn label_counts(pool: &Pool, labels: &LabelSet) -> Result<Vec<usize>> {
    let mut counts = vec![0usize; labels.len()];
    for inst in pool.instances() {
        let name = inst.gold_label.as_deref().ok_or_else(|| {
            Error::invalid(format!("instance `{}` has no gold label", inst.id))
        })?;
        counts[labels.require(name)?] += 1;
    }
    Ok(counts)
}

pub fn compute_stats(pool: &Pool, labels: &LabelSet) -> Result<DatasetStats> {
    if pool.is_empty() {
        return Err(Error::invalid("statistics need a non-empty labeled pool"));
    }
    let counts = label_counts(pool, labels)?;
    let total = pool.len() as f64;
    let freqs: Vec<f64> = counts.iter().map(|&c| c as f64 / total).collect();
    Ok(DatasetStats {
        frequencies: labels.names().map(String::from).zip(freqs.iter().copied()).collect(),
        counts: labels.names().map(String::from).zip(counts).collect(),
        uniformness: uniformness(&freqs),
    })
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct UnbalanceSpec {
    pub decay_base: f64,
    pub seed: u64,
}

impl Default for UnbalanceSpec {
    fn default() -> Self {
        Self {
            decay_base: 2.0,
            seed: 0,
        }
    }
}

/// Per-label target counts `n(top) * base^-rank`, rounded, at least 1 and
/// capped at the original count. Ranks are by descending count with ties in
/// label order. Labels with no instances stay at zero.
pub fn unbalanced_targets(counts: &[usize], decay_base: f64) -> Vec<usize> {
    let mut order: Vec<usize> = (0..counts.len()).collect();
    order.sort_by(|&a, &b| counts[b].cmp(&counts[a]).then(a.cmp(&b)));
    let top = counts.get(order[0]).copied().unwrap_or(0) as f64;
    let mut targets = vec![0usize; counts.len()];
    for (rank, &label) in order.iter().enumerate() {
        let raw = (top * decay_base.powi(-(rank as i32))).round() as usize;
        targets[label] = raw.max(1).min(counts[label]);
    }
    targets
}

/// Down-samples labels without replacement to an exponentially decaying
/// label distribution.
pub fn make_unbalanced(pool: &Pool, labels: &LabelSet, spec: UnbalanceSpec) -> Result<Pool> {
    if !(spec.decay_base > 1.0) {
        return Err(Error::invalid("decay_base must be > 1"));
    }
    let counts = label_counts(pool, labels)?;
    let targets = unbalanced_targets(&counts, spec.decay_base);

    let mut by_label: Vec<Vec<usize>> = vec![Vec::new(); labels.len()];
    for (pos, inst) in pool.instances().iter().enumerate() {
        let l = labels.require(inst.gold_label.as_deref().unwrap_or_default())?;
        by_label[l].push(pos);
    }
    let mut rng = rng::seeded(spec.seed);
    let mut keep = Vec::new();
    for (members, &target) in by_label.iter().zip(&targets) {
        if target >= members.len() {
            keep.extend_from_slice(members);
        } else {
            keep.extend(index::sample(&mut rng, members.len(), target).into_iter().map(|i| members[i]));
        }
    }
    Ok(pool.subset(keep))
}

/// Uniform sample without replacement down to `max_size`; identity when the
/// pool is already small enough. Kept instances retain their input order.
pub fn cap_pool(pool: &Pool, max_size: usize, seed: u64) -> Result<Pool> {
    if max_size == 0 {
        return Err(Error::invalid("max_size must be positive"));
    }
    if pool.len() <= max_size {
        return Ok(pool.clone());
    }
    let mut rng = rng::seeded(seed);
    Ok(pool.subset(index::sample(&mut rng, pool.len(), max_size).into_vec()))
}

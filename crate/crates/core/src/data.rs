//! Dataset model: the model pool, prompt records, ingestion and splitting.
//!
//! Two line-delimited JSON files make up a dataset on disk. The pool file
//! holds one `{model_id, cost_per_query}` object per line, in pool order.
//! The record file holds one `{prompt_id, source, prompt_embedding,
//! desc_embedding, quality}` object per line.

use std::collections::HashSet;
use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;

use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::seeded_rng;

/// One candidate model in the pool.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelCard {
    pub model_id: String,
    pub index: usize,
    pub cost_per_query: f64,
}

/// A training or evaluation prompt with its per-model ground-truth quality.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PromptRecord {
    pub prompt_id: String,
    pub source: String,
    pub prompt_embedding: Vec<f64>,
    pub desc_embedding: Vec<f64>,
    pub quality: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Dataset {
    pool: Vec<ModelCard>,
    records: Vec<PromptRecord>,
    prompt_dim: usize,
    desc_dim: usize,
}

#[derive(Deserialize)]
struct PoolLine {
    model_id: String,
    cost_per_query: f64,
}

#[derive(Serialize)]
struct PoolLineOut<'a> {
    model_id: &'a str,
    cost_per_query: f64,
}

/// Checks the pool invariants: unique ids, contiguous indices, nonnegative costs.
pub fn validate_pool(pool: &[ModelCard]) -> Result<()> {
    if pool.is_empty() {
        return Err(Error::invalid("model pool is empty"));
    }
    let mut seen = HashSet::new();
    for (i, card) in pool.iter().enumerate() {
        if card.index != i {
            return Err(Error::invalid(format!(
                "model {} has index {} at position {i}",
                card.model_id, card.index
            )));
        }
        if !(card.cost_per_query.is_finite() && card.cost_per_query >= 0.0) {
            return Err(Error::invalid(format!(
                "model {} has invalid cost {}",
                card.model_id, card.cost_per_query
            )));
        }
        if !seen.insert(card.model_id.as_str()) {
            return Err(Error::invalid(format!("duplicate model_id {}", card.model_id)));
        }
    }
    Ok(())
}

/// Describes the first problem with `record`, as (field, message).
fn record_problem(
    record: &PromptRecord,
    pool_size: usize,
    dims: Option<(usize, usize)>,
) -> Option<(String, String)> {
    for (name, v) in [
        ("prompt_embedding", &record.prompt_embedding),
        ("desc_embedding", &record.desc_embedding),
    ] {
        if v.is_empty() {
            return Some((name.into(), "embedding is empty".into()));
        }
        if let Some(i) = v.iter().position(|x| !x.is_finite()) {
            return Some((format!("{name}[{i}]"), "non-finite value".into()));
        }
    }
    if let Some((dp, dt)) = dims {
        if record.prompt_embedding.len() != dp {
            return Some((
                "prompt_embedding".into(),
                format!(
                    "dimension mismatch: expected {dp}, got {}",
                    record.prompt_embedding.len()
                ),
            ));
        }
        if record.desc_embedding.len() != dt {
            return Some((
                "desc_embedding".into(),
                format!(
                    "dimension mismatch: expected {dt}, got {}",
                    record.desc_embedding.len()
                ),
            ));
        }
    }
    if record.quality.len() != pool_size {
        return Some((
            "quality".into(),
            format!(
                "has {} entries but the pool has {pool_size} models",
                record.quality.len()
            ),
        ));
    }
    if let Some((i, q)) = record
        .quality
        .iter()
        .enumerate()
        .find(|(_, q)| !(q.is_finite() && (0.0..=1.0).contains(*q)))
    {
        return Some((format!("quality[{i}]"), format!("{q} is outside [0, 1]")));
    }
    None
}

impl Dataset {
    /// Builds a validated dataset. Embedding dims are taken from the first record.
    pub fn new(pool: Vec<ModelCard>, records: Vec<PromptRecord>) -> Result<Self> {
        validate_pool(&pool)?;
        let dims = records
            .first()
            .map(|r| (r.prompt_embedding.len(), r.desc_embedding.len()));
        let mut ids = HashSet::new();
        for (i, r) in records.iter().enumerate() {
            if let Some((field, message)) = record_problem(r, pool.len(), dims) {
                return Err(Error::invalid(format!(
                    "record {i} ({}): {field}: {message}",
                    r.prompt_id
                )));
            }
            if !ids.insert(r.prompt_id.as_str()) {
                return Err(Error::invalid(format!("duplicate prompt_id {}", r.prompt_id)));
            }
        }
        let (prompt_dim, desc_dim) = dims.unwrap_or((0, 0));
        Ok(Dataset {
            pool,
            records,
            prompt_dim,
            desc_dim,
        })
    }

    pub fn pool(&self) -> &[ModelCard] {
        &self.pool
    }

    pub fn records(&self) -> &[PromptRecord] {
        &self.records
    }

    pub fn len(&self) -> usize {
        self.records.len()
    }

    pub fn is_empty(&self) -> bool {
        self.records.is_empty()
    }

    pub fn pool_size(&self) -> usize {
        self.pool.len()
    }

    pub fn prompt_dim(&self) -> usize {
        self.prompt_dim
    }

    pub fn desc_dim(&self) -> usize {
        self.desc_dim
    }

    /// Keeps only the records at `indices`, in the given order.
    pub fn subset(&self, indices: &[usize]) -> Dataset {
        Dataset {
            pool: self.pool.clone(),
            records: indices.iter().map(|&i| self.records[i].clone()).collect(),
            prompt_dim: self.prompt_dim,
            desc_dim: self.desc_dim,
        }
    }

    pub fn write(&self, records_path: &Path, pool_path: &Path) -> Result<()> {
        write_pool(&self.pool, pool_path)?;
        write_records(&self.records, records_path)
    }
}

fn read_lines(path: &Path) -> Result<Vec<(usize, String)>> {
    let file = File::open(path).map_err(|e| Error::io(path, e))?;
    let mut out = Vec::new();
    for (i, line) in BufReader::new(file).lines().enumerate() {
        let line = line.map_err(|e| Error::io(path, e))?;
        if line.trim().is_empty() {
            continue;
        }
        out.push((i + 1, line));
    }
    Ok(out)
}

pub fn load_pool(path: &Path) -> Result<Vec<ModelCard>> {
    let mut pool = Vec::new();
    let mut seen = HashSet::new();
    for (line_no, line) in read_lines(path)? {
        let raw: PoolLine = serde_json::from_str(&line).map_err(|e| Error::Record {
            path: path.into(),
            line: line_no,
            field: "json".into(),
            message: e.to_string(),
        })?;
        let bad = |field: &str, message: String| Error::Record {
            path: path.into(),
            line: line_no,
            field: field.into(),
            message,
        };
        if !(raw.cost_per_query.is_finite() && raw.cost_per_query >= 0.0) {
            return Err(bad(
                "cost_per_query",
                format!("{} must be finite and nonnegative", raw.cost_per_query),
            ));
        }
        if !seen.insert(raw.model_id.clone()) {
            return Err(bad("model_id", format!("duplicate model_id {}", raw.model_id)));
        }
        pool.push(ModelCard {
            model_id: raw.model_id,
            index: pool.len(),
            cost_per_query: raw.cost_per_query,
        });
    }
    validate_pool(&pool).map_err(|e| Error::Record {
        path: path.into(),
        line: 0,
        field: "pool".into(),
        message: e.to_string(),
    })?;
    Ok(pool)
}

/// Loads records against `pool`. The first malformed line aborts the load.
pub fn load_records(path: &Path, pool: &[ModelCard]) -> Result<Vec<PromptRecord>> {
    let mut records: Vec<PromptRecord> = Vec::new();
    let mut ids = HashSet::new();
    let mut dims = None;
    for (line_no, line) in read_lines(path)? {
        let record: PromptRecord = serde_json::from_str(&line).map_err(|e| Error::Record {
            path: path.into(),
            line: line_no,
            field: "json".into(),
            message: e.to_string(),
        })?;
        if let Some((field, message)) = record_problem(&record, pool.len(), dims) {
            return Err(Error::Record {
                path: path.into(),
                line: line_no,
                field,
                message,
            });
        }
        if !ids.insert(record.prompt_id.clone()) {
            return Err(Error::Record {
                path: path.into(),
                line: line_no,
                field: "prompt_id".into(),
                message: format!("duplicate prompt_id {}", record.prompt_id),
            });
        }
        dims.get_or_insert((record.prompt_embedding.len(), record.desc_embedding.len()));
        records.push(record);
    }
    Ok(records)
}

/// Loads a record file plus its pool file into a validated [`Dataset`].
pub fn load_dataset(records_path: &Path, pool_path: &Path) -> Result<Dataset> {
    let pool = load_pool(pool_path)?;
    let records = load_records(records_path, &pool)?;
    Dataset::new(pool, records)
}

pub fn write_pool(pool: &[ModelCard], path: &Path) -> Result<()> {
    write_lines(
        path,
        pool.iter().map(|c| {
            serde_json::to_string(&PoolLineOut {
                model_id: &c.model_id,
                cost_per_query: c.cost_per_query,
            })
        }),
    )
}

pub fn write_records(records: &[PromptRecord], path: &Path) -> Result<()> {
    write_lines(path, records.iter().map(serde_json::to_string))
}

pub(crate) fn write_lines<I>(path: &Path, lines: I) -> Result<()>
where
    I: IntoIterator<Item = serde_json::Result<String>>,
{
    let file = File::create(path).map_err(|e| Error::io(path, e))?;
    let mut w = BufWriter::new(file);
    for line in lines {
        let line = line.map_err(|e| Error::invalid(e.to_string()))?;
        writeln!(w, "{line}").map_err(|e| Error::io(path, e))?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}

/// Split ratios for (train, dev, test).
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SplitRatios {
    pub train: f64,
    pub dev: f64,
    pub test: f64,
}

impl SplitRatios {
    pub const fn new(train: f64, dev: f64, test: f64) -> Self {
        SplitRatios { train, dev, test }
    }
}

impl Default for SplitRatios {
    fn default() -> Self {
        SplitRatios::new(0.8, 0.1, 0.1)
    }
}

/// Shuffles record indices with `seed` and cuts them into train/dev/test.
///
/// Dev and test sizes are `floor(n * ratio)`; every leftover row goes to
/// train. Records keep their file order inside each split.
pub fn split_dataset(
    ds: &Dataset,
    ratios: SplitRatios,
    seed: u64,
) -> Result<(Dataset, Dataset, Dataset)> {
    let SplitRatios { train, dev, test } = ratios;
    if [train, dev, test].iter().any(|r| !(r.is_finite() && *r >= 0.0)) {
        return Err(Error::invalid("split ratios must be finite and nonnegative"));
    }
    if ((train + dev + test) - 1.0).abs() > 1e-9 {
        return Err(Error::invalid(format!(
            "split ratios sum to {}, expected 1",
            train + dev + test
        )));
    }
    if ds.is_empty() {
        return Err(Error::invalid("cannot split an empty dataset"));
    }
    let n = ds.len();
    // The 1e-9 guard keeps products like 10 * 0.1 from flooring one short.
    let floor = |r: f64| ((n as f64) * r + 1e-9).floor() as usize;
    let n_dev = floor(dev);
    let n_test = floor(test);
    let n_train = n - n_dev - n_test;

    let mut order: Vec<usize> = (0..n).collect();
    order.shuffle(&mut seeded_rng(seed, "split"));
    let cut = |range: std::ops::Range<usize>| {
        let mut idx = order[range].to_vec();
        idx.sort_unstable();
        ds.subset(&idx)
    };
    let train_ds = cut(0..n_train);
    let dev_ds = cut(n_train..n_train + n_dev);
    let test_ds = cut(n_train + n_dev..n);
    Ok((train_ds, dev_ds, test_ds))
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::io::Write;

    pub(crate) fn pool(n: usize) -> Vec<ModelCard> {
        (0..n)
            .map(|i| ModelCard {
                model_id: format!("m{i}"),
                index: i,
                cost_per_query: 1.0 + i as f64,
            })
            .collect()
    }

    fn record(id: usize, q: Vec<f64>) -> PromptRecord {
        PromptRecord {
            prompt_id: format!("p{id}"),
            source: "test".into(),
            prompt_embedding: vec![id as f64, 1.0],
            desc_embedding: vec![1.0, id as f64, 0.5],
            quality: q,
        }
    }

    fn dataset(n: usize) -> Dataset {
        let recs = (0..n).map(|i| record(i, vec![0.5, 0.25])).collect();
        Dataset::new(pool(2), recs).unwrap()
    }

    fn write_file(dir: &Path, name: &str, body: &str) -> std::path::PathBuf {
        let p = dir.join(name);
        let mut f = File::create(&p).unwrap();
        f.write_all(body.as_bytes()).unwrap();
        p
    }

    const POOL: &str = "{\"model_id\":\"a\",\"cost_per_query\":1.0}\n{\"model_id\":\"b\",\"cost_per_query\":2.5}\n";

    #[test]
    fn loads_valid_three_record_file() {
        let dir = tempfile::tempdir().unwrap();
        let pool = write_file(dir.path(), "pool.jsonl", POOL);
        let body = (0..3)
            .map(|i| {
                format!(
                    "{{\"prompt_id\":\"p{i}\",\"source\":\"s\",\"prompt_embedding\":[1.0,{i}.0],\"desc_embedding\":[0.5],\"quality\":[0.1,0.9]}}\n"
                )
            })
            .collect::<String>();
        let data = write_file(dir.path(), "data.jsonl", &body);
        let ds = load_dataset(&data, &pool).unwrap();
        assert_eq!(ds.len(), 3);
        assert_eq!(ds.pool_size(), 2);
        assert_eq!(ds.prompt_dim(), 2);
        assert_eq!(ds.desc_dim(), 1);
        assert_eq!(ds.pool()[1].cost_per_query, 2.5);
    }

    #[test]
    fn quality_out_of_range_names_line_and_field() {
        let dir = tempfile::tempdir().unwrap();
        let pool = write_file(dir.path(), "pool.jsonl", POOL);
        let body = "{\"prompt_id\":\"p0\",\"source\":\"s\",\"prompt_embedding\":[1.0],\"desc_embedding\":[0.5],\"quality\":[0.1,0.9]}\n\
                    {\"prompt_id\":\"p1\",\"source\":\"s\",\"prompt_embedding\":[1.0],\"desc_embedding\":[0.5],\"quality\":[1.2,0.9]}\n";
        let data = write_file(dir.path(), "data.jsonl", body);
        match load_dataset(&data, &pool) {
            Err(Error::Record { line, field, .. }) => {
                assert_eq!(line, 2);
                assert_eq!(field, "quality[0]");
            }
            other => panic!("unexpected {other:?}"),
        }
    }

    #[test]
    fn embedding_dimension_mismatch_is_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let pool = write_file(dir.path(), "pool.jsonl", POOL);
        let body = "{\"prompt_id\":\"p0\",\"source\":\"s\",\"prompt_embedding\":[1.0,2.0],\"desc_embedding\":[0.5],\"quality\":[0.1,0.9]}\n\
                    {\"prompt_id\":\"p1\",\"source\":\"s\",\"prompt_embedding\":[1.0],\"desc_embedding\":[0.5],\"quality\":[0.2,0.9]}\n";
        let data = write_file(dir.path(), "data.jsonl", body);
        let err = load_dataset(&data, &pool).unwrap_err();
        match err {
            Error::Record {
                line,
                field,
                message,
                ..
            } => {
                assert_eq!(line, 2);
                assert_eq!(field, "prompt_embedding");
                assert!(message.contains("dimension mismatch"));
            }
            other => panic!("unexpected {other:?}"),
        }
    }

    #[test]
    fn duplicate_ids_and_wrong_model_count_are_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let pool = write_file(dir.path(), "pool.jsonl", POOL);
        let line = "{\"prompt_id\":\"p0\",\"source\":\"s\",\"prompt_embedding\":[1.0],\"desc_embedding\":[0.5],\"quality\":[0.1,0.9]}\n";
        let data = write_file(dir.path(), "dup.jsonl", &format!("{line}{line}"));
        assert!(matches!(
            load_dataset(&data, &pool),
            Err(Error::Record { line: 2, ref field, .. }) if field == "prompt_id"
        ));
        let short = "{\"prompt_id\":\"p0\",\"source\":\"s\",\"prompt_embedding\":[1.0],\"desc_embedding\":[0.5],\"quality\":[0.1]}\n";
        let data = write_file(dir.path(), "short.jsonl", short);
        assert!(matches!(
            load_dataset(&data, &pool),
            Err(Error::Record { ref field, .. }) if field == "quality"
        ));
        let missing = dir.path().join("nope.jsonl");
        assert!(matches!(load_dataset(&missing, &pool), Err(Error::Io { .. })));
    }

    #[test]
    fn ties_in_quality_are_accepted() {
        let ds = Dataset::new(pool(2), vec![record(0, vec![0.5, 0.5])]).unwrap();
        assert_eq!(ds.len(), 1);
    }

    #[test]
    fn split_sizes_follow_floor_rule() {
        let (tr, dv, te) = split_dataset(&dataset(10), SplitRatios::default(), 7).unwrap();
        assert_eq!((tr.len(), dv.len(), te.len()), (8, 1, 1));
        let (tr, dv, te) = split_dataset(&dataset(7), SplitRatios::default(), 7).unwrap();
        assert_eq!((tr.len(), dv.len(), te.len()), (7, 0, 0));
    }

    #[test]
    fn split_is_deterministic() {
        let ds = dataset(10);
        let a = split_dataset(&ds, SplitRatios::default(), 7).unwrap();
        let b = split_dataset(&ds, SplitRatios::default(), 7).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn split_rejects_bad_ratio_sum() {
        let err = split_dataset(&dataset(4), SplitRatios::new(0.8, 0.1, 0.2), 1).unwrap_err();
        assert!(matches!(err, Error::Invalid(_)));
    }

    proptest::proptest! {
        #[test]
        fn split_is_a_partition(n in 1usize..60, seed in 0u64..1000, a in 0.0f64..1.0, b in 0.0f64..1.0) {
            let dev = a * (1.0 - 0.0) / 2.0;
            let test = b * (1.0 - dev) / 2.0;
            let train = 1.0 - dev - test;
            let ds = dataset(n);
            let (tr, dv, te) = split_dataset(&ds, SplitRatios::new(train, dev, test), seed).unwrap();
            let mut ids: Vec<&str> = tr.records().iter()
                .chain(dv.records())
                .chain(te.records())
                .map(|r| r.prompt_id.as_str())
                .collect();
            proptest::prop_assert_eq!(ids.len(), n);
            ids.sort_unstable();
            ids.dedup();
            proptest::prop_assert_eq!(ids.len(), n);
        }
    }
}

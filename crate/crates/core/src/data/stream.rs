//! Task streams, splits, annotation and the on-disk corpus format.

use std::collections::{BTreeMap, BTreeSet};
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use super::features::{composition_of, CorpusStats, FrequencyBuckets, TokenRecord};
use super::grammar::{generate_task, mix, Grammar, GrammarConfig, Sequence, TaskCorpus, TaskDef};
use crate::error::{Error, Result};

/// Default stream followed by the three alternative orders.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum TaskOrder {
    Default,
    #[serde(rename = "1")]
    One,
    #[serde(rename = "2")]
    Two,
    #[serde(rename = "3")]
    Three,
}

impl TaskOrder {
    pub const ALTERNATIVES: [TaskOrder; 3] = [TaskOrder::One, TaskOrder::Two, TaskOrder::Three];

    /// Task indices for an 8-task stream.
    pub fn indices(self) -> [usize; 8] {
        match self {
            TaskOrder::Default => [0, 1, 2, 3, 4, 5, 6, 7],
            TaskOrder::One => [1, 0, 4, 3, 2, 5, 6, 7],
            TaskOrder::Two => [1, 0, 4, 3, 6, 5, 2, 7],
            TaskOrder::Three => [1, 0, 4, 3, 2, 6, 5, 7],
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "default" | "0" => Ok(TaskOrder::Default),
            "1" => Ok(TaskOrder::One),
            "2" => Ok(TaskOrder::Two),
            "3" => Ok(TaskOrder::Three),
            other => Err(Error::Config(format!("unknown task order {other:?}"))),
        }
    }

    pub fn apply(self, tasks: &[TaskDef]) -> Result<Vec<TaskDef>> {
        if tasks.len() != 8 {
            return Err(Error::Config(format!("task orders are defined for 8 tasks, got {}", tasks.len())));
        }
        Ok(self.indices().iter().map(|&i| tasks[i].clone()).collect())
    }
}

/// One in ten sequence indices (by hash) goes to evaluation.
pub fn is_eval_index(seed: u64, task: usize, index: usize) -> bool {
    mix(seed ^ 0x5eed_5eed, task as u64, index as u64) % 10 == 0
}

#[derive(Debug, Clone)]
pub struct TaskData {
    pub def: TaskDef,
    pub train: Vec<Sequence>,
    pub eval: Vec<Sequence>,
}

pub fn split_corpus(corpus: TaskCorpus, seed: u64) -> TaskData {
    let (eval, train) = corpus
        .sequences
        .into_iter()
        .partition(|s| is_eval_index(seed, s.task, s.index));
    TaskData { def: corpus.def, train, eval }
}

/// Generates and splits every task of `order`, in order.
pub fn task_sequence(grammar: &Grammar, order: &[TaskDef]) -> Result<Vec<TaskData>> {
    if order.len() < 2 {
        return Err(Error::Contract(format!("a task stream needs at least 2 tasks, got {}", order.len())));
    }
    let mut seen = BTreeSet::new();
    if let Some(dup) = order.iter().find(|d| !seen.insert(d.id)) {
        return Err(Error::Contract(format!("duplicate task id {}", dup.id)));
    }
    order
        .iter()
        .map(|def| Ok(split_corpus(generate_task(grammar, def)?, grammar.seed)))
        .collect()
}

/// Content-position token counts.
pub fn content_counts<'a>(grammar: &Grammar, seqs: impl IntoIterator<Item = &'a Sequence>) -> BTreeMap<usize, u64> {
    let mut counts = BTreeMap::new();
    for s in seqs {
        for (pos, &t) in s.tokens.iter().enumerate() {
            if grammar.is_content_position(pos) {
                *counts.entry(t).or_insert(0) += 1;
            }
        }
    }
    counts
}

/// Bucketing frozen from the reference (old-task) sequences.
pub fn reference_buckets<'a>(grammar: &Grammar, seqs: impl IntoIterator<Item = &'a Sequence>) -> Result<FrequencyBuckets> {
    FrequencyBuckets::from_counts(&content_counts(grammar, seqs), grammar.spec.freq_buckets())
}

pub fn corpus_stats<'a>(grammar: &Grammar, seqs: impl IntoIterator<Item = &'a Sequence>, buckets: &FrequencyBuckets) -> CorpusStats {
    CorpusStats::new(content_counts(grammar, seqs), buckets.clone())
}

pub fn annotate(grammar: &Grammar, seq: &Sequence, stats: &CorpusStats) -> Result<Vec<TokenRecord>> {
    seq.tokens
        .iter()
        .enumerate()
        .map(|(position, &token)| {
            let composition = composition_of(token, position, seq.domain, seq.label, &grammar.spec, Some(stats))?;
            Ok(TokenRecord { token, position, composition, task: seq.task })
        })
        .collect()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TaskCount {
    pub task: usize,
    pub name: String,
    pub sequences: usize,
    pub tokens: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub spec_hash: String,
    pub seed: u64,
    pub grammar: GrammarConfig,
    pub counts: Vec<TaskCount>,
}

pub fn spec_hash(config: &GrammarConfig) -> String {
    let bytes = serde_json::to_vec(config).expect("grammar config serialises");
    hex::encode(Sha256::digest(bytes))
}

#[derive(Serialize, Deserialize)]
struct CorpusLine {
    sequence: usize,
    #[serde(flatten)]
    record: TokenRecord,
}

/// Writes `corpus.jsonl` (one token record per line) and `manifest.json`.
/// Frequency buckets are frozen from the first task's training split.
pub fn write_corpus(grammar: &Grammar, tasks: &[TaskData], dir: &Path) -> Result<Manifest> {
    std::fs::create_dir_all(dir)?;
    let first = tasks.first().ok_or_else(|| Error::Contract("no tasks to write".into()))?;
    let buckets = reference_buckets(grammar, &first.train)?;
    let mut out = BufWriter::new(std::fs::File::create(dir.join("corpus.jsonl"))?);
    let mut counts = Vec::new();
    for task in tasks {
        let all: Vec<&Sequence> = task.train.iter().chain(&task.eval).collect();
        let stats = corpus_stats(grammar, all.iter().copied(), &buckets);
        let mut tokens = 0;
        for s in &all {
            for record in annotate(grammar, s, &stats)? {
                serde_json::to_writer(&mut out, &CorpusLine { sequence: s.index, record })?;
                out.write_all(b"\n")?;
                tokens += 1;
            }
        }
        counts.push(TaskCount { task: task.def.id, name: task.def.name.clone(), sequences: all.len(), tokens });
    }
    out.flush()?;
    let manifest = Manifest { spec_hash: spec_hash(&grammar.config), seed: grammar.seed, grammar: grammar.config.clone(), counts };
    std::fs::write(dir.join("manifest.json"), serde_json::to_string_pretty(&manifest)?)?;
    Ok(manifest)
}

/// Reads `corpus.jsonl` back as `(sequence index, record)` pairs.
pub fn read_corpus(dir: &Path) -> Result<Vec<(usize, TokenRecord)>> {
    let f = BufReader::new(std::fs::File::open(dir.join("corpus.jsonl"))?);
    let mut out = Vec::new();
    for line in f.lines() {
        let line: CorpusLine = serde_json::from_str(&line?)?;
        out.push((line.sequence, line.record));
    }
    Ok(out)
}

pub fn read_manifest(dir: &Path) -> Result<Manifest> {
    let m: Manifest = serde_json::from_str(&std::fs::read_to_string(dir.join("manifest.json"))?)?;
    if m.spec_hash != spec_hash(&m.grammar) {
        return Err(Error::Format("manifest spec hash does not match its grammar".into()));
    }
    Ok(m)
}

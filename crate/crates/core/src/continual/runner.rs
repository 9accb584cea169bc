//! Experiment orchestration: data, backbone pretraining, sequential runs.

use log::info;
use serde::{Deserialize, Serialize};

use super::config::{Arch, RunConfig, TrainConfig};
use super::metrics::{bwt_metric, op_metric, ScoreMatrix};
use super::train::{task_accuracy, train_task, TaskInput, TrainLog};
use crate::data::grammar::mix;
use crate::data::{
    composition_of, corpus_stats, generate_task, reference_buckets, split_corpus, task_sequence, CorpusStats,
    FeatureComposition, Grammar, Sequence, TaskData, TaskOrder,
};
use crate::error::{Error, Result};
use crate::math::checkpoint::Checkpoint;
use crate::model::{BackboneCache, BlockConfig, ModelConfig, ToyLm};

/// Relative gap in activated parameters; errors above `tolerance`.
pub fn check_matched_budget(a: &ToyLm, b: &ToyLm, tolerance: f64) -> Result<f64> {
    let (x, y) = (a.activated_block_params() as f64, b.activated_block_params() as f64);
    let gap = (x - y).abs() / x.max(y);
    if gap > tolerance {
        return Err(Error::Config(format!(
            "activated parameters {x} vs {y} differ by {:.1}% (limit {:.1}%)",
            100.0 * gap,
            100.0 * tolerance
        )));
    }
    Ok(gap)
}

/// Train on each task in turn; after task `j` score every task `i <= j`.
pub fn run_sequence(
    model: &mut ToyLm,
    tasks: &[(TaskInput<'_>, TaskInput<'_>)],
    cfg: &TrainConfig,
    seed: u64,
) -> Result<(ScoreMatrix, Vec<Checkpoint>, Vec<TrainLog>)> {
    if tasks.len() < 2 {
        return Err(Error::Contract(format!("a task stream needs at least 2 tasks, got {}", tasks.len())));
    }
    let mut matrix = ScoreMatrix::new(tasks.len());
    let mut checkpoints = Vec::with_capacity(tasks.len());
    let mut logs = Vec::with_capacity(tasks.len());
    for (j, (train, _)) in tasks.iter().enumerate() {
        let (ck, log) = train_task(model, *train, cfg, mix(seed, 3, j as u64), Some(j))?;
        for (i, (_, eval)) in tasks[..=j].iter().enumerate() {
            matrix.set(i, j, task_accuracy(model, *eval)?)?;
        }
        info!("task {j}: final loss {:.4}, acc {:.3}", log.losses.last().copied().unwrap_or(f64::NAN), matrix.get(j, j).unwrap_or(0.0));
        checkpoints.push(ck);
        logs.push(log);
    }
    Ok((matrix, checkpoints, logs))
}

#[derive(Debug, Clone)]
pub struct TaskRows {
    pub train_seqs: Vec<Vec<usize>>,
    pub eval_seqs: Vec<Vec<usize>>,
    pub train: Option<BackboneCache>,
    pub eval: Option<BackboneCache>,
    /// Compositions of the scored rows, sequence-major like the caches.
    /// Frequency buckets come from this task's training split.
    pub train_comps: Vec<FeatureComposition>,
    pub eval_comps: Vec<FeatureComposition>,
    pub stats: CorpusStats,
}

/// Router inputs and compositions of freshly drawn old-task sequences.
#[derive(Debug, Clone)]
pub struct AnalysisRows {
    pub cache: BackboneCache,
    pub compositions: Vec<FeatureComposition>,
    pub positions: Vec<usize>,
}

impl TaskRows {
    /// Position of every cached training row.
    pub fn train_positions(&self, positions: &[usize]) -> Vec<usize> {
        positions.iter().copied().cycle().take(self.train_seqs.len() * positions.len()).collect()
    }

    pub fn inputs<'a>(&'a self, positions: &'a [usize]) -> (TaskInput<'a>, TaskInput<'a>) {
        match (&self.train, &self.eval) {
            (Some(t), Some(e)) => (TaskInput::Cached(t), TaskInput::Cached(e)),
            _ => (
                TaskInput::Full { seqs: &self.train_seqs, positions },
                TaskInput::Full { seqs: &self.eval_seqs, positions },
            ),
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SequenceSummary {
    pub arch: Arch,
    pub order: Vec<usize>,
    pub matrix: ScoreMatrix,
    pub op: f64,
    pub bwt: f64,
    /// Forgetting is negative here; the per-task drop formula has the opposite sign.
    pub bwt_convention: String,
}

#[derive(Debug, Clone)]
pub struct SequenceOutcome {
    pub summary: SequenceSummary,
    pub checkpoints: Vec<Checkpoint>,
    pub logs: Vec<TrainLog>,
}

/// Everything shared by the runs of one seed: data, pretrained backbone and
/// the cached router inputs.
#[derive(Debug, Clone)]
pub struct Experiment {
    pub config: RunConfig,
    pub grammar: Grammar,
    /// Indexed by task id.
    pub tasks: Vec<TaskData>,
    pub backbone: ToyLm,
    pub rows: Vec<TaskRows>,
    pub positions: Vec<usize>,
    pub pretrain_log: TrainLog,
}

impl Experiment {
    pub fn model_config(&self, block: BlockConfig) -> ModelConfig {
        model_config(&self.config, block)
    }

    pub fn prepare(config: RunConfig) -> Result<Self> {
        config.validate()?;
        let grammar = Grammar::new(config.grammar.clone(), config.seed)?;
        let tasks = task_sequence(&grammar, &grammar.default_tasks())?;
        let positions = grammar.config.scored_positions();
        let (backbone, pretrain_log) = pretrain_backbone(&config, &grammar)?;
        let rows = tasks
            .iter()
            .map(|t| {
                let train_seqs: Vec<Vec<usize>> = t.train.iter().map(|s| s.tokens.clone()).collect();
                let eval_seqs: Vec<Vec<usize>> = t.eval.iter().map(|s| s.tokens.clone()).collect();
                let (train, eval) = if config.train.freeze_backbone {
                    let tr: Vec<&[usize]> = train_seqs.iter().map(Vec::as_slice).collect();
                    let ev: Vec<&[usize]> = eval_seqs.iter().map(Vec::as_slice).collect();
                    (Some(backbone.backbone_cache(&tr, &positions)?), Some(backbone.backbone_cache(&ev, &positions)?))
                } else {
                    (None, None)
                };
                let stats = corpus_stats(&grammar, &t.train, &reference_buckets(&grammar, &t.train)?);
                let train_comps = row_compositions(&grammar, &t.train, &positions, &stats)?;
                let eval_comps = row_compositions(&grammar, &t.eval, &positions, &stats)?;
                Ok(TaskRows { train_seqs, eval_seqs, train, eval, train_comps, eval_comps, stats })
            })
            .collect::<Result<Vec<_>>>()?;
        Ok(Self { config, grammar, tasks, backbone, rows, positions, pretrain_log })
    }

    /// `count` unseen sequences of `task`, drawn past the end of its corpus,
    /// with frequency buckets from the task's training split.
    pub fn analysis_rows(&self, task: usize, count: usize) -> Result<AnalysisRows> {
        let rows = self.rows.get(task).ok_or_else(|| Error::Index(format!("task {task} out of range")))?;
        let start = self.tasks[task].def.sequences;
        let seqs = (start..start + count).map(|i| self.grammar.sequence(task, i)).collect::<Result<Vec<_>>>()?;
        let tokens: Vec<&[usize]> = seqs.iter().map(|s| s.tokens.as_slice()).collect();
        let cache = self.backbone.backbone_cache(&tokens, &self.positions)?;
        let compositions = row_compositions(&self.grammar, &seqs, &self.positions, &rows.stats)?;
        let positions = self.positions.iter().copied().cycle().take(compositions.len()).collect();
        Ok(AnalysisRows { cache, compositions, positions })
    }

    /// Fresh block on the shared pretrained backbone.
    pub fn build_model(&self, arch: Arch) -> Result<ToyLm> {
        let mut m = ToyLm::new(self.model_config(self.config.archs.get(arch).clone()), mix(self.config.seed, 2, 0))?;
        m.load_backbone(&self.backbone)?;
        m.set_freeze_backbone(self.config.train.freeze_backbone);
        Ok(m)
    }

    pub fn order_ids(&self, order: TaskOrder) -> Result<Vec<usize>> {
        let n = self.tasks.len();
        if n == 8 {
            Ok(order.indices().to_vec())
        } else if order == TaskOrder::Default {
            Ok((0..n).collect())
        } else {
            Err(Error::Config(format!("task orders are defined for 8 tasks, got {n}")))
        }
    }

    pub fn run(&self, arch: Arch, order: TaskOrder) -> Result<SequenceOutcome> {
        let ids = self.order_ids(order)?;
        self.run_ids(arch, &ids)
    }

    pub fn run_ids(&self, arch: Arch, ids: &[usize]) -> Result<SequenceOutcome> {
        let mut model = self.build_model(arch)?;
        let inputs: Vec<_> = ids.iter().map(|&i| self.rows[i].inputs(&self.positions)).collect();
        let (matrix, checkpoints, logs) = run_sequence(&mut model, &inputs, &self.config.train, self.config.seed)?;
        let n = ids.len();
        let summary = SequenceSummary {
            arch,
            order: ids.to_vec(),
            op: op_metric(&matrix, n)?,
            bwt: bwt_metric(&matrix, n)?,
            matrix,
            bwt_convention: "mean of f_i(w_n) - f_i(w_i); negative = forgetting (sign opposite to the drop formula)".into(),
        };
        Ok(SequenceOutcome { summary, checkpoints, logs })
    }
}

/// Compositions at `positions` of each sequence, sequence-major.
pub fn row_compositions(
    grammar: &Grammar,
    seqs: &[Sequence],
    positions: &[usize],
    stats: &CorpusStats,
) -> Result<Vec<FeatureComposition>> {
    let mut out = Vec::with_capacity(seqs.len() * positions.len());
    for s in seqs {
        for &p in positions {
            let token = *s.tokens.get(p).ok_or_else(|| Error::Index(format!("position {p} outside sequence")))?;
            out.push(composition_of(token, p, s.domain, s.label, &grammar.spec, Some(stats))?);
        }
    }
    Ok(out)
}

pub fn model_config(config: &RunConfig, block: BlockConfig) -> ModelConfig {
    ModelConfig {
        vocab: config.grammar.vocab,
        d_model: config.d_model,
        max_len: config.grammar.seq_len,
        attn_heads: config.attn_heads,
        block,
    }
}

/// Full-model training of a dense-block network on the task-agnostic
/// mixture; its embeddings, attention and unembedding become the shared
/// backbone.
pub fn pretrain_backbone(config: &RunConfig, grammar: &Grammar) -> Result<(ToyLm, TrainLog)> {
    let mut model = ToyLm::new(model_config(config, config.archs.dense.clone()), mix(config.seed, 1, 0))?;
    let p = &config.pretrain;
    if p.sequences == 0 || p.epochs == 0 {
        return Ok((model, TrainLog::default()));
    }
    let corpus = split_corpus(generate_task(grammar, &grammar.pretrain_def(p.sequences))?, grammar.seed);
    let seqs: Vec<Vec<usize>> = corpus.train.iter().map(|s| s.tokens.clone()).collect();
    let positions = grammar.config.scored_positions();
    let cfg = TrainConfig { epochs: p.epochs, lr: p.lr, batch_size: p.batch_size, freeze_backbone: false, ..config.train.clone() };
    let (_, log) = train_task(&mut model, TaskInput::Full { seqs: &seqs, positions: &positions }, &cfg, mix(config.seed, 4, 0), None)?;
    info!("pretraining: {} steps, final loss {:.4}", log.steps(), log.losses.last().copied().unwrap_or(f64::NAN));
    Ok((model, log))
}

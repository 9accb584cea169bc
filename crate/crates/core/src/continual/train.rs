//! Per-task training and scoring.

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::config::TrainConfig;
use crate::error::{Error, Result};
use crate::math::checkpoint::Checkpoint;
use crate::math::optim::{cosine_lr, AdamW};
use crate::math::{Tape, Tensor};
use crate::model::{argmax, BackboneCache, ToyLm};

/// Training or evaluation rows for one task.
#[derive(Debug, Clone, Copy)]
pub enum TaskInput<'a> {
    /// Cached router inputs; valid only while the backbone stays frozen.
    Cached(&'a BackboneCache),
    /// Raw sequences scored at `positions`.
    Full { seqs: &'a [Vec<usize>], positions: &'a [usize] },
}

impl TaskInput<'_> {
    pub fn num_seqs(&self) -> usize {
        match self {
            TaskInput::Cached(c) => c.num_seqs(),
            TaskInput::Full { seqs, .. } => seqs.len(),
        }
    }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct TrainLog {
    pub losses: Vec<f64>,
}

impl TrainLog {
    pub fn steps(&self) -> usize {
        self.losses.len()
    }
}

/// Aborts when the loss stays above `factor` times the first loss for
/// `patience` consecutive steps, or turns non-finite.
#[derive(Debug, Clone)]
struct DivergenceGuard {
    factor: f64,
    patience: usize,
    initial: Option<f64>,
    streak: usize,
}

impl DivergenceGuard {
    fn observe(&mut self, step: usize, loss: f64) -> Result<()> {
        if !loss.is_finite() {
            return Err(Error::Divergence(format!("non-finite loss at step {step}")));
        }
        let initial = *self.initial.get_or_insert(loss);
        if loss > self.factor * initial {
            self.streak += 1;
            if self.streak >= self.patience {
                return Err(Error::Divergence(format!(
                    "loss {loss:.4} above {}x the initial {initial:.4} for {} steps (step {step})",
                    self.factor, self.patience
                )));
            }
        } else {
            self.streak = 0;
        }
        Ok(())
    }
}

fn batch_loss(model: &ToyLm, tape: &mut Tape, input: TaskInput<'_>, batch: &[usize]) -> Result<crate::math::Var> {
    match input {
        TaskInput::Cached(cache) => {
            if !model.backbone_frozen() {
                return Err(Error::State("cached rows require a frozen backbone".into()));
            }
            let (h, targets) = cache.select(batch)?;
            Ok(model.block_loss(tape, h, &targets)?.0)
        }
        TaskInput::Full { seqs, positions } => {
            let mut total = None;
            for &s in batch {
                let l = model.masked_loss(tape, &seqs[s], positions)?;
                total = Some(match total {
                    None => l,
                    Some(acc) => tape.add(acc, l)?,
                });
            }
            let total = total.ok_or_else(|| Error::Contract("empty batch".into()))?;
            Ok(tape.scale(total, 1.0 / batch.len() as f64))
        }
    }
}

/// Fixed epochs of AdamW under a cosine schedule. Only trainable parameters
/// move. The returned checkpoint records the step count and task index.
pub fn train_task(
    model: &mut ToyLm,
    input: TaskInput<'_>,
    cfg: &TrainConfig,
    seed: u64,
    task_index: Option<usize>,
) -> Result<(Checkpoint, TrainLog)> {
    let n = input.num_seqs();
    if n == 0 && cfg.epochs > 0 {
        return Err(Error::Contract("no training sequences".into()));
    }
    let per_epoch = n.div_ceil(cfg.batch_size);
    let total = per_epoch * cfg.epochs;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut opt = AdamW::new(cfg.adamw);
    let mut guard = DivergenceGuard { factor: cfg.divergence_factor, patience: cfg.divergence_patience, initial: None, streak: 0 };
    let mut log = TrainLog::default();
    let mut order: Vec<usize> = (0..n).collect();
    let mut step = 0;
    for _ in 0..cfg.epochs {
        order.shuffle(&mut rng);
        for batch in order.chunks(cfg.batch_size) {
            model.store.zero_grad();
            let mut tape = Tape::new();
            let loss = batch_loss(model, &mut tape, input, batch)?;
            let lv = tape.value(loss).item();
            guard.observe(step, lv)?;
            tape.backward(loss, &mut model.store)?;
            opt.step(&mut model.store, cosine_lr(cfg.lr, step, total))?;
            log.losses.push(lv);
            step += 1;
        }
    }
    model.store.clear_grad();
    Ok((model.checkpoint(step as u64, task_index, seed), log))
}

/// Per-row argmax correctness and loss.
#[derive(Debug, Clone, PartialEq)]
pub struct RowScores {
    pub correct: Vec<bool>,
    pub losses: Vec<f64>,
}

impl RowScores {
    pub fn accuracy(&self) -> f64 {
        if self.correct.is_empty() {
            return 0.0;
        }
        self.correct.iter().filter(|&&c| c).count() as f64 / self.correct.len() as f64
    }

    pub fn mean_loss(&self) -> f64 {
        self.losses.iter().sum::<f64>() / self.losses.len().max(1) as f64
    }
}

const EVAL_CHUNK: usize = 512;

fn score_logits(logits: &Tensor, targets: &[usize], out: &mut RowScores) {
    for (r, &t) in targets.iter().enumerate() {
        let row = logits.row(r);
        let lse = crate::math::tensor::log_sum_exp(row);
        out.losses.push(lse - row[t]);
        out.correct.push(argmax(row) == t);
    }
}

pub fn score_rows(model: &ToyLm, input: TaskInput<'_>) -> Result<RowScores> {
    let mut out = RowScores { correct: Vec::new(), losses: Vec::new() };
    match input {
        TaskInput::Cached(cache) => {
            let n = cache.targets.len();
            for start in (0..n).step_by(EVAL_CHUNK) {
                let len = EVAL_CHUNK.min(n - start);
                let (logits, _) = model.block_eval(cache.h.slice_rows(start, len)?)?;
                score_logits(&logits, &cache.targets[start..start + len], &mut out);
            }
        }
        TaskInput::Full { seqs, positions } => {
            for s in seqs {
                let ev = model.eval(s)?;
                for &p in positions.iter() {
                    out.losses.push(ev.per_token[p]);
                    out.correct.push(ev.predictions[p] == s[p + 1]);
                }
            }
        }
    }
    Ok(out)
}

/// Next-token accuracy at the scored rows, in `[0, 1]`.
pub fn task_accuracy(model: &ToyLm, input: TaskInput<'_>) -> Result<f64> {
    Ok(score_rows(model, input)?.accuracy())
}

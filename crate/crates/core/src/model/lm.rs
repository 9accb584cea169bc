//! The toy language model: token + position embedding, one attention block,
//! one expert block and an output projection.
//!
//! The router input is the post-attention residual state
//! `h = x + attn(x)`. The block output is added back to it before the
//! output projection: `logits = (h + block(h)) . U`.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::attention::{AttentionBlock, HeadDecomposition};
use super::expert::ExpertMlp;
use super::moe::{DenseBlock, MoeBlock, MultiHeadMoe, StandardMoe, TokenRoute};
use crate::error::{Error, Result};
use crate::math::checkpoint::Checkpoint;
use crate::math::{ParamId, ParamStore, Tape, Tensor, Var};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum BlockConfig {
    Standard { experts: usize, top_k: usize, hidden: usize },
    MultiHead { heads: usize, experts: usize, top_k: usize, hidden: usize },
    Dense { hidden: usize },
}

impl BlockConfig {
    pub fn label(&self) -> String {
        match self {
            BlockConfig::Standard { experts, top_k, .. } => format!("moe-K{experts}-k{top_k}"),
            BlockConfig::MultiHead { heads, experts, top_k, .. } => format!("mhmoe-H{heads}-K{experts}-k{top_k}"),
            BlockConfig::Dense { .. } => "dense".into(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelConfig {
    pub vocab: usize,
    pub d_model: usize,
    pub max_len: usize,
    pub attn_heads: usize,
    pub block: BlockConfig,
}

/// Router inputs and next-token targets at selected positions, computed once
/// while the backbone is frozen. Rows are grouped by sequence.
#[derive(Debug, Clone)]
pub struct BackboneCache {
    /// `[N x d]`.
    pub h: Tensor,
    pub targets: Vec<usize>,
    pub rows_per_seq: usize,
}

impl BackboneCache {
    pub fn num_seqs(&self) -> usize {
        self.targets.len() / self.rows_per_seq.max(1)
    }

    /// Rows of the listed sequences, stacked.
    pub fn select(&self, seqs: &[usize]) -> Result<(Tensor, Vec<usize>)> {
        let rows: Vec<usize> = seqs.iter().flat_map(|&s| s * self.rows_per_seq..(s + 1) * self.rows_per_seq).collect();
        let h = self.h.gather_rows(&rows)?;
        Ok((h, rows.iter().map(|&r| self.targets[r]).collect()))
    }
}

#[derive(Debug)]
pub struct LmForward {
    pub logits: Var,
    pub h: Var,
    pub routes: Vec<TokenRoute>,
}

/// Plain evaluation of one sequence.
#[derive(Debug, Clone)]
pub struct LmEval {
    pub loss: f64,
    /// Next-token loss at positions `0..T-1`.
    pub per_token: Vec<f64>,
    /// Argmax prediction at positions `0..T-1` (ties to the lowest id).
    pub predictions: Vec<usize>,
    pub routes: Vec<TokenRoute>,
}

#[derive(Debug, Clone)]
pub struct ToyLm {
    pub config: ModelConfig,
    pub store: ParamStore,
    pub emb: ParamId,
    pub pos: ParamId,
    pub attn: AttentionBlock,
    pub block: MoeBlock,
    pub unemb: ParamId,
    frozen_backbone: bool,
}

impl ToyLm {
    pub fn new(config: ModelConfig, seed: u64) -> Result<Self> {
        let ModelConfig { vocab, d_model: d, max_len, attn_heads, .. } = config;
        if vocab < 2 || d == 0 || max_len < 2 {
            return Err(Error::Config(format!("degenerate model shape V={vocab} d={d} T={max_len}")));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut store = ParamStore::new();
        let emb = store.add("embed", Tensor::xavier(vocab, d, &mut rng));
        let pos = store.add("pos_embed", Tensor::xavier(max_len, d, &mut rng));
        let attn = AttentionBlock::new(&mut store, "attn", d, attn_heads, true, &mut rng)?;
        let block = match config.block {
            BlockConfig::Standard { experts, top_k, hidden } => {
                MoeBlock::Standard(StandardMoe::new(&mut store, "moe", d, experts, top_k, hidden, &mut rng)?)
            }
            BlockConfig::MultiHead { heads, experts, top_k, hidden } => {
                MoeBlock::MultiHead(MultiHeadMoe::new(&mut store, "moe", d, heads, experts, top_k, hidden, &mut rng)?)
            }
            BlockConfig::Dense { hidden } => {
                MoeBlock::Dense(DenseBlock { mlp: ExpertMlp::new(&mut store, "moe.dense", d, hidden, d, &mut rng) })
            }
        };
        let unemb = store.add("unembed", Tensor::xavier(d, vocab, &mut rng));
        Ok(Self { config, store, emb, pos, attn, block, unemb, frozen_backbone: false })
    }

    pub fn backbone_param_ids(&self) -> Vec<ParamId> {
        let mut ids = vec![self.emb, self.pos];
        ids.extend(self.attn.param_ids());
        ids.push(self.unemb);
        ids
    }

    pub fn block_param_ids(&self) -> Vec<ParamId> {
        self.block.param_ids()
    }

    pub fn set_freeze_backbone(&mut self, frozen: bool) {
        self.frozen_backbone = frozen;
        for id in self.backbone_param_ids() {
            self.store.set_trainable(id, !frozen);
        }
    }

    pub fn backbone_frozen(&self) -> bool {
        self.frozen_backbone
    }

    fn check_tokens(&self, tokens: &[usize]) -> Result<()> {
        if tokens.len() > self.config.max_len {
            return Err(Error::Dimension(format!("sequence of {} exceeds max length {}", tokens.len(), self.config.max_len)));
        }
        if let Some(&bad) = tokens.iter().find(|&&t| t >= self.config.vocab) {
            return Err(Error::Index(format!("token id {bad} out of vocabulary {}", self.config.vocab)));
        }
        Ok(())
    }

    fn embed(&self, tape: &mut Tape, tokens: &[usize]) -> Result<Var> {
        let x = tape.embedding(&self.store, self.emb, tokens)?;
        let positions: Vec<usize> = (0..tokens.len()).collect();
        let p = tape.embedding(&self.store, self.pos, &positions)?;
        tape.add(x, p)
    }

    /// Router input `h = x + attn(x)` on the tape.
    pub fn router_input(&self, tape: &mut Tape, tokens: &[usize]) -> Result<Var> {
        self.check_tokens(tokens)?;
        let x = self.embed(tape, tokens)?;
        let a = self.attn.forward(tape, &self.store, x)?.h;
        tape.add(x, a)
    }

    pub fn forward(&self, tape: &mut Tape, tokens: &[usize]) -> Result<LmForward> {
        let h = self.router_input(tape, tokens)?;
        let (y, routes) = self.block.forward(tape, &self.store, h)?;
        let z = tape.add(h, y)?;
        let u = tape.param(&self.store, self.unemb);
        let logits = tape.matmul(z, u)?;
        Ok(LmForward { logits, h, routes })
    }

    /// Mean next-token loss and its per-position values, `T >= 2`.
    pub fn lm_loss(&self, tape: &mut Tape, tokens: &[usize]) -> Result<(Var, Var, Vec<TokenRoute>)> {
        if tokens.len() < 2 {
            return Err(Error::Contract("next-token loss needs at least two tokens".into()));
        }
        let fwd = self.forward(tape, tokens)?;
        let t = tokens.len();
        let logits = tape.slice_rows(fwd.logits, 0, t - 1)?;
        let per = tape.cross_entropy_rows(logits, &tokens[1..])?;
        let loss = tape.mean(per);
        let mut routes = fwd.routes;
        routes.truncate(t - 1);
        Ok((loss, per, routes))
    }

    /// Loss restricted to the listed positions (each predicting its successor).
    pub fn masked_loss(&self, tape: &mut Tape, tokens: &[usize], positions: &[usize]) -> Result<Var> {
        check_positions(tokens.len(), positions)?;
        let fwd = self.forward(tape, tokens)?;
        let logits = tape.gather_rows(fwd.logits, positions)?;
        let targets: Vec<usize> = positions.iter().map(|&p| tokens[p + 1]).collect();
        tape.cross_entropy(logits, &targets)
    }

    pub fn eval(&self, tokens: &[usize]) -> Result<LmEval> {
        if tokens.len() < 2 {
            return Err(Error::Contract("next-token loss needs at least two tokens".into()));
        }
        let mut tape = Tape::new();
        let fwd = self.forward(&mut tape, tokens)?;
        let t = tokens.len();
        let logits = tape.slice_rows(fwd.logits, 0, t - 1)?;
        let per = tape.cross_entropy_rows(logits, &tokens[1..])?;
        let lv = tape.value(logits);
        let predictions = (0..t - 1).map(|i| argmax(lv.row(i))).collect();
        let per_token = tape.value(per).data().to_vec();
        let loss = per_token.iter().sum::<f64>() / per_token.len() as f64;
        let mut routes = fwd.routes;
        routes.truncate(t - 1);
        Ok(LmEval { loss, per_token, predictions, routes })
    }

    /// Plain-tensor router input plus its attention head decompositions.
    /// `h = residual + sum_m contributions[:, m, :]`.
    pub fn router_input_decomposed(&self, tokens: &[usize]) -> Result<(Tensor, Tensor, HeadDecomposition)> {
        self.check_tokens(tokens)?;
        let mut tape = Tape::new();
        let x = self.embed(&mut tape, tokens)?;
        let xv = tape.value(x).clone();
        let (a, dec) = self.attn.decompose(&self.store, &xv)?;
        Ok((xv.add(&a)?, xv, dec))
    }

    /// Router inputs at `positions` of one sequence, `[P x d]`.
    pub fn router_rows(&self, tokens: &[usize], positions: &[usize]) -> Result<Tensor> {
        let mut tape = Tape::new();
        let h = self.router_input(&mut tape, tokens)?;
        tape.value(h).gather_rows(positions)
    }

    /// Frozen-backbone rows for the listed positions of many sequences.
    pub fn backbone_cache(&self, seqs: &[&[usize]], positions: &[usize]) -> Result<BackboneCache> {
        let d = self.config.d_model;
        let mut h = Vec::with_capacity(seqs.len() * positions.len() * d);
        let mut targets = Vec::with_capacity(seqs.len() * positions.len());
        for tokens in seqs {
            check_positions(tokens.len(), positions)?;
            h.extend_from_slice(self.router_rows(tokens, positions)?.data());
            targets.extend(positions.iter().map(|&p| tokens[p + 1]));
        }
        Ok(BackboneCache { h: Tensor::new(vec![targets.len(), d], h)?, targets, rows_per_seq: positions.len() })
    }

    /// Block forward on cached router inputs: logits `(h + block(h)) . U`.
    pub fn block_logits(&self, tape: &mut Tape, h: Tensor) -> Result<(Var, Vec<TokenRoute>)> {
        if h.shape().len() != 2 || h.cols() != self.config.d_model {
            return Err(Error::Dimension(format!("cached rows {:?}, expected [N x {}]", h.shape(), self.config.d_model)));
        }
        let h = tape.constant(h);
        let (y, routes) = self.block.forward(tape, &self.store, h)?;
        let z = tape.add(h, y)?;
        let u = tape.param(&self.store, self.unemb);
        Ok((tape.matmul(z, u)?, routes))
    }

    /// Mean next-token loss of cached rows.
    pub fn block_loss(&self, tape: &mut Tape, h: Tensor, targets: &[usize]) -> Result<(Var, Vec<TokenRoute>)> {
        let (logits, routes) = self.block_logits(tape, h)?;
        Ok((tape.cross_entropy(logits, targets)?, routes))
    }

    /// Logits and routes for cached rows.
    pub fn block_eval(&self, h: Tensor) -> Result<(Tensor, Vec<TokenRoute>)> {
        let mut tape = Tape::new();
        let (logits, routes) = self.block_logits(&mut tape, h)?;
        Ok((tape.value(logits).clone(), routes))
    }

    /// Copies embedding, attention and unembedding values from another model.
    pub fn load_backbone(&mut self, other: &ToyLm) -> Result<()> {
        if other.config.d_model != self.config.d_model
            || other.config.vocab != self.config.vocab
            || other.config.max_len != self.config.max_len
            || other.config.attn_heads != self.config.attn_heads
        {
            return Err(Error::Config("backbone shapes differ".into()));
        }
        for (dst, src) in self.backbone_param_ids().into_iter().zip(other.backbone_param_ids()) {
            self.store.get_mut(dst).value = other.store.value(src).clone();
        }
        Ok(())
    }

    pub fn architecture(&self) -> serde_json::Value {
        serde_json::to_value(&self.config).expect("config serialises")
    }

    pub fn checkpoint(&self, step: u64, task_index: Option<usize>, seed: u64) -> Checkpoint {
        Checkpoint::from_store(&self.store, self.architecture(), step, task_index, seed)
    }

    pub fn restore(&mut self, ck: &Checkpoint) -> Result<()> {
        let arch: ModelConfig = serde_json::from_value(ck.architecture.clone())
            .map_err(|e| Error::Format(format!("checkpoint architecture: {e}")))?;
        if arch != self.config {
            return Err(Error::Format("checkpoint architecture differs from model".into()));
        }
        ck.restore_into(&mut self.store)
    }

    pub fn activated_block_params(&self) -> usize {
        self.block.activated_params()
    }
}

fn check_positions(len: usize, positions: &[usize]) -> Result<()> {
    if positions.is_empty() {
        return Err(Error::Contract("no positions selected".into()));
    }
    if let Some(&p) = positions.iter().find(|&&p| p + 1 >= len) {
        return Err(Error::Index(format!("position {p} has no successor in a sequence of {len}")));
    }
    Ok(())
}

pub fn argmax(row: &[f64]) -> usize {
    let mut best = 0;
    for (i, &v) in row.iter().enumerate() {
        if v > row[best] {
            best = i;
        }
    }
    best
}

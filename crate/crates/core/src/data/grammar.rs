//! The compositional task grammar.
//!
//! Vocabulary layout: `labels` marker tokens, then one content region per
//! (task, domain), then a shared block of response tokens, one per
//! composition. A sequence fixes a domain and a label, writes the label
//! marker at position 0 and then alternates content tokens (odd positions)
//! with responses (even positions). The response after a content token is a
//! task-specific permutation of that token's ground-truth composition, with
//! probability `noise` replaced by a uniform response token.
//!
//! Content tokens come in frequency tiers: tier `i` holds `tiers[i]` tokens
//! and every tier carries the same mass, so token frequencies are
//! quantised and the frequency buckets mostly recover the tiers.

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::features::{FeatureComposition, FeatureSpec};
use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct GrammarConfig {
    pub num_tasks: usize,
    pub domains: usize,
    pub labels: usize,
    /// Tokens per frequency tier, most frequent tier first.
    pub tiers: Vec<usize>,
    pub pos_buckets: usize,
    pub seq_len: usize,
    pub sequences: usize,
    pub noise: f64,
    pub vocab: usize,
}

impl Default for GrammarConfig {
    fn default() -> Self {
        Self {
            num_tasks: 8,
            domains: 3,
            labels: 3,
            tiers: vec![1, 2, 4, 8],
            pos_buckets: 4,
            seq_len: 64,
            sequences: 2000,
            noise: 0.1,
            vocab: 512,
        }
    }
}

impl GrammarConfig {
    pub fn region_size(&self) -> usize {
        self.tiers.iter().sum()
    }

    pub fn content_base(&self) -> usize {
        self.labels
    }

    pub fn response_base(&self) -> usize {
        self.labels + self.num_tasks * self.domains * self.region_size()
    }

    pub fn feature_spec(&self) -> Result<FeatureSpec> {
        FeatureSpec::new(self.domains, self.labels, self.tiers.len(), self.pos_buckets, self.seq_len)
    }

    pub fn num_responses(&self) -> usize {
        self.domains * self.labels * self.tiers.len() * self.pos_buckets
    }

    pub fn used_vocab(&self) -> usize {
        self.response_base() + self.num_responses()
    }

    pub fn validate(&self) -> Result<()> {
        if self.num_tasks == 0 || self.tiers.iter().any(|&t| t == 0) {
            return Err(Error::Config("need at least one task and nonempty tiers".into()));
        }
        if self.seq_len < 3 {
            return Err(Error::Config(format!("sequence length {} leaves no content-response pair", self.seq_len)));
        }
        if !(0.0..=1.0).contains(&self.noise) {
            return Err(Error::Config(format!("noise {} outside [0, 1]", self.noise)));
        }
        self.feature_spec()?;
        if self.used_vocab() > self.vocab {
            return Err(Error::Config(format!(
                "vocabulary regions need {} ids, vocabulary has {}",
                self.used_vocab(),
                self.vocab
            )));
        }
        Ok(())
    }

    /// Odd positions carrying a content token that has a successor.
    pub fn scored_positions(&self) -> Vec<usize> {
        (1..self.seq_len - 1).step_by(2).collect()
    }
}

/// A task in a stream. Task ids index content regions; id `num_tasks` is the
/// task-agnostic pretraining mixture.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct TaskDef {
    pub id: usize,
    pub name: String,
    pub sequences: usize,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Sequence {
    pub task: usize,
    pub index: usize,
    /// Task whose content region the sequence draws from (differs from
    /// `task` only for pretraining sequences).
    pub region_task: usize,
    pub domain: usize,
    pub label: usize,
    pub tokens: Vec<usize>,
}

/// Grammar plus the seeded response permutations.
#[derive(Debug, Clone)]
pub struct Grammar {
    pub config: GrammarConfig,
    pub spec: FeatureSpec,
    pub seed: u64,
    /// Indexed by task id, pretraining last.
    perms: Vec<Vec<usize>>,
}

pub(crate) fn mix(a: u64, b: u64, c: u64) -> u64 {
    fn splitmix(mut z: u64) -> u64 {
        z = z.wrapping_add(0x9e37_79b9_7f4a_7c15);
        z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
        z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
        z ^ (z >> 31)
    }
    splitmix(splitmix(splitmix(a) ^ b) ^ c)
}

impl Grammar {
    pub fn new(config: GrammarConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let spec = config.feature_spec()?;
        let shuffled = |stream: u64| {
            let mut rng = ChaCha8Rng::seed_from_u64(mix(seed, stream, u64::MAX));
            let mut p: Vec<usize> = (0..config.num_responses()).collect();
            p.shuffle(&mut rng);
            p
        };
        let perms = (0..=config.num_tasks).map(|task| shuffled(task as u64)).collect();
        Ok(Self { config, spec, seed, perms })
    }

    pub fn pretrain_task(&self) -> usize {
        self.config.num_tasks
    }

    pub fn default_tasks(&self) -> Vec<TaskDef> {
        (0..self.config.num_tasks)
            .map(|id| TaskDef { id, name: format!("t{id}"), sequences: self.config.sequences })
            .collect()
    }

    pub fn pretrain_def(&self, sequences: usize) -> TaskDef {
        TaskDef { id: self.pretrain_task(), name: "pretrain".into(), sequences }
    }

    fn region_start(&self, task: usize, domain: usize) -> usize {
        self.config.content_base() + (task * self.config.domains + domain) * self.config.region_size()
    }

    /// Content token for (task, domain, tier, slot within tier).
    pub fn content_token(&self, task: usize, domain: usize, tier: usize, slot: usize) -> usize {
        let offset: usize = self.config.tiers[..tier].iter().sum();
        self.region_start(task, domain) + offset + slot
    }

    /// Inverse of [`Grammar::content_token`] without the slot: `(task, domain, tier)`.
    pub fn locate_content(&self, token: usize) -> Option<(usize, usize, usize)> {
        let base = self.config.content_base();
        if token < base || token >= self.config.response_base() {
            return None;
        }
        let rs = self.config.region_size();
        let region = (token - base) / rs;
        let mut offset = (token - base) % rs;
        let mut tier = 0;
        while offset >= self.config.tiers[tier] {
            offset -= self.config.tiers[tier];
            tier += 1;
        }
        Some((region / self.config.domains, region % self.config.domains, tier))
    }

    pub fn is_content_position(&self, position: usize) -> bool {
        position % 2 == 1
    }

    /// Frequency bucket implied by a tier: the single-token tier is the most frequent.
    pub fn tier_bucket(&self, tier: usize) -> usize {
        self.config.tiers.len() - 1 - tier
    }

    /// Noise-free response for a ground-truth composition under `task`.
    pub fn response_token(&self, task: usize, comp: &FeatureComposition) -> usize {
        self.config.response_base() + self.perms[task][comp.index(&self.spec)]
    }

    /// Pretraining shifts its permutation by the region, so the mixture's
    /// targets depend on which task's tokens a sequence uses.
    fn emitted_response(&self, task: usize, region_task: usize, comp: &FeatureComposition) -> usize {
        if task == self.pretrain_task() {
            let r = self.config.num_responses();
            let idx = (comp.index(&self.spec) + 37 * region_task) % r;
            self.config.response_base() + self.perms[task][idx]
        } else {
            self.response_token(task, comp)
        }
    }

    pub fn sequence(&self, task: usize, index: usize) -> Result<Sequence> {
        let cfg = &self.config;
        if task > cfg.num_tasks {
            return Err(Error::Index(format!("task {task} outside 0..={}", cfg.num_tasks)));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(mix(self.seed, task as u64, index as u64));
        let region_task = if task == self.pretrain_task() { rng.gen_range(0..cfg.num_tasks) } else { task };
        let domain = rng.gen_range(0..cfg.domains);
        let label = rng.gen_range(0..cfg.labels);
        let mut tokens = Vec::with_capacity(cfg.seq_len);
        tokens.push(label);
        let mut last_comp = None;
        for pos in 1..cfg.seq_len {
            if self.is_content_position(pos) {
                let tier = rng.gen_range(0..cfg.tiers.len());
                let slot = rng.gen_range(0..cfg.tiers[tier]);
                tokens.push(self.content_token(region_task, domain, tier, slot));
                let pb = self.spec.position_bucket(pos);
                last_comp = Some(FeatureComposition(vec![domain, label, self.tier_bucket(tier), pb]));
            } else {
                let comp = last_comp.take().expect("responses follow content");
                let noisy = rng.gen::<f64>() < cfg.noise;
                tokens.push(if noisy {
                    cfg.response_base() + rng.gen_range(0..cfg.num_responses())
                } else {
                    self.emitted_response(task, region_task, &comp)
                });
            }
        }
        Ok(Sequence { task, index, region_task, domain, label, tokens })
    }

    /// Ground-truth composition of the content token at `position`.
    pub fn true_composition(&self, seq: &Sequence, position: usize) -> Option<FeatureComposition> {
        if !self.is_content_position(position) {
            return None;
        }
        let (_, _, tier) = self.locate_content(*seq.tokens.get(position)?)?;
        Some(FeatureComposition(vec![seq.domain, seq.label, self.tier_bucket(tier), self.spec.position_bucket(position)]))
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct TaskCorpus {
    pub def: TaskDef,
    pub sequences: Vec<Sequence>,
}

pub fn generate_task(grammar: &Grammar, def: &TaskDef) -> Result<TaskCorpus> {
    let sequences = (0..def.sequences).map(|i| grammar.sequence(def.id, i)).collect::<Result<Vec<_>>>()?;
    Ok(TaskCorpus { def: def.clone(), sequences })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small() -> Grammar {
        Grammar::new(GrammarConfig { seq_len: 16, sequences: 50, ..Default::default() }, 7).unwrap()
    }

    #[test]
    fn layout_fits_default_vocab() {
        let c = GrammarConfig::default();
        assert_eq!(c.used_vocab(), 507);
        c.validate().unwrap();
        let tight = GrammarConfig { vocab: 500, ..Default::default() };
        assert!(matches!(tight.validate(), Err(Error::Config(_))));
    }

    #[test]
    fn content_tokens_round_trip() {
        let g = small();
        for task in 0..8 {
            for domain in 0..3 {
                for tier in 0..4 {
                    for slot in 0..g.config.tiers[tier] {
                        let t = g.content_token(task, domain, tier, slot);
                        assert_eq!(g.locate_content(t), Some((task, domain, tier)));
                    }
                }
            }
        }
        assert_eq!(g.locate_content(0), None);
        assert_eq!(g.locate_content(g.config.response_base()), None);
    }

    #[test]
    fn sequences_follow_the_layout() {
        let g = small();
        let s = g.sequence(2, 5).unwrap();
        assert_eq!(s.tokens.len(), 16);
        assert_eq!(s.tokens[0], s.label);
        for (pos, &t) in s.tokens.iter().enumerate().skip(1) {
            if pos % 2 == 1 {
                assert_eq!(g.locate_content(t).map(|x| (x.0, x.1)), Some((2, s.domain)));
            } else {
                assert!(t >= g.config.response_base() && t < g.config.used_vocab());
            }
        }
    }

    #[test]
    fn noise_free_responses_are_the_permutation() {
        let g = Grammar::new(GrammarConfig { seq_len: 16, noise: 0.0, ..Default::default() }, 1).unwrap();
        let s = g.sequence(3, 0).unwrap();
        for pos in g.config.scored_positions() {
            let c = g.true_composition(&s, pos).unwrap();
            assert_eq!(s.tokens[pos + 1], g.response_token(3, &c));
        }
    }
}

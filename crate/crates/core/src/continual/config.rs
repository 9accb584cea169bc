use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::data::GrammarConfig;
use crate::error::{Error, Result};
use crate::math::optim::AdamWConfig;
use crate::model::BlockConfig;

pub const SEED_ENV: &str = "MFL_SEED";

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Arch {
    /// Single router, K=4, k=1.
    Moe,
    /// Single router with the head-wise layer's route-space size: K=26, k=5.
    MoeWide,
    Mhmoe,
    Dense,
}

impl Arch {
    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "moe" => Ok(Arch::Moe),
            "moe-wide" => Ok(Arch::MoeWide),
            "mhmoe" => Ok(Arch::Mhmoe),
            "dense" => Ok(Arch::Dense),
            other => Err(Error::Config(format!("unknown architecture {other:?}"))),
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            Arch::Moe => "moe",
            Arch::MoeWide => "moe-wide",
            Arch::Mhmoe => "mhmoe",
            Arch::Dense => "dense",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ArchTable {
    pub moe: BlockConfig,
    pub moe_wide: BlockConfig,
    pub mhmoe: BlockConfig,
    pub dense: BlockConfig,
}

impl Default for ArchTable {
    // Hidden widths chosen so activated parameters per token agree within 5%.
    fn default() -> Self {
        Self {
            moe: BlockConfig::Standard { experts: 4, top_k: 1, hidden: 76 },
            moe_wide: BlockConfig::Standard { experts: 26, top_k: 5, hidden: 13 },
            mhmoe: BlockConfig::MultiHead { heads: 8, experts: 4, top_k: 1, hidden: 16 },
            dense: BlockConfig::Dense { hidden: 76 },
        }
    }
}

impl ArchTable {
    pub fn get(&self, arch: Arch) -> &BlockConfig {
        match arch {
            Arch::Moe => &self.moe,
            Arch::MoeWide => &self.moe_wide,
            Arch::Mhmoe => &self.mhmoe,
            Arch::Dense => &self.dense,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    pub epochs: usize,
    pub lr: f64,
    /// Sequences per step; every scored position of a sequence is in its batch.
    pub batch_size: usize,
    pub freeze_backbone: bool,
    pub adamw: AdamWConfig,
    pub divergence_factor: f64,
    pub divergence_patience: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            epochs: 2,
            lr: 1e-3,
            batch_size: 16,
            freeze_backbone: true,
            adamw: AdamWConfig::default(),
            divergence_factor: 10.0,
            divergence_patience: 100,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct PretrainConfig {
    /// Sequences of the task-agnostic mixture; zero keeps the random backbone.
    pub sequences: usize,
    pub epochs: usize,
    pub lr: f64,
    pub batch_size: usize,
}

impl Default for PretrainConfig {
    fn default() -> Self {
        Self { sequences: 8000, epochs: 4, lr: 3e-3, batch_size: 16 }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RunConfig {
    pub seed: u64,
    pub grammar: GrammarConfig,
    pub d_model: usize,
    pub attn_heads: usize,
    pub archs: ArchTable,
    pub pretrain: PretrainConfig,
    pub train: TrainConfig,
    /// Allowed relative gap in activated parameters between compared layers.
    pub budget_tolerance: f64,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            seed: 0,
            grammar: GrammarConfig::default(),
            d_model: 64,
            attn_heads: 4,
            archs: ArchTable::default(),
            pretrain: PretrainConfig::default(),
            train: TrainConfig::default(),
            budget_tolerance: 0.05,
        }
    }
}

impl RunConfig {
    pub fn from_json(text: &str) -> Result<Self> {
        let cfg: RunConfig = serde_json::from_str(text).map_err(|e| Error::Config(format!("config: {e}")))?;
        cfg.validate()?;
        Ok(cfg)
    }

    /// Reads a config file and applies the seed override from the environment.
    pub fn load(path: &Path) -> Result<Self> {
        let mut cfg = Self::from_json(&std::fs::read_to_string(path)?)?;
        cfg.apply_env_seed(std::env::var(SEED_ENV).ok().as_deref())?;
        Ok(cfg)
    }

    pub fn apply_env_seed(&mut self, value: Option<&str>) -> Result<()> {
        if let Some(v) = value {
            self.seed = v
                .trim()
                .parse()
                .map_err(|_| Error::Config(format!("{SEED_ENV}={v:?} is not an unsigned integer")))?;
        }
        Ok(())
    }

    pub fn validate(&self) -> Result<()> {
        self.grammar.validate()?;
        if self.train.batch_size == 0 || self.pretrain.batch_size == 0 {
            return Err(Error::Config("batch size must be positive".into()));
        }
        if !(self.train.lr >= 0.0 && self.pretrain.lr >= 0.0) {
            return Err(Error::Config("learning rates must be nonnegative".into()));
        }
        if self.d_model == 0 || self.attn_heads == 0 || self.d_model % self.attn_heads != 0 {
            return Err(Error::Config(format!("{} attention heads do not divide width {}", self.attn_heads, self.d_model)));
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn unknown_keys_are_config_errors() {
        assert!(matches!(RunConfig::from_json(r#"{"seed": 1, "bogus": 2}"#), Err(Error::Config(_))));
        assert!(matches!(RunConfig::from_json(r#"{"train": {"epochz": 1}}"#), Err(Error::Config(_))));
        let c = RunConfig::from_json(r#"{"seed": 9, "train": {"epochs": 1}}"#).unwrap();
        assert_eq!((c.seed, c.train.epochs, c.d_model), (9, 1, 64));
    }

    #[test]
    fn env_seed_overrides() {
        let mut c = RunConfig::default();
        c.apply_env_seed(Some("42")).unwrap();
        assert_eq!(c.seed, 42);
        assert!(c.apply_env_seed(Some("x")).is_err());
        c.apply_env_seed(None).unwrap();
        assert_eq!(c.seed, 42);
    }

    #[test]
    fn default_round_trips() {
        let c = RunConfig::default();
        let back = RunConfig::from_json(&serde_json::to_string(&c).unwrap()).unwrap();
        assert_eq!(back, c);
    }
}

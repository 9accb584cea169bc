//! On-disk layout of a training run.
//!
//! `config.json` (resolved run config), `summary.json`, `logs.json` and
//! `checkpoints/task-{j}.ckpt`, one per position in the task order.

use std::path::{Path, PathBuf};

use anyhow::Context;
use mfl_core::continual::{Experiment, RunConfig, SequenceOutcome, SequenceSummary, TrainLog};
use mfl_core::math::checkpoint::Checkpoint;
use mfl_core::Error;

pub struct RunDir {
    root: PathBuf,
}

impl RunDir {
    pub fn new(root: &Path) -> Self {
        Self { root: root.to_path_buf() }
    }

    fn checkpoint_path(&self, j: usize) -> PathBuf {
        self.root.join("checkpoints").join(format!("task-{j}.ckpt"))
    }

    pub fn save(&self, config: &RunConfig, outcome: &SequenceOutcome) -> anyhow::Result<()> {
        std::fs::create_dir_all(self.root.join("checkpoints"))?;
        std::fs::write(self.root.join("config.json"), serde_json::to_string_pretty(config)?)?;
        std::fs::write(self.root.join("summary.json"), serde_json::to_string_pretty(&outcome.summary)?)?;
        std::fs::write(self.root.join("logs.json"), serde_json::to_string(&outcome.logs)?)?;
        for (j, ck) in outcome.checkpoints.iter().enumerate() {
            ck.save(&self.checkpoint_path(j))?;
        }
        Ok(())
    }

    pub fn summary(&self) -> anyhow::Result<SequenceSummary> {
        let path = self.root.join("summary.json");
        let text = std::fs::read_to_string(&path).with_context(|| format!("reading {}", path.display()))?;
        Ok(serde_json::from_str(&text).map_err(|e| Error::Format(format!("{}: {e}", path.display())))?)
    }

    /// Rebuilds the experiment from the saved config and reloads the
    /// checkpoints. The rebuilt backbone must match the saved one.
    pub fn load(&self) -> anyhow::Result<(Experiment, SequenceOutcome)> {
        let config = RunConfig::from_json(&std::fs::read_to_string(self.root.join("config.json")).context("reading config.json")?)?;
        let summary = self.summary()?;
        let checkpoints = (0..summary.order.len())
            .map(|j| Checkpoint::load(&self.checkpoint_path(j)).with_context(|| format!("loading checkpoint {j}")))
            .collect::<anyhow::Result<Vec<_>>>()?;
        let logs: Vec<TrainLog> = match std::fs::read_to_string(self.root.join("logs.json")) {
            Ok(text) => serde_json::from_str(&text)?,
            Err(_) => Vec::new(),
        };
        let exp = Experiment::prepare(config)?;
        let mut model = exp.build_model(summary.arch)?;
        model.restore(&checkpoints[0])?;
        for id in exp.backbone.backbone_param_ids() {
            let p = exp.backbone.store.get(id);
            let saved = model.store.id(&p.name).map(|i| model.store.value(i));
            if saved.map(|t| t.data()) != Some(p.value.data()) {
                return Err(Error::Format(format!("backbone parameter {} differs from the run's checkpoints", p.name)).into());
            }
        }
        Ok((exp, SequenceOutcome { summary, checkpoints, logs }))
    }
}

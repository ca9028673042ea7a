use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::arena::ArenaConfig;
use crate::error::{Error, Result};
use crate::learner::{LearnerConfig, Model, Variant, Widths};

/// An arena given either inline or as a path to its JSON file. Relative
/// paths resolve against the directory of the run config that names them.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum ArenaSource {
    Path(PathBuf),
    Inline(Box<ArenaConfig>),
}

impl ArenaSource {
    pub fn resolve(&self, base: Option<&Path>) -> Result<ArenaConfig> {
        match self {
            ArenaSource::Inline(cfg) => {
                cfg.validate()?;
                Ok((**cfg).clone())
            }
            ArenaSource::Path(p) => {
                let full = match base {
                    Some(dir) if p.is_relative() => dir.join(p),
                    _ => p.clone(),
                };
                ArenaConfig::load(&full)
            }
        }
    }
}

impl Default for ArenaSource {
    fn default() -> Self {
        ArenaSource::Inline(Box::new(ArenaConfig::rangers(3, 3)))
    }
}

/// Everything needed to reproduce a training run.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub arena: ArenaSource,
    pub variant: Variant,
    pub widths: Widths,
    pub learner: LearnerConfig,
    pub total_env_steps: u64,
    /// Environment steps between evaluations (and checkpoints).
    pub eval_interval: u64,
    pub eval_episodes: usize,
    /// Arenas on which the agent network is evaluated zero-shot at every
    /// evaluation.
    pub transfer_arenas: Vec<ArenaSource>,
    /// Stop once an evaluation reaches this win rate.
    pub stop_at_win_rate: Option<f64>,
    pub seed: u64,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            arena: ArenaSource::default(),
            variant: Variant::Raca,
            widths: Widths::default(),
            learner: LearnerConfig::default(),
            total_env_steps: 200_000,
            eval_interval: 10_000,
            eval_episodes: 32,
            transfer_arenas: Vec::new(),
            stop_at_win_rate: None,
            seed: 0,
        }
    }
}

impl RunConfig {
    pub fn from_json(text: &str) -> Result<Self> {
        let cfg: RunConfig = serde_json::from_str(text)?;
        cfg.validate()?;
        Ok(cfg)
    }

    /// Loads a run config and inlines every arena it references.
    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)?;
        let cfg = Self::from_json(&text)?;
        cfg.inlined(path.parent())
    }

    pub fn validate(&self) -> Result<()> {
        if self.eval_episodes == 0 {
            return Err(Error::config("eval_episodes", "must be at least 1"));
        }
        if self.eval_interval == 0 {
            return Err(Error::config("eval_interval", "must be positive"));
        }
        if let Some(w) = self.stop_at_win_rate {
            if !(0.0..=1.0).contains(&w) {
                return Err(Error::config("stop_at_win_rate", "must lie in [0, 1]"));
            }
        }
        self.learner.validate()
    }

    /// A copy with every arena resolved and stored inline.
    pub fn inlined(&self, base: Option<&Path>) -> Result<Self> {
        let mut out = self.clone();
        out.arena = ArenaSource::Inline(Box::new(self.arena.resolve(base)?));
        out.transfer_arenas = self
            .transfer_arenas
            .iter()
            .map(|a| Ok(ArenaSource::Inline(Box::new(a.resolve(base)?))))
            .collect::<Result<_>>()?;
        Ok(out)
    }

    pub fn arena_config(&self) -> Result<ArenaConfig> {
        self.arena.resolve(None)
    }

    /// The model this config trains, sized for its arena.
    pub fn model(&self) -> Result<Model> {
        let arena = self.arena_config()?;
        Model::new(
            self.variant,
            &self.widths,
            arena.allies.len(),
            arena.state_dim(),
        )
    }

    pub fn to_json_pretty(&self) -> String {
        serde_json::to_string_pretty(self).expect("config serialises")
    }
}

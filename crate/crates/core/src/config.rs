//! Run configuration and checkpoint files.

use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::data::WindowParams;
use crate::error::{Error, Result};
use crate::model::{Model, ModelConfig};
use crate::synthgen::ScenarioConfig;
use crate::training::TrainConfig;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EvalConfig {
    pub step_sizes: Vec<usize>,
    pub latency_hours: Vec<f64>,
    pub latency_repeats: usize,
}

impl Default for EvalConfig {
    fn default() -> Self {
        Self {
            step_sizes: vec![1, 6, 12, 24, 48],
            latency_hours: vec![1.0, 4.0, 24.0],
            latency_repeats: 5,
        }
    }
}

/// One JSON document driving every command.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub scenario: ScenarioConfig,
    pub days: u32,
    /// Existing dataset directory; when unset, training generates data from `scenario`.
    pub dataset: Option<PathBuf>,
    /// Where training writes its checkpoint and history.
    pub out_dir: PathBuf,
    /// Distance threshold of the diffusion graph.
    pub epsilon_km: f64,
    pub window: WindowParams,
    pub model: ModelConfig,
    pub training: TrainConfig,
    pub eval: EvalConfig,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            scenario: ScenarioConfig::default(),
            days: 7,
            dataset: None,
            out_dir: PathBuf::from("run"),
            epsilon_km: 1.0,
            window: WindowParams::default(),
            model: ModelConfig::default(),
            training: TrainConfig::default(),
            eval: EvalConfig::default(),
        }
    }
}

impl RunConfig {
    /// Reads a config; relative paths inside it resolve against its directory.
    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let mut cfg: RunConfig =
            serde_json::from_str(&text).map_err(|e| Error::Config(format!("{}: {e}", path.display())))?;
        let base = path.parent().unwrap_or(Path::new(""));
        if cfg.out_dir.is_relative() {
            cfg.out_dir = base.join(&cfg.out_dir);
        }
        if let Some(d) = &cfg.dataset {
            if d.is_relative() {
                cfg.dataset = Some(base.join(d));
            }
        }
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<()> {
        self.scenario.validate()?;
        self.model.validate()?;
        self.training.validate()?;
        if self.days == 0 {
            return Err(Error::Config("days must be >= 1".into()));
        }
        if !(self.epsilon_km > 0.0) {
            return Err(Error::Config("epsilon_km must be positive".into()));
        }
        if self.window.history <= 0 || self.window.horizon <= 0 || self.window.stride <= 0 {
            return Err(Error::Config("window lengths and stride must be positive".into()));
        }
        if self.eval.step_sizes.contains(&0) {
            return Err(Error::Config("step sizes must be >= 1".into()));
        }
        Ok(())
    }
}

/// Trained parameters, normalization statistics and the config that produced them.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct Checkpoint {
    pub model: Model,
    pub window: WindowParams,
    pub epsilon_km: f64,
    pub best_epoch: usize,
    pub best_val: f64,
    pub config: RunConfig,
}

impl Checkpoint {
    pub const FILE: &'static str = "checkpoint.json";

    pub fn save(&self, path: &Path) -> Result<()> {
        let text = serde_json::to_string(self)?;
        fs::write(path, text).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        serde_json::from_str(&text).map_err(|e| Error::Data(format!("{}: not a checkpoint: {e}", path.display())))
    }
}

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::confidence::RewardConfig;
use crate::env::Environment;
use crate::error::{Error, Result};
use crate::eval::EvalConfig;
use crate::grpo::TrainConfig;

/// Everything a run needs. Only `seed` is required in the file; every other
/// field falls back to its default.
///
/// ```toml
/// seed = 7
/// out_dir = "runs/seed7"
///
/// [env.task]
/// width = 4
/// height = 4
/// colors = 4
///
/// [env.perturbation]
/// kind = "mask"
/// ratio = 0.8
///
/// [train]
/// steps = 3000
///
/// [reward]
/// lambda_vis = 0.4
///
/// [eval]
/// tasks = 1000
/// ```
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    pub seed: u64,
    #[serde(default = "default_out_dir")]
    pub out_dir: PathBuf,
    #[serde(default)]
    pub env: Environment,
    #[serde(default)]
    pub train: TrainConfig,
    #[serde(default)]
    pub reward: RewardConfig,
    #[serde(default)]
    pub eval: EvalConfig,
}

fn default_out_dir() -> PathBuf {
    PathBuf::from("vlcal-run")
}

impl RunConfig {
    pub fn new(seed: u64) -> Self {
        Self {
            seed,
            out_dir: default_out_dir(),
            env: Environment::default(),
            train: TrainConfig::default(),
            reward: RewardConfig::default(),
            eval: EvalConfig::default(),
        }
    }

    pub fn from_toml_str(text: &str) -> Result<Self> {
        let cfg: Self = toml::from_str(text).map_err(|e| Error::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::Config(format!("{}: {e}", path.display())))?;
        Self::from_toml_str(&text).map_err(|e| match e {
            Error::Config(msg) => Error::Config(format!("{}: {msg}", path.display())),
            other => other,
        })
    }

    pub fn to_toml_string(&self) -> Result<String> {
        toml::to_string(self).map_err(|e| Error::Config(e.to_string()))
    }

    pub fn validate(&self) -> Result<()> {
        if self.seed > i64::MAX as u64 {
            return Err(Error::Config(format!("seed {} does not fit a signed 64-bit integer", self.seed)));
        }
        self.env.validate()?;
        self.train.validate()?;
        self.reward.validate()?;
        self.eval.validate()
    }

    /// Training settings with the run seed filled in.
    pub fn train_config(&self) -> TrainConfig {
        TrainConfig {
            seed: self.seed,
            ..self.train
        }
    }
}

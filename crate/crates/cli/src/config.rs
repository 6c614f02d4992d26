use std::fmt;
use std::path::Path;

use serde::{Deserialize, Serialize};
use spikefield_core::render::ModelConfig;
use spikefield_core::{EnergyModel, RenderConfig, TrainConfig};

/// Contents of a `--config` file. Every section is optional.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub model: ModelConfig,
    pub render: RenderConfig,
    pub train: TrainConfig,
    pub energy: EnergyModel,
}

impl RunConfig {
    pub fn from_json(text: &str) -> Result<Self, CliError> {
        serde_json::from_str(text).map_err(|e| CliError::Config(e.to_string()))
    }

    pub fn load(path: &Path) -> Result<Self, CliError> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| CliError::Config(format!("{}: {e}", path.display())))?;
        Self::from_json(&text).map_err(|e| match e {
            CliError::Config(msg) => CliError::Config(format!("{}: {msg}", path.display())),
            other => other,
        })
    }

    pub fn validate(&self) -> Result<(), CliError> {
        self.render.validate()?;
        self.train.validate()?;
        self.energy.validate()?;
        Ok(())
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("config is always serializable")
    }
}

#[derive(Debug)]
pub enum CliError {
    /// Invalid configuration or flags; exit code 2.
    Config(String),
    /// Anything that went wrong while running; exit code 1.
    Runtime(spikefield_core::Error),
}

impl CliError {
    pub fn exit_code(&self) -> u8 {
        match self {
            CliError::Config(_) => 2,
            CliError::Runtime(_) => 1,
        }
    }
}

impl fmt::Display for CliError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            CliError::Config(msg) => write!(f, "config error: {msg}"),
            CliError::Runtime(e) => write!(f, "{e}"),
        }
    }
}

impl From<spikefield_core::Error> for CliError {
    fn from(e: spikefield_core::Error) -> Self {
        match e {
            spikefield_core::Error::Config(msg) => CliError::Config(msg),
            other => CliError::Runtime(other),
        }
    }
}

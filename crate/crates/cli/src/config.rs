use std::path::{Path, PathBuf};

use otcil::evaluator::Mode;
use otcil::pipeline::RunOptions;
use otcil::trainer::TrainerConfig;
use serde::{Deserialize, Serialize};

use crate::CliError;

pub const CONFIG_FILE: &str = "config.toml";

/// Everything a `train` or `eval` invocation depends on. Read from a TOML
/// file, then overridden by command-line flags.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    #[serde(skip_serializing_if = "Option::is_none")]
    pub bundle: Option<PathBuf>,
    pub out: PathBuf,
    /// Checkpoint to resume training from.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub resume: Option<PathBuf>,
    pub base_size: usize,
    pub increment: usize,
    pub mode: Mode,
    /// Per-image alignment records in `debug.jsonl` (eval only).
    pub debug_dump: bool,
    pub trainer: TrainerConfig,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            bundle: None,
            out: PathBuf::from("run"),
            resume: None,
            base_size: 0,
            increment: 10,
            mode: Mode::Full,
            debug_dump: false,
            trainer: TrainerConfig::default(),
        }
    }
}

impl RunConfig {
    pub fn load(path: &Path) -> Result<Self, CliError> {
        let text = std::fs::read_to_string(path).map_err(|e| CliError::Config(format!("{}: {e}", path.display())))?;
        toml::from_str(&text).map_err(|e| CliError::Config(format!("{}: {e}", path.display())))
    }

    pub fn to_toml(&self) -> Result<String, CliError> {
        toml::to_string(self).map_err(|e| CliError::Config(format!("serializing config: {e}")))
    }

    pub fn options(&self) -> RunOptions {
        RunOptions {
            trainer: self.trainer.clone(),
            base_size: self.base_size,
            increment: self.increment,
            mode: self.mode,
        }
    }

    /// Restores the settings recorded in a checkpoint.
    pub fn apply_options(&mut self, opts: RunOptions) {
        self.trainer = opts.trainer;
        self.base_size = opts.base_size;
        self.increment = opts.increment;
        self.mode = opts.mode;
    }

    pub fn validate(&self) -> Result<(), CliError> {
        if self.increment == 0 {
            return Err(CliError::Config("increment must be at least 1".into()));
        }
        self.trainer.validate().map_err(CliError::from)
    }

    pub fn bundle(&self) -> Result<&Path, CliError> {
        self.bundle
            .as_deref()
            .ok_or_else(|| CliError::Config("no bundle given (--bundle or `bundle` in the config file)".into()))
    }
}

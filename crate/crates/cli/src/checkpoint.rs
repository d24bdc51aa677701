//! Versioned JSON checkpoints. Floats are written with round-trip precision,
//! so save → load → save reproduces the file byte for byte.

use std::path::Path;

use autogp::data::Transform;
use autogp::model::ModelState;
use autogp::training::TrainerState;
use serde::{Deserialize, Serialize};

use crate::config::RunConfig;
use crate::error::{CliError, CliResult};

pub const FORMAT_VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Checkpoint {
    pub format_version: u32,
    pub config: RunConfig,
    /// Normalization fitted on the training data.
    pub transform: Transform,
    pub model: ModelState,
    /// Epoch, phase and optimizer state; all random streams derive from
    /// `config.training.seed` and these counters.
    pub trainer: TrainerState,
}

impl Checkpoint {
    pub fn to_json(&self) -> CliResult<String> {
        let mut text = serde_json::to_string_pretty(self)
            .map_err(|e| CliError::config("checkpoint", format!("cannot serialize: {e}")))?;
        text.push('\n');
        Ok(text)
    }

    pub fn from_json(text: &str) -> CliResult<Self> {
        let value: serde_json::Value =
            serde_json::from_str(text).map_err(|e| CliError::config("checkpoint", e.to_string()))?;
        match value.get("format_version").and_then(|v| v.as_u64()) {
            Some(v) if v == u64::from(FORMAT_VERSION) => {}
            Some(v) => {
                return Err(CliError::config(
                    "checkpoint.format_version",
                    format!("version {v} is not supported (expected {FORMAT_VERSION})"),
                ))
            }
            None => return Err(CliError::config("checkpoint.format_version", "missing")),
        }
        let ck: Checkpoint = serde_json::from_value(value).map_err(|e| CliError::config("checkpoint", e.to_string()))?;
        ck.model
            .validate()
            .map_err(|e| CliError::config("checkpoint.model", e.to_string()))?;
        Ok(ck)
    }

    /// Writes through a temporary file so an interrupted save never leaves a
    /// truncated checkpoint behind.
    pub fn save(&self, path: &Path) -> CliResult<()> {
        let text = self.to_json()?;
        let io = |e: std::io::Error| CliError::config("output.checkpoint", format!("{}: {e}", path.display()));
        if let Some(dir) = path.parent() {
            std::fs::create_dir_all(dir).map_err(io)?;
        }
        let tmp = path.with_extension("json.tmp");
        std::fs::write(&tmp, text).map_err(io)?;
        std::fs::rename(&tmp, path).map_err(io)
    }

    pub fn load(path: &Path) -> CliResult<Self> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| CliError::config("checkpoint", format!("{}: {e}", path.display())))?;
        Checkpoint::from_json(&text)
    }
}

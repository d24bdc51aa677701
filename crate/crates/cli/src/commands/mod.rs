pub mod evaluate;
pub mod gradcheck;
pub mod predict;
pub mod train;
pub mod variance;

use std::path::Path;

use crate::checkpoint::Checkpoint;
use crate::config::RunConfig;
use crate::error::{CliError, CliResult};

/// Stream id of evaluation draws, shared with the training loop so that a
/// standalone evaluation reproduces the last logged metrics.
pub const EVAL_STREAM: u64 = 3;

/// The config given on the command line, or the one echoed in `checkpoint`.
pub fn config_or_echo(config: Option<&Path>, checkpoint: Option<&Checkpoint>) -> CliResult<RunConfig> {
    match (config, checkpoint) {
        (Some(path), _) => RunConfig::load(path),
        (None, Some(ck)) => Ok(ck.config.clone()),
        (None, None) => Err(CliError::config("config", "either --config or --checkpoint is required")),
    }
}

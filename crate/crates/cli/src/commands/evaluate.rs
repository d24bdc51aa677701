use std::fmt;
use std::path::PathBuf;

use autogp::math::RandomStream;
use autogp::objectives::McConfig;

use super::{config_or_echo, EVAL_STREAM};
use crate::checkpoint::Checkpoint;
use crate::error::{CliResult, Stage};
use crate::setup::{check_compatible, load_raw};

#[derive(Debug, Clone, Default)]
pub struct EvaluateArgs {
    pub checkpoint: PathBuf,
    /// Evaluate on this config's data instead of the checkpoint's.
    pub config: Option<PathBuf>,
    pub seed: Option<u64>,
    pub mc_samples: Option<usize>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct EvaluationReport {
    pub points: usize,
    pub mc_samples: usize,
    pub error_rate: Option<f64>,
    pub mean_nlp: f64,
    pub msse: Option<f64>,
}

impl fmt::Display for EvaluationReport {
    /// `key=value` pairs on one line; inapplicable metrics are omitted.
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "points={} mc_samples={}", self.points, self.mc_samples)?;
        if let Some(e) = self.error_rate {
            write!(f, " error_rate={e}")?;
        }
        write!(f, " mean_nlp={}", self.mean_nlp)?;
        if let Some(m) = self.msse {
            write!(f, " msse={m}")?;
        }
        Ok(())
    }
}

/// Evaluates a checkpoint on the test split of the configured data (the
/// training data when there is no test split), normalized with the
/// checkpoint's training statistics.
pub fn run_evaluate(args: &EvaluateArgs) -> CliResult<EvaluationReport> {
    let ck = Checkpoint::load(&args.checkpoint)?;
    let config = config_or_echo(args.config.as_deref(), Some(&ck))?;
    let (train, test) = load_raw(&config.dataset)?;
    let raw = test.unwrap_or(train);
    check_compatible(&ck.model, &raw)?;
    let data = ck.transform.apply(&raw).stage("dataset.normalization")?;
    let seed = args.seed.unwrap_or(ck.config.training.seed);
    let s = args.mc_samples.unwrap_or(ck.config.training.eval_samples);
    let mc = McConfig::new(s, RandomStream::new(seed, EVAL_STREAM));
    let m = autogp::training::evaluate(&ck.model, &data, &mc).stage("evaluate")?;
    Ok(EvaluationReport {
        points: data.len(),
        mc_samples: s,
        error_rate: m.error_rate,
        mean_nlp: m.mean_nlp,
        msse: m.msse,
    })
}

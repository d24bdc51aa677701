use std::fs::{File, OpenOptions};
use std::io::Write;
use std::path::{Path, PathBuf};

use autogp::data::Transform;
use autogp::model::ModelState;
use autogp::training::{Metrics, TrainObserver, Trainer, TrainerState};
use log::{info, warn};

use super::config_or_echo;
use crate::checkpoint::{Checkpoint, FORMAT_VERSION};
use crate::config::RunConfig;
use crate::error::{CliError, CliResult};
use crate::setup::{build_model, load_data};

#[derive(Debug, Clone, Default)]
pub struct TrainArgs {
    pub config: Option<PathBuf>,
    /// Resume from this checkpoint.
    pub checkpoint: Option<PathBuf>,
    pub seed: Option<u64>,
    /// Overrides the training Monte Carlo sample count.
    pub mc_samples: Option<usize>,
    /// Directory receiving `checkpoint.json` and `metrics.tsv` instead of
    /// the configured output paths.
    pub out: Option<PathBuf>,
    /// Stop (and checkpoint) after this many epochs of this invocation.
    pub stop_after_epochs: Option<u64>,
}

#[derive(Debug, Clone)]
pub struct TrainSummary {
    pub checkpoint_path: PathBuf,
    pub metrics_path: PathBuf,
    pub epochs_run: u64,
    pub history: Vec<Metrics>,
    pub trainer: TrainerState,
}

struct RunObserver<'a> {
    config: &'a RunConfig,
    transform: &'a Transform,
    checkpoint_path: &'a Path,
    metrics: File,
    metrics_path: &'a Path,
    epochs: u64,
    failure: Option<CliError>,
}

impl RunObserver<'_> {
    fn snapshot(&self, trainer: &TrainerState, state: &ModelState) -> Checkpoint {
        Checkpoint {
            format_version: FORMAT_VERSION,
            config: self.config.clone(),
            transform: self.transform.clone(),
            model: state.clone(),
            trainer: trainer.clone(),
        }
    }

    fn fail(&mut self, e: CliError) -> autogp::Error {
        let msg = e.to_string();
        self.failure = Some(e);
        autogp::Error::InvalidArgument(msg)
    }
}

impl TrainObserver for RunObserver<'_> {
    fn on_epoch(&mut self, epoch: u64, objective: f64) -> autogp::Result<()> {
        self.epochs += 1;
        log::debug!("epoch {epoch}: objective {objective}");
        Ok(())
    }

    fn on_eval(&mut self, m: &Metrics) -> autogp::Result<()> {
        info!(
            "epoch {}: objective {:.6} mean_nlp {:.6}{}{}",
            m.epoch,
            m.objective,
            m.mean_nlp,
            m.error_rate.map_or(String::new(), |e| format!(" error_rate {e:.6}")),
            m.msse.map_or(String::new(), |e| format!(" msse {e:.6}")),
        );
        if let Err(e) = writeln!(self.metrics, "{}", m.log_line()).and_then(|_| self.metrics.flush()) {
            let e = CliError::config("output.metrics", format!("{}: {e}", self.metrics_path.display()));
            return Err(self.fail(e));
        }
        Ok(())
    }

    fn on_phase_end(&mut self, trainer: &TrainerState, state: &ModelState) -> autogp::Result<()> {
        if let Err(e) = self.snapshot(trainer, state).save(self.checkpoint_path) {
            return Err(self.fail(e));
        }
        Ok(())
    }

    fn on_abort(&mut self, trainer: &TrainerState, state: &ModelState, error: &autogp::Error) {
        let path = abort_path(self.checkpoint_path);
        warn!("training aborted ({error}); saving the last valid state to {}", path.display());
        if let Err(e) = self.snapshot(trainer, state).save(&path) {
            warn!("could not save the abort checkpoint: {e}");
        }
    }
}

/// Where a run that fails numerically leaves its last valid state.
pub fn abort_path(checkpoint: &Path) -> PathBuf {
    let stem = checkpoint.file_stem().map(|s| s.to_string_lossy().into_owned()).unwrap_or_default();
    checkpoint.with_file_name(format!("{stem}.abort.json"))
}

fn open_metrics(path: &Path, resume: bool) -> CliResult<File> {
    let io = |e: std::io::Error| CliError::config("output.metrics", format!("{}: {e}", path.display()));
    if let Some(dir) = path.parent() {
        std::fs::create_dir_all(dir).map_err(io)?;
    }
    if resume && path.is_file() {
        return OpenOptions::new().append(true).open(path).map_err(io);
    }
    let mut f = File::create(path).map_err(io)?;
    writeln!(f, "{}", Metrics::LOG_HEADER).map_err(io)?;
    Ok(f)
}

/// Trains from scratch, or resumes from `args.checkpoint`. Checkpoints are
/// written at every phase boundary and when the invocation ends; a
/// numerical failure leaves the last valid state in an `.abort.json` file.
pub fn run_train(args: &TrainArgs) -> CliResult<TrainSummary> {
    let resume = args.checkpoint.as_deref().map(Checkpoint::load).transpose()?;
    let mut config = config_or_echo(args.config.as_deref(), resume.as_ref())?;
    if let Some(seed) = args.seed {
        config.training.seed = seed;
    }
    if let Some(s) = args.mc_samples {
        config.training.num_samples = s;
    }
    config.validate()?;
    if let Some(ck) = &resume {
        if ck.config != config {
            return Err(CliError::config(
                "checkpoint.config",
                "the checkpoint was written with a different configuration",
            ));
        }
    }
    let (checkpoint_path, metrics_path) = match &args.out {
        Some(dir) => (dir.join("checkpoint.json"), dir.join("metrics.tsv")),
        None => (config.output.checkpoint.clone(), config.output.metrics.clone()),
    };

    let data = load_data(&config.dataset)?;
    let (mut state, mut ts) = match resume {
        Some(ck) => {
            if ck.transform != data.transform {
                return Err(CliError::config(
                    "checkpoint.transform",
                    "data normalization differs from the checkpoint's",
                ));
            }
            info!("resuming at epoch {} (round {})", ck.trainer.epoch, ck.trainer.round);
            (ck.model, ck.trainer)
        }
        None => (
            build_model(&config.model, &data.train, config.training.seed)?,
            TrainerState::new(&config.training),
        ),
    };
    crate::setup::check_compatible(&state, &data.train)?;

    let metrics = open_metrics(&metrics_path, args.checkpoint.is_some())?;
    let mut observer = RunObserver {
        config: &config,
        transform: &data.transform,
        checkpoint_path: &checkpoint_path,
        metrics,
        metrics_path: &metrics_path,
        epochs: 0,
        failure: None,
    };
    let mut trainer = Trainer::new(&config.training, &data.train, data.test.as_ref())
        .map_err(|e| CliError::from_core("training", e))?;
    let result = trainer.run(&mut ts, &mut state, &mut observer, args.stop_after_epochs);
    let history = match result {
        Ok(h) => h,
        Err(e) => return Err(observer.failure.take().unwrap_or_else(|| CliError::from_core("train", e))),
    };
    observer.snapshot(&ts, &state).save(&checkpoint_path)?;
    let epochs_run = observer.epochs;
    if ts.converged {
        info!("converged after {} rounds", ts.round);
    }
    Ok(TrainSummary {
        checkpoint_path,
        metrics_path,
        epochs_run,
        history,
        trainer: ts,
    })
}

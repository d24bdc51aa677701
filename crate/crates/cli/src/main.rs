use std::path::PathBuf;
use std::process::ExitCode;

use autogp::model::ParamGroup;
use autogp_cli::commands::evaluate::{run_evaluate, EvaluateArgs};
use autogp_cli::commands::gradcheck::{run_gradcheck, verdict, GradcheckArgs, REPORT_HEADER};
use autogp_cli::commands::predict::{run_predict, PredictArgs};
use autogp_cli::commands::train::{run_train, TrainArgs};
use autogp_cli::commands::variance::{run_variance_study, VarianceArgs};
use autogp_cli::error::EXIT_CONFIG;
use autogp_cli::{CliError, CliResult};
use clap::{Parser, Subcommand};

#[derive(Parser)]
#[command(name = "autogp", version, about = "Sparse variational Gaussian process training and diagnostics")]
struct Cli {
    /// Worker threads for objective evaluation; results do not depend on it.
    #[arg(long, global = true)]
    workers: Option<usize>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Train a model, or resume training from a checkpoint.
    Train {
        #[arg(long)]
        config: Option<PathBuf>,
        /// Resume from this checkpoint.
        #[arg(long)]
        checkpoint: Option<PathBuf>,
        #[arg(long)]
        seed: Option<u64>,
        /// Monte Carlo samples per training step.
        #[arg(long)]
        mc_samples: Option<usize>,
        /// Output directory for checkpoint.json and metrics.tsv.
        #[arg(long)]
        out: Option<PathBuf>,
        /// Stop after this many epochs; resume later with --checkpoint.
        #[arg(long)]
        stop_after_epochs: Option<u64>,
    },
    /// Print test metrics of a checkpoint as one key=value record.
    Evaluate {
        #[arg(long)]
        checkpoint: PathBuf,
        /// Use this config's dataset instead of the checkpoint's.
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long)]
        mc_samples: Option<usize>,
    },
    /// Write per-point predictions for a csv of inputs.
    Predict {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        input: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long)]
        mc_samples: Option<usize>,
    },
    /// Finite-difference check of every gradient group on a small instance.
    Gradcheck {
        #[arg(long)]
        config: PathBuf,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long, hide = true)]
        corrupt_group: Option<String>,
    },
    /// Compare reparameterized and score-function gradient variance.
    VarianceStudy {
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        checkpoint: Option<PathBuf>,
        #[arg(long)]
        seed: Option<u64>,
        /// Per-coordinate table.
        #[arg(long)]
        out: Option<PathBuf>,
    },
}

fn run(command: Command) -> CliResult<()> {
    match command {
        Command::Train {
            config,
            checkpoint,
            seed,
            mc_samples,
            out,
            stop_after_epochs,
        } => {
            let summary = run_train(&TrainArgs {
                config,
                checkpoint,
                seed,
                mc_samples,
                out,
                stop_after_epochs,
            })?;
            println!(
                "epochs={} total_epochs={} round={} converged={} checkpoint={} metrics={}",
                summary.epochs_run,
                summary.trainer.epoch,
                summary.trainer.round,
                summary.trainer.converged,
                summary.checkpoint_path.display(),
                summary.metrics_path.display()
            );
        }
        Command::Evaluate {
            checkpoint,
            config,
            seed,
            mc_samples,
        } => {
            let report = run_evaluate(&EvaluateArgs {
                checkpoint,
                config,
                seed,
                mc_samples,
            })?;
            println!("{report}");
        }
        Command::Predict {
            checkpoint,
            input,
            out,
            seed,
            mc_samples,
        } => {
            let n = run_predict(&PredictArgs {
                checkpoint,
                input,
                out,
                seed,
                mc_samples,
            })?;
            println!("predictions={n}");
        }
        Command::Gradcheck {
            config,
            seed,
            corrupt_group,
        } => {
            let corrupt = corrupt_group
                .map(|g| ParamGroup::parse(&g).ok_or_else(|| CliError::config("corrupt_group", format!("unknown group `{g}`"))))
                .transpose()?;
            let entries = run_gradcheck(&GradcheckArgs { config, seed, corrupt })?;
            println!("{REPORT_HEADER}");
            for e in &entries {
                println!("{e}");
            }
            verdict(&entries)?;
        }
        Command::VarianceStudy {
            config,
            checkpoint,
            seed,
            out,
        } => {
            let study = run_variance_study(&VarianceArgs {
                config,
                checkpoint,
                seed,
                out,
            })?;
            print!("{}", study.summary());
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) if !e.use_stderr() => {
            print!("{e}");
            return ExitCode::SUCCESS;
        }
        Err(e) => {
            let first = e.to_string().lines().next().unwrap_or("invalid arguments").trim_start_matches("error: ").to_string();
            eprintln!("{}", CliError::config("arguments", first).report_line());
            return ExitCode::from(EXIT_CONFIG as u8);
        }
    };
    if let Some(n) = cli.workers {
        if n == 0 {
            eprintln!("{}", CliError::config("workers", "must be at least 1").report_line());
            return ExitCode::from(EXIT_CONFIG as u8);
        }
        if let Err(e) = rayon::ThreadPoolBuilder::new().num_threads(n).build_global() {
            eprintln!("{}", CliError::config("workers", e.to_string()).report_line());
            return ExitCode::from(EXIT_CONFIG as u8);
        }
    }
    match run(cli.command) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("{}", e.report_line());
            ExitCode::from(e.exit_code() as u8)
        }
    }
}

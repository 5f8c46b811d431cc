//! `glimpse`: train, evaluate, and verify the goal-directed glimpse
//! classification pipeline.
//!
//! Exit codes: 0 success, 1 usage or configuration error, 2 verification
//! failure (gradcheck/oracle), 3 I/O or data-loading error.

mod commands;
mod config;

use clap::{Parser, Subcommand};
use glimpse_core::Error;
use std::path::PathBuf;
use std::process::ExitCode;

#[derive(Parser)]
#[command(
    name = "glimpse",
    about = "Goal-directed glimpse exploration and classification of partially observed images"
)]
struct Cli {
    /// JSON run configuration; defaults are used when omitted.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Master seed (overrides train.seed from the config).
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Rollout worker threads (default: all cores).
    #[arg(long, global = true)]
    workers: Option<usize>,
    /// Output directory (overrides out_dir from the config).
    #[arg(long, global = true)]
    out: Option<PathBuf>,
    /// Dotted config overrides, e.g. --set env.m=6 (repeatable).
    #[arg(long = "set", global = true, value_name = "KEY=VALUE")]
    sets: Vec<String>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Run the staged training schedule; writes metrics and checkpoints.
    Train {
        /// Continue from a checkpoint written by an earlier run.
        #[arg(long)]
        resume: Option<PathBuf>,
    },
    /// Evaluate a checkpoint on the test split over repeated stochastic runs.
    Eval {
        #[arg(long)]
        checkpoint: PathBuf,
        /// Number of stochastic evaluation runs (default: config eval_runs).
        #[arg(long)]
        runs: Option<usize>,
    },
    /// Evaluate the classifier head alone on complete, unmasked images.
    EvalClassifier {
        #[arg(long)]
        checkpoint: PathBuf,
    },
    /// Render one trajectory as PGM snapshots plus prediction CSV.
    Rollout {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long, default_value_t = 0)]
        image_index: usize,
        /// Semicolon-separated episode,step pairs, e.g. "0,0;1,0;3,4".
        #[arg(long)]
        snapshots: Option<String>,
    },
    /// Finite-difference verification of every differentiable op.
    Gradcheck {
        /// Random coordinates checked per op.
        #[arg(long, default_value_t = 120)]
        coords: usize,
    },
    /// Exhaustive-enumeration check of the gradient estimator on tiny
    /// instances (uses a 4x4 single-episode geometry unless overridden).
    Oracle {
        #[arg(long, default_value_t = 10)]
        instances: usize,
        /// Refuse instances whose trajectory space exceeds this cap.
        #[arg(long, default_value_t = 4096)]
        cap: usize,
    },
}

fn exit_code_for(error: &Error) -> u8 {
    match error {
        Error::Config(_) | Error::Usage(_) => 1,
        Error::Verification(_) => 2,
        Error::Load(_) | Error::Io(_) => 3,
    }
}

fn run(cli: Cli) -> glimpse_core::Result<()> {
    // The oracle runs on a tiny enumerable geometry unless the caller
    // supplies an explicit config.
    let run_config = match &cli.command {
        Command::Oracle { .. } if cli.config.is_none() => config::load_config_with_base(
            &commands::oracle_default_config(),
            &cli.sets,
            cli.seed,
            cli.out.as_deref(),
            cli.workers,
        )?,
        _ => config::load_config(
            cli.config.as_deref(),
            &cli.sets,
            cli.seed,
            cli.out.as_deref(),
            cli.workers,
        )?,
    };

    if let Some(workers) = run_config.workers {
        // Ignore the error when a pool already exists (e.g. in tests).
        let _ = rayon::ThreadPoolBuilder::new()
            .num_threads(workers)
            .build_global();
    }

    match &cli.command {
        Command::Train { resume } => commands::cmd_train(&run_config, resume.as_deref()),
        Command::Eval { checkpoint, runs } => commands::cmd_eval(&run_config, checkpoint, *runs),
        Command::EvalClassifier { checkpoint } => {
            commands::cmd_eval_classifier(&run_config, checkpoint)
        }
        Command::Rollout {
            checkpoint,
            image_index,
            snapshots,
        } => commands::cmd_rollout(&run_config, checkpoint, *image_index, snapshots.as_deref()),
        Command::Gradcheck { coords } => {
            commands::cmd_gradcheck(*coords, run_config.train.seed.wrapping_add(0xfd))
        }
        Command::Oracle { instances, cap } => commands::cmd_oracle(&run_config, *instances, *cap),
    }
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            // Help/version are successful exits; anything else is usage.
            let _ = e.print();
            return if e.use_stderr() {
                ExitCode::from(1)
            } else {
                ExitCode::SUCCESS
            };
        }
    };
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(error) => {
            eprintln!("error: {error}");
            ExitCode::from(exit_code_for(&error))
        }
    }
}

//! `lifthead` command-line front end.
//!
//! Exit codes: 0 success, 1 configuration or checkpoint error, 2 non-finite
//! training loss, 3 gradient check failure.

mod commands;
mod config;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use env_logger::Env;
use lifthead::LiftError;

use crate::commands::GradcheckFailed;
use crate::config::Overrides;

#[derive(Parser)]
#[command(name = "lifthead", version, about = "Train and inspect a transformer 3D pose lifting head")]
struct Cli {
    #[command(subcommand)]
    command: Command,
    #[command(flatten)]
    overrides: Overrides,
}

#[derive(Subcommand)]
enum Command {
    /// Train on the synthetic task, writing per-epoch and averaged checkpoints.
    Train,
    /// Evaluate a checkpoint on the held-out synthetic split.
    Eval {
        /// Checkpoint to load; defaults to the averaged model in --out.
        #[arg(long)]
        checkpoint: Option<PathBuf>,
    },
    /// Run the finite-difference gradient suite.
    Gradcheck {
        /// Scales the analytic gradient of the named check (test hook).
        #[arg(long, hide = true)]
        inject_fault: Option<String>,
    },
    /// Print parameter and FLOP accounting against the deconvolution head.
    Params,
    /// Print the learning rate for steps 1..=N.
    Schedule {
        #[arg(long, default_value_t = 4000)]
        steps: u64,
    },
}

fn exit_code(err: &anyhow::Error) -> u8 {
    if err.downcast_ref::<GradcheckFailed>().is_some() {
        return 3;
    }
    match err.downcast_ref::<LiftError>() {
        Some(LiftError::NonFiniteLoss { .. }) => 2,
        _ => 1,
    }
}

fn run(cli: Cli) -> anyhow::Result<()> {
    let cfg = config::resolve(&cli.overrides)?;
    print!("{}", cfg.to_tsv());
    match cli.command {
        Command::Train => commands::cmd_train(&cfg),
        Command::Eval { checkpoint } => {
            let path = checkpoint.unwrap_or_else(|| cfg.paths.out.join(lifthead::training::AVERAGED_CHECKPOINT));
            commands::cmd_eval(&cfg, &path)
        }
        Command::Gradcheck { inject_fault } => commands::cmd_gradcheck(inject_fault),
        Command::Params => commands::cmd_params(&cfg),
        Command::Schedule { steps } => commands::cmd_schedule(&cfg, steps),
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(Env::new().filter_or("LIFT_LOG_LEVEL", "error")).init();
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { ExitCode::from(1) } else { ExitCode::SUCCESS };
        }
    };
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(err) => {
            eprintln!("error: {err:#}");
            ExitCode::from(exit_code(&err))
        }
    }
}

//! `autotask` command-line driver.
//!
//! Exit codes: 0 on success, 1 for invalid input or configuration, 2 for
//! run-time or numeric failures (including a failed gradient check).

mod commands;
mod config;
mod error;

use std::path::PathBuf;
use std::process::ExitCode;

use autotask::data::Split;
use clap::{Args, Parser, Subcommand, ValueEnum};

use crate::config::{ConfigFlags, RunConfig};
use crate::error::CliError;

#[derive(Parser, Debug)]
#[command(name = "autotask", version, about = "Two-facet transformer for multi-task binary classification")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

/// Flags shared by every subcommand.
#[derive(Args, Debug, Clone)]
struct Common {
    /// Flat key=value config file; flags override its values.
    #[arg(long, value_name = "PATH")]
    config: Option<PathBuf>,
    #[arg(long, value_name = "U64")]
    seed: Option<u64>,
    /// Output directory.
    #[arg(long, value_name = "DIR", default_value = "out")]
    out: PathBuf,
    #[command(flatten)]
    keys: ConfigFlags,
}

#[derive(Clone, Copy, Debug, ValueEnum)]
enum SplitArg {
    Train,
    Calibration,
    Test,
}

impl From<SplitArg> for Split {
    fn from(s: SplitArg) -> Split {
        match s {
            SplitArg::Train => Split::Train,
            SplitArg::Calibration => Split::Calibration,
            SplitArg::Test => Split::Test,
        }
    }
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Generate synthetic train/calibration/test CSVs and a manifest.
    GenData {
        #[command(flatten)]
        common: Common,
    },
    /// Train a model on `--data DIR` and write a checkpoint and loss log.
    Train {
        #[command(flatten)]
        common: Common,
    },
    /// Evaluate a checkpoint on one split; writes eval.json and eval.txt.
    Eval {
        #[command(flatten)]
        common: Common,
        #[arg(long, value_enum, default_value = "test")]
        split: SplitArg,
        /// Fit per-task Platt calibration on the calibration split first.
        #[arg(long)]
        calibrate: bool,
    },
    /// Score one feature row or a CSV of rows; prints one score per line.
    Predict {
        #[command(flatten)]
        common: Common,
        /// Comma-separated raw features of a single row.
        #[arg(long, allow_hyphen_values = true)]
        features: Option<String>,
        /// Task of the `--features` row; 0 (or any untrained ID) is the
        /// unknown task.
        #[arg(long)]
        task_id: Option<usize>,
        /// CSV with a task_id column and f1..fk feature columns.
        #[arg(long, value_name = "PATH")]
        input: Option<PathBuf>,
    },
    /// Finite-difference check of every primitive and of a small model.
    Gradcheck {
        #[command(flatten)]
        common: Common,
        #[arg(long, hide = true, value_name = "OP")]
        corrupt_backward: Option<String>,
    },
    /// Train the three task-ID variants and the baseline, then compare them.
    Ablate {
        #[command(flatten)]
        common: Common,
    },
}

impl Command {
    fn common(&self) -> &Common {
        match self {
            Command::GenData { common }
            | Command::Train { common }
            | Command::Eval { common, .. }
            | Command::Predict { common, .. }
            | Command::Gradcheck { common, .. }
            | Command::Ablate { common } => common,
        }
    }
}

fn run(cli: &Cli) -> Result<(), CliError> {
    let common = cli.command.common();
    let cfg = RunConfig::load(common.config.as_deref(), &common.keys, common.seed)?;
    let out = &common.out;
    match &cli.command {
        Command::GenData { .. } => commands::gen_data(&cfg, out),
        Command::Train { .. } => commands::train_cmd(&cfg, out),
        Command::Eval { split, calibrate, .. } => commands::eval_cmd(&cfg, out, (*split).into(), *calibrate),
        Command::Predict {
            features, task_id, input, ..
        } => commands::predict_cmd(&cfg, features.as_deref(), *task_id, input.as_deref()),
        Command::Gradcheck { corrupt_backward, .. } => commands::gradcheck_cmd(&cfg, corrupt_backward.as_deref()),
        Command::Ablate { .. } => commands::ablate_cmd(&cfg, out),
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let code = if e.use_stderr() { 1 } else { 0 };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    match run(&cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code())
        }
    }
}

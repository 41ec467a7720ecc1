//! `ducat`: train and probe dummy-class adversarial training at desk
//! scale.
//!
//! Exit codes: 0 success, 1 runtime failure, 2 usage or config error.

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

use ducat_cli::config::{self, RunConfig};
use ducat_cli::{commands, CliError};

#[derive(Parser)]
#[command(
    name = "ducat",
    about = "Dummy-class adversarial training laboratory",
    after_help = "Run configs are flat key = value files; see `ducat schema` for every key."
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct Common {
    /// Run configuration file (defaults apply when omitted)
    #[arg(long)]
    config: Option<PathBuf>,
    /// Override the run seed
    #[arg(long)]
    seed: Option<u64>,
    /// Override the output directory
    #[arg(long)]
    out: Option<PathBuf>,
    /// Checkpoint path (repeatable where multiple models are analyzed)
    #[arg(long = "checkpoint")]
    checkpoints: Vec<PathBuf>,
}

#[derive(Subcommand)]
enum Command {
    /// Train a model and write checkpoints, metrics, and an eval table
    Train(Common),
    /// Evaluate checkpoints under the configured adversaries
    Eval(Common),
    /// Failure-structure analyses over trained checkpoints
    Analyze {
        #[command(subcommand)]
        kind: AnalyzeKind,
    },
    /// Sweep one hyper-parameter over a grid, one run per value per seed
    Ablate {
        #[command(flatten)]
        common: Common,
        /// t | alpha | beta1 | beta2
        #[arg(long)]
        dimension: String,
        /// Comma-separated values, run in the given order
        #[arg(long)]
        grid: String,
    },
    /// Robust accuracy across perturbation budgets
    BudgetSweep {
        #[command(flatten)]
        common: Common,
        /// Comma-separated budgets (floats or a/b fractions)
        #[arg(long)]
        epsilons: String,
    },
    /// Generate the configured dataset as train/test CSV files
    GenData(Common),
    /// Print every config key with its default and meaning
    Schema,
}

#[derive(Subcommand)]
enum AnalyzeKind {
    /// Histogram of how many models defend each sample
    Overlap(Common),
    /// Attack transfer between surrogate and target models
    Transfer(Common),
    /// Per-class confusion counts, optionally under attack
    Confusion {
        #[command(flatten)]
        common: Common,
        /// Attack the test set with the configured adversary first
        #[arg(long)]
        attacked: bool,
    },
    /// Seen-vs-strong robust accuracy gap for a hard-label and a two-hot model
    Toycase(Common),
}

fn resolve(common: &Common) -> Result<RunConfig, CliError> {
    let mut config = RunConfig::load(common.config.as_deref())?;
    if let Some(seed) = common.seed {
        config.set("seed", seed.to_string());
    }
    if let Some(out) = &common.out {
        config.set("out_dir", out.display().to_string());
    }
    Ok(config)
}

fn dispatch(cli: Cli) -> Result<(), CliError> {
    match cli.command {
        Command::Train(common) => commands::cmd_train(&resolve(&common)?),
        Command::Eval(common) => commands::cmd_eval(&resolve(&common)?, &common.checkpoints),
        Command::Analyze { kind } => match kind {
            AnalyzeKind::Overlap(common) => {
                commands::cmd_analyze_overlap(&resolve(&common)?, &common.checkpoints)
            }
            AnalyzeKind::Transfer(common) => {
                commands::cmd_analyze_transfer(&resolve(&common)?, &common.checkpoints)
            }
            AnalyzeKind::Confusion { common, attacked } => {
                commands::cmd_analyze_confusion(&resolve(&common)?, &common.checkpoints, attacked)
            }
            AnalyzeKind::Toycase(common) => {
                commands::cmd_analyze_toycase(&resolve(&common)?, &common.checkpoints)
            }
        },
        Command::Ablate {
            common,
            dimension,
            grid,
        } => commands::cmd_ablate(&resolve(&common)?, &dimension, &grid),
        Command::BudgetSweep { common, epsilons } => {
            commands::cmd_budget_sweep(&resolve(&common)?, &common.checkpoints, &epsilons)
        }
        Command::GenData(common) => commands::cmd_gen_data(&resolve(&common)?),
        Command::Schema => {
            print!("{}", config::schema_help());
            Ok(())
        }
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match dispatch(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(err) => {
            eprintln!("error: {}", err.message());
            ExitCode::from(err.exit_code())
        }
    }
}

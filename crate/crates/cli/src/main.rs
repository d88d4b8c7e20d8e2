mod commands;
mod config;
mod error;
mod figures;

use std::path::PathBuf;
use std::process::ExitCode;

use bandres::agents::AgentKind;
use bandres::environment::ScenarioMode;
use clap::{Parser, Subcommand};

use crate::config::{Precision, RunConfig};
use crate::error::CliError;

#[derive(Debug, Parser)]
#[command(name = "bandres", version, about = "Bandwidth reservation update simulator")]
struct Cli {
    /// Run configuration (TOML). Defaults apply when omitted.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Override the training and evaluation seeds.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Override the output directory.
    #[arg(long, global = true)]
    out: Option<PathBuf>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Build a price book from a spot-price history (or the synthetic walk).
    Ingest {
        /// Spot-price CSV; falls back to `data.spot_history`.
        input: Option<PathBuf>,
    },
    /// Train one Q-learning agent.
    Train {
        #[arg(long)]
        agent: Option<AgentKind>,
    },
    /// Evaluate baselines and checkpoints on one scenario.
    Eval {
        #[arg(long)]
        scenario: Option<ScenarioMode>,
        /// Checkpoints to include; defaults to every checkpoint of the run.
        #[arg(long)]
        checkpoint: Vec<PathBuf>,
    },
    /// Evaluate every policy on every scenario and write the summary table.
    Compare {
        #[arg(long)]
        checkpoint: Vec<PathBuf>,
    },
    /// Exhaustive optimum on small episodes.
    Oracle {
        #[arg(long)]
        checkpoint: Vec<PathBuf>,
    },
    /// Emit one CSV per figure from saved curves and reports.
    Figures,
}

fn load_config(cli: &Cli) -> Result<RunConfig, CliError> {
    let mut cfg = match &cli.config {
        Some(path) => RunConfig::load(path)?,
        None => RunConfig::default(),
    };
    if let Some(seed) = cli.seed {
        cfg.set_seed(seed);
    }
    if let Some(out) = &cli.out {
        cfg.output_dir = out.clone();
    }
    cfg.validate()?;
    Ok(cfg)
}

fn run(cli: Cli) -> Result<Vec<PathBuf>, CliError> {
    let cfg = load_config(&cli)?;
    macro_rules! with_scalar {
        ($f:ident ( $($arg:expr),* )) => {
            match cfg.precision {
                Precision::F32 => commands::$f::<f32>($($arg),*),
                Precision::F64 => commands::$f::<f64>($($arg),*),
            }
        };
    }
    match &cli.command {
        Command::Ingest { input } => commands::cmd_ingest(&cfg, input.as_deref()),
        Command::Train { agent } => with_scalar!(cmd_train(&cfg, agent.unwrap_or(cfg.agent.agent))),
        Command::Eval { scenario, checkpoint } => with_scalar!(cmd_eval(&cfg, *scenario, checkpoint)),
        Command::Compare { checkpoint } => with_scalar!(cmd_compare(&cfg, checkpoint)),
        Command::Oracle { checkpoint } => with_scalar!(cmd_oracle(&cfg, checkpoint)),
        Command::Figures => figures::cmd_figures(&cfg),
    }
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { ExitCode::from(2) } else { ExitCode::SUCCESS };
        }
    };
    match run(cli) {
        Ok(written) => {
            for p in written {
                println!("wrote {}", p.display());
            }
            ExitCode::SUCCESS
        }
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code())
        }
    }
}

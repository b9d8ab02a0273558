use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use gridpilot_core::runtime::commands::{run_command, Command};
use gridpilot_core::runtime::config::RunConfig;
use gridpilot_core::Error;

/// Feeder-head Volt-VAr control pipeline.
///
/// Log verbosity comes from `GRIDPILOT_LOG` (error, warn, info, debug, trace).
#[derive(Parser, Debug)]
#[command(name = "gridpilot", version)]
struct Cli {
    #[command(subcommand)]
    command: Cmd,
}

#[derive(Args, Debug, Clone)]
struct Common {
    /// TOML run configuration; defaults apply to omitted fields.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Master seed, overrides the config file.
    #[arg(long)]
    seed: Option<u64>,
    /// Output directory for artifacts.
    #[arg(long, default_value = "out")]
    out: PathBuf,
}

#[derive(Subcommand, Debug)]
enum Cmd {
    /// Generate scenarios and the train/test split.
    GenScenarios(Common),
    /// Train the state estimator and report test metrics.
    TrainDsse(Common),
    /// Evaluate a saved state estimator on the test split.
    EvalDsse(Common),
    /// Train the control agent.
    TrainAgent(Common),
    /// Baseline vs controlled sweep over the test split.
    Evaluate(Common),
    /// Stream test scenarios through the online loop with monitoring.
    RunOnline(Common),
    /// Grid-search the best global setpoint for each test scenario.
    Oracle(Common),
}

impl Cmd {
    fn split(&self) -> (Command, &Common) {
        match self {
            Cmd::GenScenarios(c) => (Command::GenScenarios, c),
            Cmd::TrainDsse(c) => (Command::TrainDsse, c),
            Cmd::EvalDsse(c) => (Command::EvalDsse, c),
            Cmd::TrainAgent(c) => (Command::TrainAgent, c),
            Cmd::Evaluate(c) => (Command::Evaluate, c),
            Cmd::RunOnline(c) => (Command::RunOnline, c),
            Cmd::Oracle(c) => (Command::Oracle, c),
        }
    }
}

fn exit_code(e: &Error) -> u8 {
    match e {
        Error::Config(_) | Error::Usage(_) => 2,
        Error::Io { .. } | Error::Csv(_) => 3,
        Error::Schema { .. } | Error::Topology(_) | Error::Reference(_) | Error::InvalidFeeder(_) => 4,
        Error::Mismatch(_) | Error::Checkpoint(_) => 5,
        Error::Diverged { .. } | Error::Infeasible(_) | Error::Numerical(_) | Error::Training { .. } => 6,
        _ => 1,
    }
}

fn run(cli: &Cli) -> Result<serde_json::Value, Error> {
    let (cmd, common) = cli.command.split();
    let mut cfg = match &common.config {
        Some(path) => RunConfig::load(path)?,
        None => RunConfig::default(),
    };
    if let Some(seed) = common.seed {
        cfg.seed = seed;
    }
    log::info!("{} -> {}", cmd.name(), common.out.display());
    run_command(cmd, &cfg, &common.out)
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().filter_or("GRIDPILOT_LOG", "info")).init();
    let cli = Cli::parse();
    match run(&cli) {
        Ok(summary) => {
            println!("{}", serde_json::to_string_pretty(&summary).expect("json serializes"));
            ExitCode::SUCCESS
        }
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(exit_code(&e))
        }
    }
}
